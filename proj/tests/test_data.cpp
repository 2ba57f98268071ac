#include "dfm/data.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

using namespace dfm;
using namespace dfm::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

SegmentFeatures sample_segment() {
    std::mt19937_64 rng(1);
    auto s = random_segment(FeatureDims{4, 6, 4}, 3, 2, 2, rng);
    s.video = FeatureMatrix();
    return s;
}

std::size_t format_offset(const std::vector<std::uint8_t>& bytes, const FeatureDims* dims = nullptr) {
    try {
        decode_features(bytes, dims);
    } catch (const FormatError& e) {
        return e.offset;
    }
    ADD_FAILURE() << "expected FormatError";
    return 0;
}

DatasetManifest small_manifest() {
    DatasetManifest m;
    m.dims = FeatureDims{4, 6, 4};
    for (int i = 0; i < 3; ++i) {
        SegmentRecord s;
        s.segment_id = "s" + std::to_string(i);
        s.teacher_id = i < 2 ? "t1" : "t2";
        s.lesson_id = s.teacher_id + "_l1";
        s.features = "features/" + s.segment_id + ".dfx";
        s.labels = {{Component::Nature, 2.0}, {Component::Questioning, 3.5}, {Component::Explanations, 1.0}};
        m.segments.push_back(s);
        for (Component c : kComponents) {
            int lo = static_cast<int>(std::floor(s.labels[c])), hi = static_cast<int>(std::ceil(s.labels[c]));
            m.rater_records.push_back({s.segment_id, "r1", c, lo});
            m.rater_records.push_back({s.segment_id, "r2", c, hi});
        }
    }
    m.student_records.push_back({"p1", "t1", 0.5, 1.5, 2.5});
    return m;
}

}  // namespace

TEST(SegmentBoundaries, Examples) {
    using W = std::vector<std::pair<double, double>>;
    EXPECT_EQ(segment_boundaries(2400), (W{{0, 960}, {960, 1920}, {1920, 2400}}));
    EXPECT_EQ(segment_boundaries(2280), (W{{0, 960}, {960, 2280}}));
    EXPECT_EQ(segment_boundaries(900), (W{{0, 900}}));
    EXPECT_EQ(segment_boundaries(960), (W{{0, 960}}));
    EXPECT_EQ(segment_boundaries(1300), (W{{0, 1300}}));
    EXPECT_THROW(segment_boundaries(0), DataError);
    EXPECT_THROW(segment_boundaries(-5), DataError);
}

TEST(SegmentBoundaries, TileTheLesson) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(1.0, 20000.0);
    for (int i = 0; i < 500; ++i) {
        double d = u(rng);
        auto w = segment_boundaries(d);
        ASSERT_FALSE(w.empty());
        EXPECT_EQ(w.front().first, 0.0);
        EXPECT_EQ(w.back().second, d);
        for (std::size_t k = 0; k < w.size(); ++k) {
            EXPECT_LT(w[k].first, w[k].second);
            if (k > 0) {
                EXPECT_EQ(w[k].first, w[k - 1].second);
            }
            if (k + 1 < w.size()) {
                EXPECT_EQ(w[k].second - w[k].first, kSegmentSeconds);
            }
        }
        if (w.size() > 1) {
            EXPECT_GE(w.back().second - w.back().first, kMinTailSeconds);
            EXPECT_LT(w.back().second - w.back().first, kSegmentSeconds + kMinTailSeconds);
        }
    }
}

TEST(Aggregation, WordsToUtterances) {
    FeatureMatrix words(3, 2);
    words.values = {1, 3, 3, 5, 7, 9};
    auto one = aggregate_words_to_utterances(words, {{0, 3}});
    EXPECT_EQ(one.rows, 1u);
    EXPECT_FLOAT_EQ(one(0, 0), 11.0f / 3);
    EXPECT_FLOAT_EQ(one(0, 1), 17.0f / 3);
    auto two = aggregate_words_to_utterances(words, {{0, 2}, {2, 3}});
    EXPECT_EQ(two(0, 0), 2.0f);
    EXPECT_EQ(two(0, 1), 4.0f);
    EXPECT_EQ(two(1, 0), 7.0f);
    EXPECT_EQ(two(1, 1), 9.0f);
    EXPECT_THROW(aggregate_words_to_utterances(words, {{0, 0}, {0, 3}}), DataError);
    EXPECT_THROW(aggregate_words_to_utterances(words, {{0, 2}, {1, 3}}), DataError);
    EXPECT_THROW(aggregate_words_to_utterances(words, {{0, 2}}), DataError);
}

TEST(Aggregation, Chunks) {
    FeatureMatrix frames(25, 2);
    for (std::size_t r = 0; r < 25; ++r) {
        frames(r, 0) = static_cast<float>(r);
        frames(r, 1) = 3.0f;
    }
    auto c = aggregate_to_chunks(frames, 1.0);
    ASSERT_EQ(c.rows, 3u);
    EXPECT_FLOAT_EQ(c(0, 0), 4.5f);
    EXPECT_FLOAT_EQ(c(1, 0), 14.5f);
    EXPECT_FLOAT_EQ(c(2, 0), 22.0f);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(c(r, 1), 3.0f);
    for (std::size_t f : {1u, 9u, 10u, 11u, 99u, 100u}) {
        for (double rate : {1.0, 2.5, 16.0}) {
            FeatureMatrix m(f, 1);
            auto out = aggregate_to_chunks(m, rate);
            EXPECT_EQ(out.rows, static_cast<std::size_t>(std::ceil(f / (rate * 10.0))));
        }
    }
    EXPECT_THROW(aggregate_to_chunks(FeatureMatrix(), 1.0), DataError);
}

TEST(Aggregation, CommutesWithScaling) {
    std::mt19937_64 rng(3);
    auto x = random_matrix(23, 3, rng);
    FeatureMatrix scaled = x;
    const float alpha = 2.5f;
    for (auto& v : scaled.values) v *= alpha;
    auto a = aggregate_to_chunks(x, 2.0);
    auto b = aggregate_to_chunks(scaled, 2.0);
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(b.values[i], alpha * a.values[i], 1e-5);
    std::vector<std::pair<std::size_t, std::size_t>> spans = {{0, 5}, {5, 6}, {6, 23}};
    auto u = aggregate_words_to_utterances(x, spans);
    auto v = aggregate_words_to_utterances(scaled, spans);
    for (std::size_t i = 0; i < u.values.size(); ++i) EXPECT_NEAR(v.values[i], alpha * u.values[i], 1e-5);
}

TEST(RaterScores, Average) {
    std::vector<RaterRecord> recs = {{"a", "r1", Component::Nature, 3}, {"a", "r2", Component::Nature, 4},
                                     {"b", "r1", Component::Nature, 2}, {"b", "r3", Component::Nature, 2},
                                     {"c", "r1", Component::Nature, 1}, {"c", "r2", Component::Nature, 4},
                                     {"d", "r1", Component::Nature, 1}};
    EXPECT_EQ(average_rater_scores(recs, "a", Component::Nature), 3.5);
    EXPECT_EQ(average_rater_scores(recs, "b", Component::Nature), 2.0);
    EXPECT_EQ(average_rater_scores(recs, "c", Component::Nature), 2.5);
    EXPECT_THROW(average_rater_scores(recs, "d", Component::Nature), DataError);
    EXPECT_THROW(average_rater_scores(recs, "a", Component::Questioning), DataError);
}

TEST(FeatureFile, RoundTripIsBitExact) {
    auto dir = scratch_dir("dfx_roundtrip");
    auto s = sample_segment();
    s.text.values[0] = -0.0f;
    s.text.values[1] = std::numeric_limits<float>::denorm_min();
    write_feature_file(dir / "a.dfx", s);
    auto back = read_feature_file(dir / "a.dfx");
    EXPECT_EQ(back.text, s.text);
    EXPECT_EQ(back.audio, s.audio);
    EXPECT_EQ(back.video.rows, 0u);
    EXPECT_TRUE(std::signbit(back.text.values[0]));
    EXPECT_EQ(encode_features(back), encode_features(s));
}

TEST(FeatureFile, LayoutIsLittleEndian) {
    SegmentFeatures s;
    s.text = FeatureMatrix(1, 1);
    s.text.values = {1.0f};
    auto b = encode_features(s);
    ASSERT_EQ(b.size(), 4u + 3 * 8 + 4);
    EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "DFX1");
    EXPECT_EQ(b[4], 1);  // rows
    EXPECT_EQ(b[8], 1);  // cols
    // 1.0f = 0x3f800000
    EXPECT_EQ(b[12], 0x00);
    EXPECT_EQ(b[15], 0x3f);
}

TEST(FeatureFile, ErrorsCarryByteOffsets) {
    auto bytes = encode_features(sample_segment());
    auto bad_magic = bytes;
    bad_magic[1] = 'Y';
    EXPECT_EQ(format_offset(bad_magic), 0u);

    // cut inside the text values: text header spans bytes 4..11
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 20);
    EXPECT_EQ(format_offset(cut), 12u);
    std::vector<std::uint8_t> header_cut(bytes.begin(), bytes.begin() + 6);
    EXPECT_EQ(format_offset(header_cut), 4u);

    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_EQ(format_offset(trailing), bytes.size());

    FeatureDims wrong{5, 6, 4};
    EXPECT_EQ(format_offset(bytes, &wrong), 8u);

    auto nan_bytes = bytes;
    const std::uint32_t nan_bits = 0x7fc00000u;
    const std::size_t at = 12 + 4 * 5;
    for (int i = 0; i < 4; ++i) nan_bytes[at + i] = static_cast<std::uint8_t>(nan_bits >> (8 * i));
    EXPECT_EQ(format_offset(nan_bytes), at);
}

TEST(FeatureFile, EmptyTextIsEncodable) {
    SegmentFeatures s;
    s.audio = FeatureMatrix(2, 3);
    auto back = decode_features(encode_features(s));
    EXPECT_EQ(back.text.rows, 0u);
    EXPECT_EQ(back.audio.rows, 2u);
}

TEST(FeatureFile, ReadErrorNamesPath) {
    auto dir = scratch_dir("dfx_bad");
    {
        std::ofstream out(dir / "bad.dfx", std::ios::binary);
        out << "NOPE";
    }
    try {
        read_feature_file(dir / "bad.dfx");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("bad.dfx"), std::string::npos);
        EXPECT_EQ(e.offset, 0u);
    }
    EXPECT_THROW(read_feature_file(dir / "missing.dfx"), DataError);
}

TEST(Manifest, JsonRoundTrip) {
    auto m = small_manifest();
    EXPECT_NO_THROW(m.validate());
    auto back = manifest_from_json(manifest_to_json(m));
    EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
    EXPECT_EQ(back.dims, m.dims);
    EXPECT_EQ(back.segments.size(), 3u);
    EXPECT_EQ(back.segments[1].labels.at(Component::Questioning), 3.5);
    EXPECT_EQ(back.student_records[0].interest, 1.5);
    EXPECT_EQ(back.teachers(), (std::vector<std::string>{"t1", "t2"}));
    EXPECT_THROW(manifest_from_json("{not json"), DataError);
    EXPECT_THROW(manifest_from_json("{\"segments\": 3}"), DataError);
}

TEST(Manifest, ValidationRejectsBadContent) {
    {
        auto m = small_manifest();
        m.segments[1].segment_id = "s0";
        EXPECT_THROW(m.validate(), DataError);
    }
    {
        auto m = small_manifest();
        m.segments[0].labels[Component::Nature] = 2.25;
        EXPECT_THROW(m.validate(), DataError);
    }
    {
        auto m = small_manifest();
        m.segments[0].labels.erase(Component::Explanations);
        EXPECT_THROW(m.validate(), DataError);
    }
    {
        auto m = small_manifest();
        m.rater_records[0].score = 4;  // mean no longer equals the label
        EXPECT_THROW(m.validate(), DataError);
    }
    {
        auto m = small_manifest();
        m.rater_records.push_back({"s0", "r3", Component::Nature, 2});
        EXPECT_THROW(m.validate(), DataError);
    }
    {
        auto m = small_manifest();
        m.rater_records[1].rater_id = "r1";
        EXPECT_THROW(m.validate(), DataError);
    }
    {
        auto m = small_manifest();
        m.rater_records.clear();
        EXPECT_NO_THROW(m.validate());
    }
}

TEST(Dataset, LoadReportsSegmentOnBadFeatures) {
    auto dir = scratch_dir("dataset_load");
    auto m = small_manifest();
    std::mt19937_64 rng(4);
    std::filesystem::create_directories(dir / "features");
    for (const auto& s : m.segments) write_feature_file(dir / s.features, random_segment(m.dims, 2, 2, 2, rng));
    write_manifest(dir / "manifest.json", m);
    auto ds = Dataset::load(dir / "manifest.json");
    EXPECT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds.features[2].segment_id, "s2");
    EXPECT_EQ(ds.features[2].teacher_id, "t2");
    EXPECT_EQ(ds.select_teachers({"t2"}), (std::vector<std::size_t>{2}));

    write_feature_file(dir / m.segments[1].features, random_segment(FeatureDims{5, 6, 4}, 2, 2, 2, rng));
    try {
        Dataset::load(dir / "manifest.json");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("s1"), std::string::npos) << e.what();
    }
}

TEST(Synthetic, SizesAndDeterminism) {
    SynthConfig cfg;
    cfg.dims = FeatureDims{6, 8, 6};
    cfg.n_teachers = 30;
    cfg.segments_per_teacher = 4;
    cfg.seed = 7;
    auto a = scratch_dir("synth_a");
    auto b = scratch_dir("synth_b");
    auto da = generate_synthetic(cfg, a);
    generate_synthetic(cfg, b);
    EXPECT_EQ(da.size(), 120u);
    EXPECT_EQ(da.manifest.teachers().size(), 30u);
    EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
    for (const auto& s : da.manifest.segments) EXPECT_EQ(slurp(a / s.features), slurp(b / s.features)) << s.segment_id;

    auto loaded = Dataset::load(a / "manifest.json");
    for (std::size_t i = 0; i < da.size(); ++i) {
        EXPECT_EQ(loaded.features[i].text, da.features[i].text);
        EXPECT_EQ(loaded.features[i].audio.rows, loaded.features[i].video.rows);
        EXPECT_GE(loaded.features[i].text.rows, 1u);
    }

    cfg.seed = 8;
    auto c = scratch_dir("synth_c");
    generate_synthetic(cfg, c);
    EXPECT_NE(slurp(a / "manifest.json"), slurp(c / "manifest.json"));
}

TEST(Synthetic, RaterRecordsAverageToLabels) {
    auto cfg = tiny_synth(12, 5);
    cfg.rater_sd = 0.6;
    auto ds = generate_synthetic(cfg, scratch_dir("synth_raters"));
    std::map<std::pair<std::string, Component>, std::vector<RaterRecord>> by;
    for (const auto& r : ds.manifest.rater_records) by[{r.segment_id, r.component}].push_back(r);
    for (const auto& s : ds.manifest.segments) {
        for (Component c : kComponents) {
            const auto& recs = by[{s.segment_id, c}];
            ASSERT_EQ(recs.size(), 2u);
            EXPECT_NE(recs[0].rater_id, recs[1].rater_id);
            EXPECT_EQ((recs[0].score + recs[1].score) / 2.0, s.labels.at(c));
            EXPECT_EQ(average_rater_scores(ds.manifest.rater_records, s.segment_id, c), s.labels.at(c));
        }
    }
}

TEST(Synthetic, FullCorrelationGivesIdenticalLabels) {
    auto cfg = tiny_synth(10, 6);
    cfg.rho = 1.0;
    auto ds = generate_synthetic(cfg, scratch_dir("synth_rho"));
    for (const auto& s : ds.manifest.segments) {
        EXPECT_EQ(s.labels.at(Component::Nature), s.labels.at(Component::Questioning));
        EXPECT_EQ(s.labels.at(Component::Nature), s.labels.at(Component::Explanations));
    }
}

TEST(Synthetic, LinearReadoutOracle) {
    SynthConfig cfg;
    cfg.dims = FeatureDims{16, 16, 16};
    cfg.seed = 9;
    cfg.rater_sd = 0.0;
    cfg.noise_sd = 0.0;
    auto strong = generate_synthetic(cfg, scratch_dir("synth_strong"));
    for (auto [c, k] : linear_readout_qwk(strong, {Modality::Text})) EXPECT_GT(k, 0.95) << component_key(c);

    cfg.signal = {{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}};
    cfg.noise_sd = 0.1;
    auto none = generate_synthetic(cfg, scratch_dir("synth_none"));
    for (auto [c, k] : linear_readout_qwk(none, {Modality::Text})) EXPECT_LT(std::abs(k), 0.3) << component_key(c);
}

TEST(Synthetic, StudentsFollowTeacherScores) {
    auto cfg = tiny_synth(6, 10);
    cfg.students_per_teacher = 3;
    cfg.outcome_noise_sd = 0.0;
    auto ds = generate_synthetic(cfg, scratch_dir("synth_students"));
    ASSERT_EQ(ds.manifest.student_records.size(), 18u);
    for (const auto& st : ds.manifest.student_records) {
        double total = 0.0;
        int n = 0;
        for (const auto& s : ds.manifest.segments)
            if (s.teacher_id == st.teacher_id) {
                total += s.labels.at(Component::Nature);
                ++n;
            }
        // one segment per lesson, so the two-stage mean is the plain mean
        EXPECT_NEAR(st.test_score, total / n, 1e-12);
    }
}

TEST(Synthetic, InvalidConfigRejected) {
    SynthConfig cfg;
    cfg.rho = 1.5;
    EXPECT_THROW(cfg.validate(), UsageError);
    cfg.rho = 0.3;
    cfg.signal[0][0] = -0.1;
    EXPECT_THROW(cfg.validate(), UsageError);
}
