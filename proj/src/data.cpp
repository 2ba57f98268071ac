#include "dfm/data.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>

namespace dfm {

namespace {

using Json = nlohmann::ordered_json;

constexpr std::array<std::uint8_t, 4> kFeatureMagic = {'D', 'F', 'X', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, std::size_t start) : bytes_(bytes), pos_(start) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    void floats(std::vector<float>& out, std::size_t n, const char* what) {
        need(n * 4, what);
        out.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            std::uint32_t v = 0;
            for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + 4 * k + i]) << (8 * i);
            out[k] = std::bit_cast<float>(v);
        }
        pos_ += n * 4;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) {
        if (remaining() < n) throw FormatError(std::string("truncated feature file while reading ") + what, pos_);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

std::string padded(std::size_t v, int width) {
    std::string s = std::to_string(v);
    return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

std::string_view modality_key(Modality m) {
    switch (m) {
        case Modality::Text: return "text";
        case Modality::Audio: return "audio";
        case Modality::Video: return "video";
    }
    return "?";
}

char modality_letter(Modality m) {
    switch (m) {
        case Modality::Text: return 'T';
        case Modality::Audio: return 'A';
        case Modality::Video: return 'V';
    }
    return '?';
}

const FeatureMatrix& SegmentFeatures::get(Modality m) const {
    switch (m) {
        case Modality::Text: return text;
        case Modality::Audio: return audio;
        case Modality::Video: return video;
    }
    return text;
}

FeatureMatrix& SegmentFeatures::get(Modality m) {
    return const_cast<FeatureMatrix&>(std::as_const(*this).get(m));
}

std::size_t FeatureDims::get(Modality m) const {
    switch (m) {
        case Modality::Text: return text;
        case Modality::Audio: return audio;
        case Modality::Video: return video;
    }
    return 0;
}

// ---- feature files -------------------------------------------------------------

std::vector<std::uint8_t> encode_features(const SegmentFeatures& features) {
    std::vector<std::uint8_t> out(kFeatureMagic.begin(), kFeatureMagic.end());
    for (Modality m : kModalities) {
        const auto& mat = features.get(m);
        if (mat.values.size() != mat.rows * mat.cols) throw ShapeError("feature matrix size mismatch");
        put_u32(out, static_cast<std::uint32_t>(mat.rows));
        put_u32(out, static_cast<std::uint32_t>(mat.cols));
        out.reserve(out.size() + mat.values.size() * 4);
        for (float v : mat.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

SegmentFeatures decode_features(std::span<const std::uint8_t> bytes, const FeatureDims* expected) {
    if (bytes.size() < 4 || !std::equal(kFeatureMagic.begin(), kFeatureMagic.end(), bytes.begin())) {
        throw FormatError("bad feature file magic (expected DFX1)", 0);
    }
    Reader reader(bytes, 4);
    SegmentFeatures seg;
    for (Modality m : kModalities) {
        auto& mat = seg.get(m);
        const std::string name(modality_key(m));
        mat.rows = reader.u32((name + " rows").c_str());
        const std::size_t cols_at = reader.pos();
        mat.cols = reader.u32((name + " cols").c_str());
        if (expected && mat.rows > 0 && mat.cols != expected->get(m)) {
            throw FormatError(name + " width " + std::to_string(mat.cols) + " does not match manifest width " +
                                  std::to_string(expected->get(m)),
                              cols_at);
        }
        const std::size_t values_at = reader.pos();
        reader.floats(mat.values, mat.rows * mat.cols, (name + " values").c_str());
        for (std::size_t k = 0; k < mat.values.size(); ++k) {
            if (!std::isfinite(mat.values[k])) {
                throw FormatError("non-finite " + name + " feature value", values_at + 4 * k);
            }
        }
    }
    if (reader.remaining() != 0) throw FormatError("trailing bytes after video block", reader.pos());
    return seg;
}

void write_feature_file(const std::filesystem::path& path, const SegmentFeatures& features) {
    const auto bytes = encode_features(features);
    write_text(path, std::string(bytes.begin(), bytes.end()));
}

SegmentFeatures read_feature_file(const std::filesystem::path& path, const FeatureDims* expected) {
    const auto bytes = read_bytes(path);
    try {
        return decode_features(bytes, expected);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.reason, e.offset);
    }
}

// ---- manifest -----------------------------------------------------------------

void DatasetManifest::validate() const {
    std::set<std::string> ids;
    for (const auto& s : segments) {
        if (s.segment_id.empty() || s.teacher_id.empty() || s.lesson_id.empty()) {
            throw DataError("segment with empty identifier (segment '" + s.segment_id + "')");
        }
        if (!ids.insert(s.segment_id).second) throw DataError("duplicate segment id " + s.segment_id);
        for (Component c : kComponents) {
            auto it = s.labels.find(c);
            if (it == s.labels.end()) {
                throw DataError("segment " + s.segment_id + " lacks a " + std::string(component_key(c)) + " label");
            }
            if (!is_rating(it->second)) {
                throw DataError("segment " + s.segment_id + " has off-scale " + std::string(component_key(c)) +
                                " label " + std::to_string(it->second));
            }
        }
    }
    if (rater_records.empty()) return;
    std::map<std::pair<std::string, Component>, std::vector<const RaterRecord*>> by_key;
    for (const auto& r : rater_records) {
        if (!ids.count(r.segment_id)) throw DataError("rater record for unknown segment " + r.segment_id);
        if (r.score < 1 || r.score > 4) {
            throw DataError("rater " + r.rater_id + " score " + std::to_string(r.score) + " outside 1..4");
        }
        by_key[{r.segment_id, r.component}].push_back(&r);
    }
    for (const auto& s : segments) {
        for (Component c : kComponents) {
            const auto& recs = by_key[{s.segment_id, c}];
            if (recs.size() != 2 || recs[0]->rater_id == recs[1]->rater_id) {
                throw DataError("segment " + s.segment_id + " needs exactly two distinct raters for " +
                                std::string(component_key(c)));
            }
            const double mean = (recs[0]->score + recs[1]->score) / 2.0;
            if (mean != s.labels.at(c)) {
                throw DataError("segment " + s.segment_id + " " + std::string(component_key(c)) +
                                " label does not equal the mean of its rater scores");
            }
        }
    }
}

const SegmentRecord& DatasetManifest::segment(const std::string& id) const {
    for (const auto& s : segments)
        if (s.segment_id == id) return s;
    throw DataError("unknown segment " + id);
}

std::vector<std::string> DatasetManifest::teachers() const {
    std::set<std::string> t;
    for (const auto& s : segments) t.insert(s.teacher_id);
    return {t.begin(), t.end()};
}

std::string manifest_to_json(const DatasetManifest& manifest) {
    Json doc;
    doc["dims"] = {{"text", manifest.dims.text}, {"audio", manifest.dims.audio}, {"video", manifest.dims.video}};
    Json segs = Json::array();
    for (const auto& s : manifest.segments) {
        Json labels;
        for (Component c : kComponents) {
            if (s.labels.count(c)) labels[std::string(component_key(c))] = s.labels.at(c);
        }
        segs.push_back({{"segment_id", s.segment_id},
                        {"teacher_id", s.teacher_id},
                        {"lesson_id", s.lesson_id},
                        {"features", s.features},
                        {"labels", labels},
                        {"duration_s", s.duration_s}});
    }
    doc["segments"] = segs;
    Json raters = Json::array();
    for (const auto& r : manifest.rater_records) {
        raters.push_back({{"segment_id", r.segment_id},
                          {"rater_id", r.rater_id},
                          {"component", std::string(component_key(r.component))},
                          {"score", r.score}});
    }
    doc["rater_records"] = raters;
    Json students = Json::array();
    for (const auto& s : manifest.student_records) {
        students.push_back({{"student_id", s.student_id},
                            {"teacher_id", s.teacher_id},
                            {"test_score", s.test_score},
                            {"interest", s.interest},
                            {"self_efficacy", s.self_efficacy}});
    }
    doc["student_records"] = students;
    return doc.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
    DatasetManifest m;
    try {
        const Json doc = Json::parse(text);
        if (doc.contains("dims")) {
            const auto& d = doc.at("dims");
            m.dims.text = d.value("text", m.dims.text);
            m.dims.audio = d.value("audio", m.dims.audio);
            m.dims.video = d.value("video", m.dims.video);
        }
        for (const auto& s : doc.at("segments")) {
            SegmentRecord rec;
            rec.segment_id = s.at("segment_id").get<std::string>();
            rec.teacher_id = s.at("teacher_id").get<std::string>();
            rec.lesson_id = s.at("lesson_id").get<std::string>();
            rec.features = s.at("features").get<std::string>();
            rec.duration_s = s.value("duration_s", 0.0);
            for (const auto& [key, value] : s.at("labels").items()) {
                rec.labels[parse_component(key)] = value.get<double>();
            }
            m.segments.push_back(std::move(rec));
        }
        if (doc.contains("rater_records")) {
            for (const auto& r : doc.at("rater_records")) {
                m.rater_records.push_back({r.at("segment_id").get<std::string>(), r.at("rater_id").get<std::string>(),
                                           parse_component(r.at("component").get<std::string>()),
                                           r.at("score").get<int>()});
            }
        }
        if (doc.contains("student_records")) {
            for (const auto& s : doc.at("student_records")) {
                m.student_records.push_back({s.at("student_id").get<std::string>(),
                                             s.at("teacher_id").get<std::string>(), s.at("test_score").get<double>(),
                                             s.at("interest").get<double>(), s.at("self_efficacy").get<double>()});
            }
        }
    } catch (const Json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    } catch (const UsageError& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    try {
        return manifest_from_json(std::string(bytes.begin(), bytes.end()));
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    write_text(path, manifest_to_json(manifest));
}

Dataset Dataset::load(const std::filesystem::path& manifest_path) {
    Dataset ds;
    ds.root = manifest_path.parent_path();
    ds.manifest = read_manifest(manifest_path);
    ds.manifest.validate();
    ds.features.reserve(ds.manifest.segments.size());
    for (const auto& rec : ds.manifest.segments) {
        SegmentFeatures f;
        try {
            f = read_feature_file(ds.root / rec.features, &ds.manifest.dims);
        } catch (const std::exception& e) {
            throw DataError("segment " + rec.segment_id + ": " + e.what());
        }
        f.segment_id = rec.segment_id;
        f.teacher_id = rec.teacher_id;
        f.lesson_id = rec.lesson_id;
        f.duration_s = rec.duration_s;
        ds.features.push_back(std::move(f));
    }
    return ds;
}

std::vector<std::size_t> Dataset::select_teachers(const std::vector<std::string>& teachers) const {
    const std::set<std::string> wanted(teachers.begin(), teachers.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.segments.size(); ++i) {
        if (wanted.count(manifest.segments[i].teacher_id)) out.push_back(i);
    }
    return out;
}

// ---- preprocessing --------------------------------------------------------------

std::vector<std::pair<double, double>> segment_boundaries(double lesson_duration_s) {
    if (!(lesson_duration_s > 0.0)) throw DataError("lesson duration must be positive");
    std::vector<std::pair<double, double>> out;
    double start = 0.0;
    while (lesson_duration_s - start > kSegmentSeconds) {
        out.emplace_back(start, start + kSegmentSeconds);
        start += kSegmentSeconds;
    }
    const double tail = lesson_duration_s - start;
    if (!out.empty() && tail < kMinTailSeconds) {
        out.back().second = lesson_duration_s;
    } else {
        out.emplace_back(start, lesson_duration_s);
    }
    return out;
}

FeatureMatrix aggregate_words_to_utterances(const FeatureMatrix& words,
                                            const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
    FeatureMatrix out(spans.size(), words.cols);
    std::size_t expected_begin = 0;
    for (std::size_t u = 0; u < spans.size(); ++u) {
        const auto [begin, end] = spans[u];
        if (end <= begin) throw DataError("utterance " + std::to_string(u) + " has an empty word span");
        if (begin != expected_begin) {
            throw DataError("utterance " + std::to_string(u) + " span overlaps or leaves a gap after word " +
                            std::to_string(expected_begin));
        }
        if (end > words.rows) throw DataError("utterance span exceeds the word count");
        auto dst = out.row(u);
        for (std::size_t w = begin; w < end; ++w) {
            const auto src = words.row(w);
            for (std::size_t j = 0; j < words.cols; ++j) dst[j] += src[j];
        }
        const float inv = 1.0f / static_cast<float>(end - begin);
        for (auto& v : dst) v *= inv;
        expected_begin = end;
    }
    if (expected_begin != words.rows) throw DataError("utterance spans do not cover every word");
    return out;
}

FeatureMatrix aggregate_to_chunks(const FeatureMatrix& frames, double rate_hz, double window_s) {
    if (frames.rows == 0) throw DataError("aggregate_to_chunks: no frames");
    if (!(rate_hz > 0.0) || !(window_s > 0.0)) throw DataError("aggregate_to_chunks: rate and window must be positive");
    const auto per_window = static_cast<std::size_t>(std::max(1.0, std::round(rate_hz * window_s)));
    const std::size_t chunks = (frames.rows + per_window - 1) / per_window;
    FeatureMatrix out(chunks, frames.cols);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t begin = c * per_window;
        const std::size_t end = std::min(frames.rows, begin + per_window);
        auto dst = out.row(c);
        for (std::size_t f = begin; f < end; ++f) {
            const auto src = frames.row(f);
            for (std::size_t j = 0; j < frames.cols; ++j) dst[j] += src[j];
        }
        const float inv = 1.0f / static_cast<float>(end - begin);
        for (auto& v : dst) v *= inv;
    }
    return out;
}

double average_rater_scores(const std::vector<RaterRecord>& records, const std::string& segment_id,
                            Component component) {
    std::vector<int> scores;
    for (const auto& r : records) {
        if (r.segment_id == segment_id && r.component == component) scores.push_back(r.score);
    }
    if (scores.size() != 2) {
        throw DataError("segment " + segment_id + " has " + std::to_string(scores.size()) + " " +
                        std::string(component_key(component)) + " ratings, expected 2");
    }
    for (int s : scores) {
        if (s < 1 || s > 4) throw DataError("rater score outside 1..4 for segment " + segment_id);
    }
    return (scores[0] + scores[1]) / 2.0;
}

// ---- synthetic data ----------------------------------------------------------------

void SynthConfig::validate() const {
    if (n_teachers == 0 || segments_per_teacher == 0 || segments_per_lesson == 0) {
        throw UsageError("synthetic dataset needs at least one teacher, segment and lesson");
    }
    if (text_len_min == 0 || chunk_len_min == 0 || text_len_min > text_len_max || chunk_len_min > chunk_len_max) {
        throw UsageError("invalid synthetic sequence length range");
    }
    for (const auto& row : signal)
        for (double s : row)
            if (s < 0.0 || s > 1.0) throw UsageError("signal strength must lie in [0, 1]");
    if (rho < 0.0 || rho > 1.0) throw UsageError("rho must lie in [0, 1]");
    if (noise_sd < 0.0 || rater_sd < 0.0 || outcome_noise_sd < 0.0) throw UsageError("noise levels must be >= 0");
    if (n_raters < 2) throw UsageError("need at least two synthetic raters");
}

Dataset generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& root) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // fixed random unit direction per (modality, component)
    std::array<std::array<std::vector<double>, 3>, 3> directions;
    for (std::size_t m = 0; m < 3; ++m) {
        const std::size_t dim = cfg.dims.get(kModalities[m]);
        for (std::size_t c = 0; c < 3; ++c) {
            auto& d = directions[m][c];
            d.resize(dim);
            double norm = 0.0;
            for (auto& v : d) {
                v = gauss(rng);
                norm += v * v;
            }
            norm = std::sqrt(norm);
            for (auto& v : d) v /= norm;
        }
    }

    DatasetManifest manifest;
    manifest.dims = cfg.dims;
    std::vector<SegmentFeatures> features;
    std::uniform_int_distribution<std::size_t> text_len(cfg.text_len_min, cfg.text_len_max);
    std::uniform_int_distribution<std::size_t> chunk_len(cfg.chunk_len_min, cfg.chunk_len_max);

    std::vector<std::string> rater_pool;
    for (std::size_t r = 0; r < cfg.n_raters; ++r) rater_pool.push_back("r" + padded(r + 1, 2));

    const int id_width = cfg.n_teachers >= 100 ? 3 : 2;
    for (std::size_t t = 0; t < cfg.n_teachers; ++t) {
        const std::string teacher = "t" + padded(t + 1, id_width);
        std::array<std::string, 2> raters;
        for (std::size_t s = 0; s < cfg.segments_per_teacher; ++s) {
            const std::size_t lesson_no = s / cfg.segments_per_lesson + 1;
            const std::string lesson = teacher + "_l" + std::to_string(lesson_no);
            if (s % cfg.segments_per_lesson == 0) {
                // two distinct raters per lesson
                std::vector<std::string> pool = rater_pool;
                std::shuffle(pool.begin(), pool.end(), rng);
                raters = {pool[0], pool[1]};
            }
            const std::string seg_id = lesson + "_s" + std::to_string(s % cfg.segments_per_lesson + 1);

            const double shared = gauss(rng);
            std::array<double, 3> quality{};
            for (std::size_t c = 0; c < 3; ++c) {
                const double z = std::sqrt(cfg.rho) * shared + std::sqrt(1.0 - cfg.rho) * gauss(rng);
                quality[c] = 1.0 + 3.0 * normal_cdf(z);
            }
            // rater leniency is shared across components
            const double eps_low = cfg.rater_sd * gauss(rng);
            const double eps_high = cfg.rater_sd * gauss(rng);

            SegmentRecord rec;
            rec.segment_id = seg_id;
            rec.teacher_id = teacher;
            rec.lesson_id = lesson;
            rec.features = "features/" + seg_id + ".dfx";
            for (std::size_t c = 0; c < 3; ++c) {
                const int low = static_cast<int>(std::floor(round_to_rating(quality[c] + eps_low)));
                const int high = static_cast<int>(std::ceil(round_to_rating(quality[c] + eps_high)));
                rec.labels[kComponents[c]] = (low + high) / 2.0;
                manifest.rater_records.push_back({seg_id, raters[0], kComponents[c], low});
                manifest.rater_records.push_back({seg_id, raters[1], kComponents[c], high});
            }

            SegmentFeatures seg;
            seg.segment_id = seg_id;
            seg.teacher_id = teacher;
            seg.lesson_id = lesson;
            const std::size_t lt = text_len(rng);
            const std::size_t lc = chunk_len(rng);
            for (std::size_t m = 0; m < 3; ++m) {
                const Modality mod = kModalities[m];
                const std::size_t dim = cfg.dims.get(mod);
                FeatureMatrix mat(mod == Modality::Text ? lt : lc, dim);
                for (std::size_t r = 0; r < mat.rows; ++r) {
                    for (std::size_t j = 0; j < dim; ++j) {
                        double v = cfg.noise_sd * gauss(rng);
                        for (std::size_t c = 0; c < 3; ++c) v += cfg.signal[m][c] * quality[c] * directions[m][c][j];
                        mat(r, j) = static_cast<float>(v);
                    }
                }
                seg.get(mod) = std::move(mat);
            }
            seg.duration_s = 10.0 * static_cast<double>(lc);
            rec.duration_s = seg.duration_s;
            manifest.segments.push_back(std::move(rec));
            features.push_back(std::move(seg));
        }
    }

    if (cfg.students_per_teacher > 0) {
        // outcome = classroom-level human score (segment -> lesson -> teacher mean) + noise
        for (const auto& teacher : manifest.teachers()) {
            std::map<std::string, std::array<std::pair<double, int>, 3>> lessons;
            for (const auto& s : manifest.segments) {
                if (s.teacher_id != teacher) continue;
                auto& acc = lessons[s.lesson_id];
                for (std::size_t c = 0; c < 3; ++c) {
                    acc[c].first += s.labels.at(kComponents[c]);
                    acc[c].second += 1;
                }
            }
            std::array<double, 3> score{};
            for (const auto& [id, acc] : lessons)
                for (std::size_t c = 0; c < 3; ++c) score[c] += acc[c].first / acc[c].second / lessons.size();
            for (std::size_t k = 0; k < cfg.students_per_teacher; ++k) {
                StudentRecord st;
                st.student_id = teacher + "_p" + padded(k + 1, 2);
                st.teacher_id = teacher;
                st.test_score = score[0] + cfg.outcome_noise_sd * gauss(rng);
                st.interest = score[1] + cfg.outcome_noise_sd * gauss(rng);
                st.self_efficacy = score[2] + cfg.outcome_noise_sd * gauss(rng);
                manifest.student_records.push_back(std::move(st));
            }
        }
    }

    manifest.validate();
    std::filesystem::create_directories(root / "features");
    for (std::size_t i = 0; i < features.size(); ++i) {
        write_feature_file(root / manifest.segments[i].features, features[i]);
    }
    write_manifest(root / "manifest.json", manifest);

    Dataset ds;
    ds.root = root;
    ds.manifest = std::move(manifest);
    ds.features = std::move(features);
    return ds;
}

}  // namespace dfm
