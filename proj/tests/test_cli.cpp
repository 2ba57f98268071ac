#include "dfm/cli.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include "json.hpp"

#include <fstream>
#include <sstream>

using namespace dfm;
using namespace dfm::testing;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), "dfm");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Path -> contents for every file under `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
    return files;
}

const std::vector<std::string> kTinyModel = {"--heads", "2", "--head-hidden", "6", "--max-epochs", "2", "--batch", "4"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

fs::path tiny_dataset(const std::string& name, const std::string& students = "0") {
    const auto root = scratch_dir(name);
    auto r = cli({"synth", "--out", root.string(), "--teachers", "10", "--segments-per-teacher", "2",
                  "--segments-per-lesson", "1", "--dims", "8,12,8", "--students-per-teacher", students, "--seed", "3"});
    EXPECT_EQ(r.code, kExitOk) << r.err;
    return root;
}

}  // namespace

TEST(Cli, UsageErrors) {
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"bogus"}).code, kExitUsage);
    EXPECT_EQ(cli({"synth"}).code, kExitUsage);  // --out missing
    EXPECT_EQ(cli({"irr"}).code, kExitUsage);
    auto bad = cli({"cv", "--manifest", "m.json", "--modalities", "T+X"});
    EXPECT_EQ(bad.code, kExitUsage);
    EXPECT_NE(bad.err.find("error"), std::string::npos);
    EXPECT_EQ(cli({"gradcheck", "--jobs", "0"}).code, kExitUsage);
    EXPECT_EQ(cli({"--help"}).code, kExitOk);
    EXPECT_EQ(cli({"--config", "/nonexistent/run_config.json", "gradcheck"}).code, kExitUsage);
}

TEST(Cli, SynthDefaultsAndDeterminism) {
    const auto a = scratch_dir("cli_synth_a"), b = scratch_dir("cli_synth_b");
    auto r = cli({"synth", "--out", a.string(), "--dims", "8,12,8", "--seed", "4"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_NE(r.out.find("segments: 120"), std::string::npos);
    EXPECT_NE(r.out.find("teachers: 30"), std::string::npos);
    EXPECT_NE(r.out.find("label histogram"), std::string::npos);
    EXPECT_NE(r.out.find("Questioning"), std::string::npos);
    ASSERT_EQ(cli({"synth", "--out", b.string(), "--dims", "8,12,8", "--seed", "4"}).code, kExitOk);
    auto ta = tree(a), tb = tree(b);
    EXPECT_EQ(ta.size(), 120u + 2u);  // features, manifest, run_config
    ta.erase("run_config.json");  // records the output path
    tb.erase("run_config.json");
    EXPECT_TRUE(ta == tb);
    auto m = read_manifest(a / "manifest.json");
    EXPECT_EQ(m.segments.size(), 120u);
    EXPECT_EQ(m.teachers().size(), 30u);
}

TEST(Cli, MalformedManifestIsFailure) {
    const auto root = scratch_dir("cli_bad");
    {
        std::ofstream(root / "manifest.json") << "{ \"segments\": [ 1, 2";
    }
    auto r = cli({"irr", "--manifest", (root / "manifest.json").string()});
    EXPECT_EQ(r.code, kExitFailure);
    EXPECT_NE(r.err.find("manifest"), std::string::npos) << r.err;
    EXPECT_EQ(cli({"irr", "--manifest", (root / "missing.json").string()}).code, kExitFailure);
}

TEST(Cli, TrainAndConfigReplay) {
    const auto data = tiny_dataset("cli_train");
    const auto out1 = scratch_dir("cli_train_out1"), out2 = scratch_dir("cli_train_out2");
    const auto manifest = (data / "manifest.json").string();
    const auto before = tree(data);
    auto r = cli(with({"train", "--manifest", manifest, "--out", out1.string(), "--seed", "8"}, kTinyModel));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    for (const char* f : {"model.dfm", "history.json", "history.txt", "run_config.json"}) EXPECT_TRUE(fs::exists(out1 / f)) << f;
    auto replay = cli({"--config", (out1 / "run_config.json").string(), "train", "--out", out2.string()});
    ASSERT_EQ(replay.code, kExitOk) << replay.err;
    EXPECT_EQ(slurp(out1 / "history.json"), slurp(out2 / "history.json"));
    EXPECT_EQ(slurp(out1 / "model.dfm"), slurp(out2 / "model.dfm"));
    auto cfg1 = nlohmann::json::parse(slurp(out1 / "run_config.json"));
    auto cfg2 = nlohmann::json::parse(slurp(out2 / "run_config.json"));
    cfg1.erase("out");
    cfg2.erase("out");
    EXPECT_EQ(cfg1, cfg2);
    EXPECT_EQ(tree(data), before);  // inputs untouched
}

TEST(Cli, RunConfigRoundTrip) {
    RunConfig c;
    c.command = "cv";
    c.seed = 42;
    c.model.modalities = ModalitySet::parse("T+A+V");
    c.model.loss = LossKind::Ce;
    c.train.lr = 3e-4;
    c.grid.num_fusion_modules = {1, 2};
    c.synth.signal[1][2] = 0.25;
    c.ablation_axes = {"loss"};
    auto back = RunConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.seed, 42u);
    EXPECT_EQ(back.model.loss, LossKind::Ce);
    EXPECT_EQ(back.synth.signal[1][2], 0.25);
    EXPECT_THROW(RunConfig::from_json("[1,2]"), UsageError);
    EXPECT_THROW(RunConfig::from_json("{\"seed\": \"x\"}"), UsageError);
}

TEST(Cli, CvCorrelateAndIrr) {
    const auto data = tiny_dataset("cli_cv", "4");
    const auto manifest = (data / "manifest.json").string();
    const auto before = tree(data);
    const auto out = scratch_dir("cli_cv_out");
    auto r = cli(with({"cv", "--manifest", manifest, "--out", out.string(), "--grid-lr", "1e-3", "--grid-batch", "4",
                       "--grid-M", "1", "--inner-folds", "2"},
                      kTinyModel));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    for (const char* f : {"predictions.csv", "report.json", "report.txt", "fold_plan.json", "run_config.json"})
        EXPECT_TRUE(fs::exists(out / f)) << f;
    EXPECT_EQ(predictions_from_csv(slurp(out / "predictions.csv")).size(), 20u * 3u);

    auto corr = cli({"correlate", "--manifest", manifest, "--predictions", (out / "predictions.csv").string()});
    ASSERT_EQ(corr.code, kExitOk) << corr.err;
    EXPECT_NE(corr.out.find("Nature of Discourse (human)"), std::string::npos);
    EXPECT_NE(corr.out.find("Nature of Discourse (model)"), std::string::npos);
    EXPECT_NE(corr.out.find("N = 40 students"), std::string::npos);

    // predictions equal to the human labels give identical human and model rows
    std::vector<PredictionRow> perfect;
    for (const auto& s : read_manifest(manifest).segments)
        for (Component c : kComponents) perfect.push_back({s.segment_id, c, s.labels.at(c), s.labels.at(c), 0});
    const auto perfect_csv = out / "perfect.csv";
    {
        std::ofstream(perfect_csv) << predictions_to_csv(perfect);
    }
    const auto corr_out = scratch_dir("cli_corr_out");
    auto same = cli({"correlate", "--manifest", manifest, "--predictions", perfect_csv.string(), "--out", corr_out.string()});
    ASSERT_EQ(same.code, kExitOk) << same.err;
    auto j = nlohmann::json::parse(slurp(corr_out / "correlations.json"));
    ASSERT_EQ(j.size(), 18u);
    for (std::size_t i = 0; i < 9; ++i) {
        EXPECT_EQ(j[i]["source"], "human");
        EXPECT_EQ(j[i + 9]["source"], "model");
        EXPECT_EQ(j[i]["r"], j[i + 9]["r"]);
        EXPECT_EQ(j[i]["p"], j[i + 9]["p"]);
    }

    auto irr = cli({"irr", "--manifest", manifest});
    ASSERT_EQ(irr.code, kExitOk) << irr.err;
    EXPECT_NE(irr.out.find("Explanations"), std::string::npos);
    EXPECT_NE(irr.out.find("Average"), std::string::npos);

    auto no_students = tiny_dataset("cli_cv_nostudents");
    EXPECT_EQ(cli({"correlate", "--manifest", (no_students / "manifest.json").string(), "--predictions",
                   perfect_csv.string()})
                  .code,
              kExitFailure);
    EXPECT_EQ(tree(data), before);
}

TEST(Cli, AblateWritesTables) {
    const auto data = tiny_dataset("cli_ablate");
    const auto out = scratch_dir("cli_ablate_out");
    auto r = cli(with({"ablate", "--manifest", (data / "manifest.json").string(), "--out", out.string(), "--axes",
                       "modalities,loss", "--axis-modalities", "T,A", "--grid-lr", "1e-3", "--grid-batch", "4",
                       "--grid-M", "1", "--inner-folds", "2"},
                      kTinyModel));
    ASSERT_EQ(r.code, kExitOk) << r.err;
    for (const char* row : {"Modalities", "Loss", "OLL", "CE", "L1"}) EXPECT_NE(r.out.find(row), std::string::npos) << row;
    EXPECT_EQ(slurp(out / "ablation.txt"), r.out);
    EXPECT_EQ(cli(with({"ablate", "--manifest", (data / "manifest.json").string(), "--out", out.string(), "--axes",
                        "colour"},
                       kTinyModel))
                  .code,
              kExitUsage);
}

TEST(Cli, Gradcheck) {
    auto ok = cli({"gradcheck"});
    EXPECT_EQ(ok.code, kExitOk) << ok.out;
    EXPECT_NE(ok.out.find("all passed"), std::string::npos);
    EXPECT_NE(ok.out.find("encoder_block_cross"), std::string::npos);
    auto bad = cli({"gradcheck", "--inject-fault"});
    EXPECT_EQ(bad.code, kExitFailure);
    EXPECT_NE(bad.out.find("injected_fault"), std::string::npos);
    EXPECT_NE(bad.out.find("FAIL"), std::string::npos) << bad.out;
}
