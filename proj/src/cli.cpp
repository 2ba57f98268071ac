#include "dfm/cli.hpp"

#include "dfm/eval.hpp"
#include "dfm/gradcheck_catalog.hpp"
#include "dfm/seed.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

namespace dfm {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path prepare_out(const std::string& out) {
    if (out.empty()) throw UsageError("--out is required");
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + out);
    return dir;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(item);
    return out;
}

std::string signal_str(const SynthConfig& s) {
    std::ostringstream os;
    for (std::size_t m = 0; m < 3; ++m) {
        if (m) os << ';';
        for (std::size_t c = 0; c < 3; ++c) os << (c ? "," : "") << s.signal[m][c];
    }
    return os.str();
}

void parse_signal(const std::string& text, SynthConfig& s) {
    const auto rows = split(text, ';');
    if (rows.size() != 3) throw UsageError("--signal needs three ';'-separated rows (text;audio;video)");
    for (std::size_t m = 0; m < 3; ++m) {
        const auto cols = split(rows[m], ',');
        if (cols.size() != 3) throw UsageError("--signal rows need three comma-separated values");
        for (std::size_t c = 0; c < 3; ++c) s.signal[m][c] = std::stod(cols[c]);
    }
}

Dataset load_dataset(const RunConfig& cfg) {
    if (cfg.manifest.empty()) throw UsageError("--manifest is required");
    return Dataset::load(cfg.manifest);
}

CvConfig make_cv_config(const RunConfig& cfg, const Dataset& data) {
    CvConfig cv;
    cv.label = cfg.model.modalities.str();
    cv.model = cfg.model;
    cv.model.dims = data.manifest.dims;
    cv.train = cfg.train;
    cv.grid = cfg.grid.points();
    cv.n_outer = cfg.n_outer;
    cv.n_inner = cfg.n_inner;
    cv.seed = cfg.seed;
    cv.jobs = cfg.jobs;
    cv.verbose = cfg.verbose;
    cv.model.validate();
    cv.train.validate();
    return cv;
}

std::string selected_table(const std::vector<SelectedPoint>& selected) {
    std::ostringstream os;
    os << "selected grid points\n";
    for (const auto& s : selected) {
        os << "  fold " << s.fold;
        if (s.component) os << " [" << component_key(*s.component) << "]";
        os << ": " << s.point.str() << "  inner QWK " << std::fixed << std::setprecision(4) << s.inner_score
           << std::defaultfloat << '\n';
    }
    return os.str();
}

// ---- subcommands ----------------------------------------------------------------

int cmd_synth(RunConfig& cfg, std::ostream& out) {
    const auto root = prepare_out(cfg.out);
    SynthConfig sc = cfg.synth;
    sc.seed = cfg.seed;
    const auto data = generate_synthetic(sc, root);
    write_text(root / "run_config.json", cfg.to_json());

    out << "teachers: " << data.manifest.teachers().size() << '\n';
    out << "segments: " << data.size() << '\n';
    out << "students: " << data.manifest.student_records.size() << '\n';
    out << "label histogram\n";
    out << std::left << std::setw(22) << "component";
    for (double r : kRatings) out << std::setw(6) << std::fixed << std::setprecision(1) << r;
    out << std::defaultfloat << '\n';
    for (Component c : kComponents) {
        std::array<int, kNumClasses> hist{};
        for (std::size_t i = 0; i < data.size(); ++i) ++hist[rating_to_index(data.label(i, c)) - 1];
        out << std::setw(22) << component_title(c);
        for (int h : hist) out << std::setw(6) << h;
        out << '\n';
    }
    out << std::right;
    return kExitOk;
}

int cmd_train(RunConfig& cfg, std::ostream& out) {
    const auto dir = prepare_out(cfg.out);
    const auto data = load_dataset(cfg);
    ModelConfig mc = cfg.model;
    mc.dims = data.manifest.dims;
    mc.seed = derive_seed(cfg.seed, {0});
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, {1});
    tc.verbose = cfg.verbose;
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    const auto split_idx = teacher_grouped_split(data, all, tc.val_fraction, derive_seed(cfg.seed, {2}));
    auto model = FusionModel::build(mc);
    out << "parameters: " << model.parameter_count() << '\n';
    const auto history = train(model, data, split_idx.train, split_idx.val, tc);
    model.save(dir / "model.dfm");
    write_text(dir / "history.txt", history.table());
    ordered_json h;
    for (const auto& e : history.epochs) {
        h["epochs"].push_back(
            {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr}, {"aborted", e.aborted}});
    }
    h["stop_epoch"] = history.stop_epoch;
    h["best_epoch"] = history.best_epoch;
    h["best_val_loss"] = history.best_val_loss;
    h["early_stopped"] = history.early_stopped;
    write_text(dir / "history.json", h.dump(2));
    write_text(dir / "run_config.json", cfg.to_json());
    out << history.table();
    return kExitOk;
}

int cmd_cv(RunConfig& cfg, std::ostream& out) {
    const auto dir = prepare_out(cfg.out);
    const auto data = load_dataset(cfg);
    const auto cv = make_cv_config(cfg, data);
    write_text(dir / "run_config.json", cfg.to_json());
    const auto result = run_nested_cv(data, cv);
    write_text(dir / "predictions.csv", predictions_to_csv(result.predictions));
    write_text(dir / "report.json", report_to_json(result.report));
    write_text(dir / "fold_plan.json", result.plan.to_json());
    const auto text = format_table({result.report}, "Modalities") + '\n' + selected_table(result.selected);
    write_text(dir / "report.txt", text);
    out << text;
    return kExitOk;
}

int cmd_ablate(RunConfig& cfg, std::ostream& out) {
    const auto dir = prepare_out(cfg.out);
    const auto data = load_dataset(cfg);
    const auto cv = make_cv_config(cfg, data);
    AblationAxes axes;
    for (const auto& a : cfg.ablation_axes) {
        if (a == "modalities") axes.modalities = cfg.ablation.modalities;
        else if (a == "encoder") axes.encoders = cfg.ablation.encoders;
        else if (a == "task") axes.tasks = cfg.ablation.tasks;
        else if (a == "loss") axes.losses = cfg.ablation.losses;
        else throw UsageError("unknown ablation axis '" + a + "'");
    }
    write_text(dir / "run_config.json", cfg.to_json());
    const auto result = run_ablation(data, cv, axes);
    write_text(dir / "ablation.json", result.to_json());
    write_text(dir / "ablation.txt", result.table());
    out << result.table();
    return kExitOk;
}

int cmd_correlate(RunConfig& cfg, std::ostream& out) {
    const auto manifest = read_manifest(cfg.manifest.empty() ? throw UsageError("--manifest is required") : cfg.manifest);
    if (manifest.student_records.empty()) throw DataError("manifest " + cfg.manifest + " has no student records");
    if (cfg.predictions.empty()) throw UsageError("--predictions is required");
    const auto rows = predictions_from_csv(read_text(cfg.predictions));

    std::map<Component, std::map<std::string, double>> human_seg, model_seg;
    for (const auto& s : manifest.segments)
        for (Component c : kComponents) human_seg[c][s.segment_id] = s.labels.at(c);
    for (const auto& r : rows) model_seg[r.component][r.segment_id] = r.predicted;

    std::map<Component, std::map<std::string, double>> human, model;
    for (auto& [c, scores] : human_seg) human[c] = classroom_aggregate(scores, manifest);
    for (auto& [c, scores] : model_seg) model[c] = classroom_aggregate(scores, manifest);

    auto results = outcome_correlations("human", human, manifest.student_records);
    const auto model_rows = outcome_correlations("model", model, manifest.student_records);
    results.insert(results.end(), model_rows.begin(), model_rows.end());

    std::ostringstream table;
    table << std::left << std::setw(30) << "Component (source)";
    for (Outcome o : kOutcomes) table << std::setw(18) << outcome_key(o);
    table << '\n';
    for (const char* source : {"human", "model"}) {
        for (Component c : kComponents) {
            std::ostringstream label;
            label << component_title(c) << " (" << source << ")";
            table << std::setw(30) << label.str();
            for (Outcome o : kOutcomes) {
                auto it = std::find_if(results.begin(), results.end(), [&](const OutcomeCorrelation& r) {
                    return r.source == source && r.component == c && r.outcome == o;
                });
                std::ostringstream cell;
                if (it == results.end()) {
                    cell << "-";
                } else {
                    cell << std::fixed << std::setprecision(3) << it->correlation.r
                         << significance_stars(it->correlation.p);
                }
                table << std::setw(18) << cell.str();
            }
            table << '\n';
        }
    }
    table << "N = " << manifest.student_records.size() << " students; * p<.05, ** p<.01, *** p<.001\n";
    out << table.str();

    if (!cfg.out.empty()) {
        const auto dir = prepare_out(cfg.out);
        ordered_json j = ordered_json::array();
        for (const auto& r : results) {
            j.push_back({{"source", r.source},
                         {"component", component_key(r.component)},
                         {"outcome", outcome_key(r.outcome)},
                         {"r", r.correlation.r},
                         {"p", r.correlation.p},
                         {"n", r.correlation.n}});
        }
        write_text(dir / "correlations.json", j.dump(2));
        write_text(dir / "correlations.txt", table.str());
        write_text(dir / "run_config.json", cfg.to_json());
    }
    return kExitOk;
}

int cmd_irr(RunConfig& cfg, std::ostream& out) {
    const auto manifest = read_manifest(cfg.manifest.empty() ? throw UsageError("--manifest is required") : cfg.manifest);
    if (manifest.rater_records.empty()) throw DataError("manifest " + cfg.manifest + " has no rater records");
    std::vector<double> means;
    out << std::left << std::setw(22) << "component" << "IRR (se)\n" << std::right;
    for (Component c : kComponents) {
        const auto r = irr_leave_one_rater_out(manifest.rater_records, c);
        means.push_back(r.summary.mean);
        out << std::left << std::setw(22) << component_title(c) << std::right << std::fixed << std::setprecision(3)
            << r.summary.mean << " (" << std::setprecision(2) << r.summary.standard_error << ")\n"
            << std::defaultfloat;
    }
    out << std::left << std::setw(22) << "Average" << std::right << std::fixed << std::setprecision(3)
        << std::accumulate(means.begin(), means.end(), 0.0) / 3.0 << '\n'
        << std::defaultfloat;
    return kExitOk;
}

int cmd_gradcheck(RunConfig& cfg, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const auto rows = run_gradcheck(gradcheck_catalog(cfg.seed + 1, cfg.inject_fault), cfg.gradcheck_tol);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool ok = true;
    out << std::left << std::setw(24) << "op" << std::setw(11) << "kind" << std::setw(14) << "max_rel_err"
        << std::setw(8) << "coords" << "result\n";
    for (const auto& r : rows) {
        ok = ok && r.report.passed;
        out << std::setw(24) << r.name << std::setw(11) << r.kind << std::setw(14) << std::scientific
            << std::setprecision(3) << r.report.max_rel_err << std::defaultfloat << std::setw(8)
            << r.report.coords_checked << (r.report.passed ? "pass" : "FAIL") << '\n';
    }
    out << std::right << rows.size() << " checks, tolerance " << cfg.gradcheck_tol << ", " << std::fixed
        << std::setprecision(1) << secs << " s: " << (ok ? "all passed" : "FAILURES") << '\n'
        << std::defaultfloat;
    return ok ? kExitOk : kExitFailure;
}

}  // namespace

std::vector<GridPoint> GridSpec::points() const {
    std::vector<GridPoint> out;
    for (double lr_v : lr)
        for (std::size_t b : batch_size)
            for (int m : num_fusion_modules) out.push_back({lr_v, b, m});
    if (out.empty()) throw UsageError("hyperparameter grid is empty");
    return out;
}

// ---- run config ------------------------------------------------------------------------

std::string RunConfig::to_json() const {
    ordered_json j;
    j["command"] = command;
    j["seed"] = seed;
    j["jobs"] = jobs;
    j["verbose"] = verbose;
    j["manifest"] = manifest;
    j["out"] = out;
    j["predictions"] = predictions;
    j["model"] = ordered_json::parse(model_config_to_json(model));
    j["train"] = {{"lr", train.lr},
                  {"batch_size", train.batch_size},
                  {"max_epochs", train.max_epochs},
                  {"plateau_patience", train.plateau_patience},
                  {"early_stop_patience", train.early_stop_patience},
                  {"val_fraction", train.val_fraction},
                  {"weight_decay", train.weight_decay},
                  {"grad_clip", train.grad_clip}};
    ordered_json mu = ordered_json::object();
    for (const auto& [c, w] : train.task_weights) mu[std::string(component_key(c))] = w;
    j["train"]["task_weights"] = mu;
    j["grid"] = {{"lr", grid.lr}, {"batch_size", grid.batch_size}, {"num_fusion_modules", grid.num_fusion_modules}};
    j["cv"] = {{"n_outer", n_outer}, {"n_inner", n_inner}};
    ordered_json ab;
    ab["axes"] = ablation_axes;
    for (const auto& m : ablation.modalities) ab["modalities"].push_back(m.str());
    for (auto e : ablation.encoders) ab["encoders"].push_back(encoder_key(e));
    for (auto t : ablation.tasks) ab["tasks"].push_back(task_mode_key(t));
    for (auto l : ablation.losses) ab["losses"].push_back(loss_key(l));
    j["ablation"] = ab;
    j["synth"] = {{"teachers", synth.n_teachers},
                  {"segments_per_teacher", synth.segments_per_teacher},
                  {"segments_per_lesson", synth.segments_per_lesson},
                  {"text_len", {synth.text_len_min, synth.text_len_max}},
                  {"chunk_len", {synth.chunk_len_min, synth.chunk_len_max}},
                  {"signal", signal_str(synth)},
                  {"rho", synth.rho},
                  {"noise_sd", synth.noise_sd},
                  {"rater_sd", synth.rater_sd},
                  {"raters", synth.n_raters},
                  {"students_per_teacher", synth.students_per_teacher},
                  {"outcome_noise_sd", synth.outcome_noise_sd},
                  {"dims", {synth.dims.text, synth.dims.audio, synth.dims.video}}};
    j["gradcheck"] = {{"tol", gradcheck_tol}, {"inject_fault", inject_fault}};
    return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
    RunConfig c;
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw UsageError("config must be a JSON object");
    try {
        auto get = [&](const ordered_json& node, const char* key, auto& dst) {
            if (node.contains(key)) dst = node.at(key).get<std::decay_t<decltype(dst)>>();
        };
        get(j, "command", c.command);
        get(j, "seed", c.seed);
        get(j, "jobs", c.jobs);
        get(j, "verbose", c.verbose);
        get(j, "manifest", c.manifest);
        get(j, "out", c.out);
        get(j, "predictions", c.predictions);
        if (j.contains("model")) {
            // Start from defaults so partial model sections are accepted.
            auto merged = ordered_json::parse(model_config_to_json(c.model));
            for (const auto& [k, v] : j.at("model").items()) merged[k] = v;
            c.model = model_config_from_json(merged.dump());
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            get(t, "lr", c.train.lr);
            get(t, "batch_size", c.train.batch_size);
            get(t, "max_epochs", c.train.max_epochs);
            get(t, "plateau_patience", c.train.plateau_patience);
            get(t, "early_stop_patience", c.train.early_stop_patience);
            get(t, "val_fraction", c.train.val_fraction);
            get(t, "weight_decay", c.train.weight_decay);
            get(t, "grad_clip", c.train.grad_clip);
            if (t.contains("task_weights")) {
                for (const auto& [k, v] : t.at("task_weights").items())
                    c.train.task_weights[parse_component(k)] = v.get<double>();
            }
        }
        if (j.contains("grid")) {
            get(j.at("grid"), "lr", c.grid.lr);
            get(j.at("grid"), "batch_size", c.grid.batch_size);
            get(j.at("grid"), "num_fusion_modules", c.grid.num_fusion_modules);
        }
        if (j.contains("cv")) {
            get(j.at("cv"), "n_outer", c.n_outer);
            get(j.at("cv"), "n_inner", c.n_inner);
        }
        if (j.contains("ablation")) {
            const auto& a = j.at("ablation");
            get(a, "axes", c.ablation_axes);
            if (a.contains("modalities")) {
                c.ablation.modalities.clear();
                for (const auto& m : a.at("modalities")) c.ablation.modalities.push_back(ModalitySet::parse(m.get<std::string>()));
            }
            if (a.contains("encoders")) {
                c.ablation.encoders.clear();
                for (const auto& e : a.at("encoders")) c.ablation.encoders.push_back(parse_encoder(e.get<std::string>()));
            }
            if (a.contains("tasks")) {
                c.ablation.tasks.clear();
                for (const auto& t : a.at("tasks")) c.ablation.tasks.push_back(parse_task_mode(t.get<std::string>()));
            }
            if (a.contains("losses")) {
                c.ablation.losses.clear();
                for (const auto& l : a.at("losses")) c.ablation.losses.push_back(parse_loss(l.get<std::string>()));
            }
        }
        if (j.contains("synth")) {
            const auto& s = j.at("synth");
            get(s, "teachers", c.synth.n_teachers);
            get(s, "segments_per_teacher", c.synth.segments_per_teacher);
            get(s, "segments_per_lesson", c.synth.segments_per_lesson);
            if (s.contains("text_len")) {
                c.synth.text_len_min = s.at("text_len").at(0).get<std::size_t>();
                c.synth.text_len_max = s.at("text_len").at(1).get<std::size_t>();
            }
            if (s.contains("chunk_len")) {
                c.synth.chunk_len_min = s.at("chunk_len").at(0).get<std::size_t>();
                c.synth.chunk_len_max = s.at("chunk_len").at(1).get<std::size_t>();
            }
            if (s.contains("signal")) parse_signal(s.at("signal").get<std::string>(), c.synth);
            get(s, "rho", c.synth.rho);
            get(s, "noise_sd", c.synth.noise_sd);
            get(s, "rater_sd", c.synth.rater_sd);
            get(s, "raters", c.synth.n_raters);
            get(s, "students_per_teacher", c.synth.students_per_teacher);
            get(s, "outcome_noise_sd", c.synth.outcome_noise_sd);
            if (s.contains("dims")) {
                c.synth.dims.text = s.at("dims").at(0).get<std::size_t>();
                c.synth.dims.audio = s.at("dims").at(1).get<std::size_t>();
                c.synth.dims.video = s.at("dims").at(2).get<std::size_t>();
            }
        }
        if (j.contains("gradcheck")) {
            get(j.at("gradcheck"), "tol", c.gradcheck_tol);
            get(j.at("gradcheck"), "inject_fault", c.inject_fault);
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("bad config value: ") + e.what());
    } catch (const FormatError& e) {
        throw UsageError("bad model section in config: " + e.reason);
    }
    return c;
}

// ---- entry point -------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        for (std::size_t i = 1; i < args.size(); ++i) {
            std::string path;
            if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
            else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
            if (!path.empty()) cfg = RunConfig::from_json(read_text(path));
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    CLI::App app{"Multimodal classroom discourse models: data synthesis, training and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "JSON run configuration; flags override its values");
    app.add_option("--seed", cfg.seed, "Master seed for all randomness")->capture_default_str();
    app.add_option("--jobs", cfg.jobs, "Concurrent training jobs")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_flag("--verbose", cfg.verbose, "Log training progress to stderr");

    std::string modalities = cfg.model.modalities.str();
    std::string encoder(encoder_key(cfg.model.encoder));
    std::string loss(loss_key(cfg.model.loss));
    std::string task(task_mode_key(cfg.model.task_mode));
    std::string component(component_key(cfg.model.task_component));
    bool no_positional = !cfg.model.positional;
    std::string signal = signal_str(cfg.synth);
    std::vector<std::size_t> dims = {cfg.synth.dims.text, cfg.synth.dims.audio, cfg.synth.dims.video};
    std::vector<std::string> axis_modalities;
    for (const auto& m : cfg.ablation.modalities) axis_modalities.push_back(m.str());

    auto add_model_flags = [&](CLI::App* sub) {
        sub->add_option("--manifest", cfg.manifest, "Dataset manifest (manifest.json)");
        sub->add_option("--modalities", modalities, "Modalities joined by '+', e.g. T+A")->capture_default_str();
        sub->add_option("--encoder", encoder, "attention or lstm")->capture_default_str();
        sub->add_option("--loss", loss, "oll, ce or l1")->capture_default_str();
        sub->add_option("--task", task, "multi or single")->capture_default_str();
        sub->add_option("--component", component, "Component for single-task training (train command)");
        sub->add_option("--M", cfg.model.num_fusion_modules, "Fusion modules (train command)")->capture_default_str();
        sub->add_flag("--no-positional", no_positional, "Disable sinusoidal positional encodings");
        sub->add_option("--dropout", cfg.model.dropout)->capture_default_str();
        sub->add_option("--heads", cfg.model.num_heads, "Attention heads")->capture_default_str();
        sub->add_option("--head-hidden", cfg.model.head_hidden, "Hidden width of the output heads")->capture_default_str();
        sub->add_option("--lr", cfg.train.lr, "Learning rate (train command)")->capture_default_str();
        sub->add_option("--batch", cfg.train.batch_size, "Batch size (train command)")->capture_default_str();
        sub->add_option("--max-epochs", cfg.train.max_epochs)->capture_default_str();
        sub->add_option("--plateau-patience", cfg.train.plateau_patience)->capture_default_str();
        sub->add_option("--early-stop-patience", cfg.train.early_stop_patience)->capture_default_str();
        sub->add_option("--val-fraction", cfg.train.val_fraction)->capture_default_str();
        sub->add_option("--weight-decay", cfg.train.weight_decay)->capture_default_str();
        sub->add_option("--grad-clip", cfg.train.grad_clip, "Global gradient norm limit; 0 disables")->capture_default_str();
        sub->add_option("--out", cfg.out, "Output directory");
    };
    auto add_grid_flags = [&](CLI::App* sub) {
        sub->add_option("--grid-lr", cfg.grid.lr, "Learning rates searched")->delimiter(',')->capture_default_str();
        sub->add_option("--grid-batch", cfg.grid.batch_size, "Batch sizes searched")->delimiter(',')->capture_default_str();
        sub->add_option("--grid-M", cfg.grid.num_fusion_modules, "Fusion module counts searched")->delimiter(',')->capture_default_str();
        sub->add_option("--outer-folds", cfg.n_outer)->capture_default_str();
        sub->add_option("--inner-folds", cfg.n_inner)->capture_default_str();
    };

    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with planted signal");
    synth->add_option("--out", cfg.out, "Dataset root to create")->required();
    synth->add_option("--teachers", cfg.synth.n_teachers)->capture_default_str();
    synth->add_option("--segments-per-teacher", cfg.synth.segments_per_teacher)->capture_default_str();
    synth->add_option("--segments-per-lesson", cfg.synth.segments_per_lesson)->capture_default_str();
    synth->add_option("--students-per-teacher", cfg.synth.students_per_teacher)->capture_default_str();
    synth->add_option("--rho", cfg.synth.rho, "Latent correlation between components")->capture_default_str();
    synth->add_option("--noise-sd", cfg.synth.noise_sd)->capture_default_str();
    synth->add_option("--rater-sd", cfg.synth.rater_sd)->capture_default_str();
    synth->add_option("--outcome-noise-sd", cfg.synth.outcome_noise_sd)->capture_default_str();
    synth->add_option("--signal", signal, "Signal strengths 'T;A;V' rows of 'nature,questioning,explanations'")
        ->capture_default_str();
    synth->add_option("--dims", dims, "Feature widths text,audio,video")->delimiter(',')->expected(3);

    auto* train_cmd = app.add_subcommand("train", "Train one model on a teacher-grouped split and save it");
    add_model_flags(train_cmd);
    auto* cv = app.add_subcommand("cv", "Nested teacher-grouped cross-validation");
    add_model_flags(cv);
    add_grid_flags(cv);
    auto* ablate = app.add_subcommand("ablate", "Nested CV over ablation variants on one fold plan");
    add_model_flags(ablate);
    add_grid_flags(ablate);
    ablate->add_option("--axes", cfg.ablation_axes, "Axes to vary: modalities,encoder,task,loss")
        ->delimiter(',')
        ->capture_default_str();
    ablate->add_option("--axis-modalities", axis_modalities, "Modality rows, e.g. T,A,T+A")->delimiter(',');
    auto* correlate = app.add_subcommand("correlate", "Correlate classroom scores with student outcomes");
    correlate->add_option("--manifest", cfg.manifest, "Manifest with student records")->required();
    correlate->add_option("--predictions", cfg.predictions, "predictions.csv from the cv command")->required();
    correlate->add_option("--out", cfg.out, "Optional output directory");
    auto* irr = app.add_subcommand("irr", "Leave-one-rater-out inter-rater reliability");
    irr->add_option("--manifest", cfg.manifest, "Manifest with rater records")->required();
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable block");
    gradcheck->add_option("--tol", cfg.gradcheck_tol)->capture_default_str();
    gradcheck->add_flag("--inject-fault", cfg.inject_fault, "Add a primitive with a wrong gradient");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        cfg.model.modalities = ModalitySet::parse(modalities);
        cfg.model.encoder = parse_encoder(encoder);
        cfg.model.loss = parse_loss(loss);
        cfg.model.task_mode = parse_task_mode(task);
        cfg.model.task_component = parse_component(component);
        cfg.model.positional = !no_positional;
        parse_signal(signal, cfg.synth);
        cfg.synth.dims = {dims.at(0), dims.at(1), dims.at(2)};
        cfg.ablation.modalities.clear();
        for (const auto& m : axis_modalities) cfg.ablation.modalities.push_back(ModalitySet::parse(m));
        cfg.train.verbose = cfg.verbose;
        cfg.model.validate();
        cfg.train.validate();

        auto* sub = app.get_subcommands().front();
        cfg.command = sub->get_name();
        if (sub == synth) return cmd_synth(cfg, out);
        if (sub == train_cmd) return cmd_train(cfg, out);
        if (sub == cv) return cmd_cv(cfg, out);
        if (sub == ablate) return cmd_ablate(cfg, out);
        if (sub == correlate) return cmd_correlate(cfg, out);
        if (sub == irr) return cmd_irr(cfg, out);
        return cmd_gradcheck(cfg, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

}  // namespace dfm
