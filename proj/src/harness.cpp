#include "dfm/harness.hpp"

#include "dfm/seed.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace dfm {

namespace {

using ordered_json = nlohmann::ordered_json;

// Job-kind tags mixed into derived seeds.
constexpr std::uint64_t kInnerJob = 1;
constexpr std::uint64_t kFinalJob = 2;

struct JobResult {
    std::map<Component, std::vector<double>> predictions;
    bool ok = false;
    std::string error;
};

// Trains one model on `train_teachers` and predicts `eval_indices`.
JobResult run_job(const Dataset& data, const std::vector<std::string>& train_teachers,
                  const std::vector<std::size_t>& eval_indices, const CvConfig& cv, const ModelConfig& model_cfg,
                  const GridPoint& point, std::uint64_t seed) {
    JobResult result;
    try {
        ModelConfig mc = model_cfg;
        mc.num_fusion_modules = point.num_fusion_modules;
        mc.seed = derive_seed(seed, {0});
        TrainConfig tc = cv.train;
        tc.lr = point.lr;
        tc.batch_size = point.batch_size;
        tc.seed = derive_seed(seed, {1});

        const auto train_idx = data.select_teachers(train_teachers);
        const auto split = teacher_grouped_split(data, train_idx, tc.val_fraction, derive_seed(seed, {2}));
        auto model = FusionModel::build(mc);
        const auto history = train(model, data, split.train, split.val, tc);
        if (cv.verbose) {
            std::cerr << "[" << cv.label << "] " << point.str() << " stopped at epoch " << history.stop_epoch
                      << " best val " << history.best_val_loss << '\n';
        }
        result.predictions = predict(model, data, eval_indices);
        result.ok = true;
    } catch (const std::exception& e) {
        result.error = e.what();
    }
    return result;
}

double mean_qwk(const Dataset& data, const std::vector<std::size_t>& indices,
                const std::map<Component, std::vector<double>>& predictions) {
    double total = 0.0;
    for (const auto& [c, preds] : predictions) {
        std::vector<int> truth, pred;
        for (std::size_t r = 0; r < indices.size(); ++r) {
            truth.push_back(rating_to_index(data.label(indices[r], c)));
            pred.push_back(rating_to_index(preds[r]));
        }
        total += qwk(truth, pred, kNumClasses);
    }
    return total / static_cast<double>(predictions.size());
}

std::vector<GridPoint> effective_grid(const CvConfig& cv) {
    if (cv.grid.empty()) throw UsageError("hyperparameter grid is empty");
    if (cv.model.encoder == EncoderKind::Attention) return cv.grid;
    // M has no meaning for the recurrent baseline.
    std::vector<GridPoint> out;
    for (auto p : cv.grid) {
        p.num_fusion_modules = 1;
        if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    }
    return out;
}

std::size_t select_best(const std::vector<GridPoint>& grid, const std::vector<double>& scores) {
    std::optional<std::size_t> best;
    for (std::size_t p = 0; p < grid.size(); ++p) {
        if (std::isnan(scores[p])) continue;
        if (!best || scores[p] > scores[*best] ||
            (scores[p] == scores[*best] && more_parsimonious(grid[p], grid[*best]))) {
            best = p;
        }
    }
    if (!best) throw std::runtime_error("every grid point failed to train");
    return *best;
}

std::vector<std::vector<std::string>> assign_folds(std::vector<std::pair<std::string, std::size_t>> teachers,
                                                   std::size_t n_folds, std::uint64_t seed) {
    if (teachers.size() < n_folds) {
        throw DataError("cannot split " + std::to_string(teachers.size()) + " teachers into " +
                        std::to_string(n_folds) + " folds");
    }
    std::sort(teachers.begin(), teachers.end());
    Rng rng(seed);
    std::shuffle(teachers.begin(), teachers.end(), rng);
    std::stable_sort(teachers.begin(), teachers.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::vector<std::string>> folds(n_folds);
    std::vector<std::size_t> load(n_folds, 0);
    std::vector<std::size_t> members(n_folds, 0);
    for (const auto& [id, count] : teachers) {
        std::size_t target = 0;
        for (std::size_t f = 1; f < n_folds; ++f) {
            if (load[f] < load[target] || (load[f] == load[target] && members[f] < members[target])) target = f;
        }
        folds[target].push_back(id);
        load[target] += count;
        ++members[target];
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

std::string variant_json(const AblationVariant& v) { return model_config_to_json(v.model); }

}  // namespace

std::string GridPoint::str() const {
    std::ostringstream os;
    os << "lr=" << lr << " batch=" << batch_size << " M=" << num_fusion_modules;
    return os.str();
}

std::vector<GridPoint> default_grid() {
    std::vector<GridPoint> grid;
    for (double lr : {1e-4, 1e-5})
        for (std::size_t batch : {8, 16, 32})
            for (int m = 1; m <= 5; ++m) grid.push_back({lr, batch, m});
    return grid;
}

bool more_parsimonious(const GridPoint& a, const GridPoint& b) {
    if (a.num_fusion_modules != b.num_fusion_modules) return a.num_fusion_modules < b.num_fusion_modules;
    if (a.lr != b.lr) return a.lr > b.lr;
    return a.batch_size < b.batch_size;
}

// ---- folds -------------------------------------------------------------------------

std::vector<std::string> FoldPlan::training_teachers(std::size_t k) const {
    std::vector<std::string> out;
    for (std::size_t f = 0; f < outer.size(); ++f)
        if (f != k) out.insert(out.end(), outer[f].begin(), outer[f].end());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::string> FoldPlan::inner_training_teachers(std::size_t k, std::size_t j) const {
    std::vector<std::string> out;
    for (std::size_t f = 0; f < inner.at(k).size(); ++f)
        if (f != j) out.insert(out.end(), inner[k][f].begin(), inner[k][f].end());
    std::sort(out.begin(), out.end());
    return out;
}

void FoldPlan::validate(const std::vector<std::string>& teachers) const {
    const std::set<std::string> all(teachers.begin(), teachers.end());
    std::set<std::string> seen;
    for (const auto& fold : outer) {
        for (const auto& t : fold) {
            if (!all.count(t)) throw DataError("fold plan names unknown teacher " + t);
            if (!seen.insert(t).second) throw DataError("teacher " + t + " is in more than one outer fold");
        }
    }
    if (seen != all) throw DataError("outer folds do not cover every teacher");
    if (inner.size() != outer.size()) throw DataError("fold plan lacks inner folds for some outer fold");
    for (std::size_t k = 0; k < outer.size(); ++k) {
        const auto training = training_teachers(k);
        std::vector<std::string> inner_all;
        for (const auto& f : inner[k]) inner_all.insert(inner_all.end(), f.begin(), f.end());
        std::sort(inner_all.begin(), inner_all.end());
        if (inner_all != training) {
            throw DataError("inner folds of outer fold " + std::to_string(k) + " do not partition its training teachers");
        }
    }
}

std::string FoldPlan::to_json() const {
    ordered_json j;
    j["seed"] = seed;
    j["outer"] = outer;
    j["inner"] = inner;
    return j.dump(2);
}

FoldPlan make_folds(const DatasetManifest& manifest, std::size_t n_outer, std::size_t n_inner, std::uint64_t seed) {
    if (n_outer < 2) throw UsageError("need at least two outer folds");
    std::map<std::string, std::size_t> counts;
    for (const auto& s : manifest.segments) ++counts[s.teacher_id];
    FoldPlan plan;
    plan.seed = seed;
    plan.outer = assign_folds({counts.begin(), counts.end()}, n_outer, derive_seed(seed, {0}));
    for (std::size_t k = 0; k < n_outer; ++k) {
        std::vector<std::pair<std::string, std::size_t>> training;
        for (const auto& t : plan.training_teachers(k)) training.emplace_back(t, counts.at(t));
        plan.inner.push_back(n_inner == 0 ? std::vector<std::vector<std::string>>{}
                                          : assign_folds(training, n_inner, derive_seed(seed, {1, k})));
    }
    return plan;
}

// ---- execution --------------------------------------------------------------------

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
}

namespace {

struct InnerTask {
    std::size_t run, fold, point, inner;
};

// One nested CV per entry of `runs` (a single entry in multi-task mode).
CvResult nested_cv_impl(const Dataset& data, const CvConfig& config, const std::vector<ModelConfig>& runs,
                        const FoldPlan& plan, std::vector<GridSearchResult>* searches_out,
                        std::optional<std::size_t> only_fold) {
    const auto grid = effective_grid(config);
    std::vector<std::size_t> folds;
    for (std::size_t k = 0; k < plan.outer.size(); ++k)
        if (!only_fold || *only_fold == k) folds.push_back(k);

    // Inner loop: every (run, fold, point, inner fold) is an independent job.
    std::vector<InnerTask> tasks;
    if (grid.size() > 1) {
        for (std::size_t r = 0; r < runs.size(); ++r)
            for (auto k : folds)
                for (std::size_t p = 0; p < grid.size(); ++p)
                    for (std::size_t j = 0; j < plan.inner.at(k).size(); ++j) tasks.push_back({r, k, p, j});
    }
    std::vector<double> task_scores(tasks.size(), std::nan(""));
    parallel_for(tasks.size(), config.jobs, [&](std::size_t t) {
        const auto& task = tasks[t];
        const auto eval = data.select_teachers(plan.inner[task.fold][task.inner]);
        const auto seed = derive_seed(config.seed, {kInnerJob, task.run, task.fold, task.point, task.inner});
        auto res = run_job(data, plan.inner_training_teachers(task.fold, task.inner), eval, config, runs[task.run],
                           grid[task.point], seed);
        if (res.ok) {
            task_scores[t] = mean_qwk(data, eval, res.predictions);
        } else {
            std::cerr << "warning: [" << config.label << "] fold " << task.fold << " inner " << task.inner << " "
                      << grid[task.point].str() << " failed: " << res.error << '\n';
        }
    });

    // Reduce in task order: mean over the inner folds that trained.
    std::map<std::pair<std::size_t, std::size_t>, GridSearchResult> searches;
    for (std::size_t r = 0; r < runs.size(); ++r) {
        for (auto k : folds) {
            GridSearchResult gs;
            gs.scores.assign(grid.size(), std::nan(""));
            if (grid.size() == 1) {
                gs.scores[0] = 0.0;
            } else {
                std::vector<double> sum(grid.size(), 0.0);
                std::vector<std::size_t> count(grid.size(), 0);
                for (std::size_t t = 0; t < tasks.size(); ++t) {
                    if (tasks[t].run != r || tasks[t].fold != k || std::isnan(task_scores[t])) continue;
                    sum[tasks[t].point] += task_scores[t];
                    ++count[tasks[t].point];
                }
                for (std::size_t p = 0; p < grid.size(); ++p) {
                    if (count[p] == 0) {
                        std::cerr << "warning: [" << config.label << "] fold " << k << " skipping "
                                  << grid[p].str() << '\n';
                    } else {
                        gs.scores[p] = sum[p] / static_cast<double>(count[p]);
                    }
                }
            }
            const auto best = select_best(grid, gs.scores);
            gs.best = grid[best];
            gs.best_score = gs.scores[best];
            searches[{r, k}] = gs;
        }
    }

    CvResult result;
    result.plan = plan;
    if (searches_out) {
        for (const auto& [key, gs] : searches) searches_out->push_back(gs);
        return result;
    }

    // Outer loop: retrain on the fold's training teachers with the selected point.
    std::vector<std::pair<std::size_t, std::size_t>> finals;
    for (std::size_t r = 0; r < runs.size(); ++r)
        for (auto k : folds) finals.emplace_back(r, k);
    std::vector<JobResult> final_results(finals.size());
    parallel_for(finals.size(), config.jobs, [&](std::size_t i) {
        const auto [r, k] = finals[i];
        const auto eval = data.select_teachers(plan.outer[k]);
        final_results[i] = run_job(data, plan.training_teachers(k), eval, config, runs[r], searches.at({r, k}).best,
                                   derive_seed(config.seed, {kFinalJob, r, k}));
    });

    std::map<std::pair<std::size_t, Component>, PredictionRow> by_segment;
    for (std::size_t i = 0; i < finals.size(); ++i) {
        const auto [r, k] = finals[i];
        if (!final_results[i].ok) {
            throw std::runtime_error("[" + config.label + "] final training for fold " + std::to_string(k) +
                                     " failed: " + final_results[i].error);
        }
        const auto eval = data.select_teachers(plan.outer[k]);
        for (const auto& [c, preds] : final_results[i].predictions) {
            for (std::size_t n = 0; n < eval.size(); ++n) {
                const auto& seg = data.manifest.segments[eval[n]];
                if (!by_segment.emplace(std::pair{eval[n], c}, PredictionRow{seg.segment_id, c, seg.labels.at(c), preds[n], k})
                         .second) {
                    throw std::logic_error("segment " + seg.segment_id + " predicted twice");
                }
            }
        }
        const auto& gs = searches.at({r, k});
        std::optional<Component> comp;
        if (runs[r].task_mode == TaskMode::Single) comp = runs[r].task_component;
        result.selected.push_back({comp, k, gs.best, gs.best_score});
    }
    for (auto& [key, row] : by_segment) result.predictions.push_back(std::move(row));
    if (!only_fold) result.report = build_report(config.label, result.predictions, plan.outer.size());
    return result;
}

}  // namespace

GridSearchResult grid_search(const Dataset& data, const FoldPlan& plan, std::size_t outer_fold,
                             const CvConfig& config) {
    if (outer_fold >= plan.outer.size()) throw UsageError("outer fold index out of range");
    std::vector<GridSearchResult> out;
    nested_cv_impl(data, config, {config.model}, plan, &out, outer_fold);
    return out.front();
}

CvResult run_nested_cv(const Dataset& data, const CvConfig& config, const FoldPlan* plan) {
    const auto teachers = data.manifest.teachers();
    const FoldPlan resolved = plan ? *plan : make_folds(data.manifest, config.n_outer, config.n_inner, config.seed);
    resolved.validate(teachers);
    std::vector<ModelConfig> runs;
    if (config.model.task_mode == TaskMode::Multi) {
        runs.push_back(config.model);
    } else {
        for (Component c : kComponents) {
            runs.push_back(config.model);
            runs.back().task_component = c;
        }
    }
    return nested_cv_impl(data, config, runs, resolved, nullptr, std::nullopt);
}

// ---- ablation ----------------------------------------------------------------------

AblationAxes default_axes() {
    AblationAxes axes;
    for (const char* m : {"T", "A", "V", "T+A", "T+A+V"}) axes.modalities.push_back(ModalitySet::parse(m));
    axes.encoders = {EncoderKind::Lstm, EncoderKind::Attention};
    axes.tasks = {TaskMode::Multi, TaskMode::Single};
    axes.losses = {LossKind::L1, LossKind::Ce, LossKind::Oll};
    return axes;
}

std::vector<AblationVariant> ablation_variants(const ModelConfig& base, const AblationAxes& axes) {
    std::vector<AblationVariant> out;
    for (const auto& m : axes.modalities) {
        auto cfg = base;
        cfg.modalities = m;
        out.push_back({"modalities", m.str(), cfg});
    }
    for (auto e : axes.encoders) {
        auto cfg = base;
        cfg.encoder = e;
        out.push_back({"encoder", e == EncoderKind::Lstm ? "LSTM" : "Attention", cfg});
    }
    for (auto t : axes.tasks) {
        auto cfg = base;
        cfg.task_mode = t;
        out.push_back({"task", t == TaskMode::Multi ? "Multi-task" : "Single-task", cfg});
    }
    for (auto l : axes.losses) {
        auto cfg = base;
        cfg.loss = l;
        std::string name(loss_key(l));
        std::transform(name.begin(), name.end(), name.begin(), ::toupper);
        out.push_back({"loss", name, cfg});
    }
    for (const auto& v : out) v.model.validate();
    return out;
}

AblationResult run_ablation(const Dataset& data, const CvConfig& base, const AblationAxes& axes) {
    AblationResult result;
    result.plan = make_folds(data.manifest, base.n_outer, base.n_inner, base.seed);
    result.variants = ablation_variants(base.model, axes);
    std::map<std::string, CvResult> cache;
    for (const auto& v : result.variants) {
        const auto key = variant_json(v);
        auto it = cache.find(key);
        if (it == cache.end()) {
            CvConfig cfg = base;
            cfg.model = v.model;
            cfg.label = v.name;
            if (base.verbose) std::cerr << "ablation variant " << v.axis << "=" << v.name << '\n';
            it = cache.emplace(key, run_nested_cv(data, cfg, &result.plan)).first;
        }
        CvResult copy = it->second;
        copy.report.label = v.name;
        result.results.push_back(std::move(copy));
    }
    return result;
}

std::string AblationResult::table() const {
    std::ostringstream os;
    std::vector<std::string> order;
    for (const auto& v : variants)
        if (std::find(order.begin(), order.end(), v.axis) == order.end()) order.push_back(v.axis);
    for (const auto& axis : order) {
        std::vector<EvaluationReport> rows;
        for (std::size_t i = 0; i < variants.size(); ++i)
            if (variants[i].axis == axis) rows.push_back(results[i].report);
        std::string header = axis;
        header[0] = static_cast<char>(std::toupper(header[0]));
        if (os.tellp() > 0) os << '\n';
        os << format_table(rows, header);
    }
    return os.str();
}

std::string AblationResult::to_json() const {
    ordered_json doc;
    doc["fold_plan"] = ordered_json::parse(plan.to_json());
    ordered_json rows = ordered_json::array();
    for (std::size_t i = 0; i < variants.size(); ++i) {
        ordered_json row;
        row["axis"] = variants[i].axis;
        row["name"] = variants[i].name;
        row["model"] = ordered_json::parse(model_config_to_json(variants[i].model));
        row["report"] = ordered_json::parse(report_to_json(results[i].report));
        rows.push_back(row);
    }
    doc["variants"] = rows;
    return doc.dump(2);
}

}  // namespace dfm
