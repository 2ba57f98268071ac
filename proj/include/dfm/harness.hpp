#pragma once

// Teacher-grouped nested cross-validation, inner grid search and the
// ablation runner.

#include "dfm/data.hpp"
#include "dfm/eval.hpp"
#include "dfm/model.hpp"
#include "dfm/train.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dfm {

struct GridPoint {
    double lr = 1e-4;
    std::size_t batch_size = 8;
    int num_fusion_modules = 1;

    std::string str() const;
    bool operator==(const GridPoint&) const = default;
};

// lr {1e-4, 1e-5} x batch {8, 16, 32} x M {1..5}.
std::vector<GridPoint> default_grid();
// Strict order used to break score ties: smaller M, larger lr, smaller batch.
bool more_parsimonious(const GridPoint& a, const GridPoint& b);

struct FoldPlan {
    std::uint64_t seed = 0;
    std::vector<std::vector<std::string>> outer;               // test teachers per outer fold
    std::vector<std::vector<std::vector<std::string>>> inner;  // [outer][inner] held-out teachers

    std::vector<std::string> training_teachers(std::size_t outer_fold) const;
    std::vector<std::string> inner_training_teachers(std::size_t outer_fold, std::size_t inner_fold) const;
    // Throws DataError unless the folds partition `teachers` as documented.
    void validate(const std::vector<std::string>& teachers) const;
    std::string to_json() const;
    bool operator==(const FoldPlan&) const = default;
};

// Seeded shuffle, then greedy largest-first assignment of teachers to the
// fold with the fewest segments so far.
FoldPlan make_folds(const DatasetManifest& manifest, std::size_t n_outer = 5, std::size_t n_inner = 3,
                    std::uint64_t seed = 0);

struct CvConfig {
    std::string label = "run";
    ModelConfig model;
    TrainConfig train;
    std::vector<GridPoint> grid = default_grid();
    std::size_t n_outer = 5;
    std::size_t n_inner = 3;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    bool verbose = false;
};

struct GridSearchResult {
    GridPoint best;
    double best_score = 0.0;
    std::vector<double> scores;  // per grid point; NaN when every inner run failed
};

struct SelectedPoint {
    std::optional<Component> component;  // set for single-task runs
    std::size_t fold = 0;
    GridPoint point;
    double inner_score = 0.0;
};

struct CvResult {
    EvaluationReport report;
    std::vector<PredictionRow> predictions;  // manifest order, then component
    std::vector<SelectedPoint> selected;
    FoldPlan plan;
};

// Runs `fn(0..n-1)` on up to `jobs` threads.  Each index runs exactly once.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

// Inner-loop selection for one outer fold.
GridSearchResult grid_search(const Dataset& data, const FoldPlan& plan, std::size_t outer_fold,
                             const CvConfig& config);

// Every segment is predicted once, by the model of the outer fold holding its
// teacher.  Single-task configs run one nested CV per component.
CvResult run_nested_cv(const Dataset& data, const CvConfig& config, const FoldPlan* plan = nullptr);

// ---- ablation -----------------------------------------------------------------------

struct AblationAxes {
    std::vector<ModalitySet> modalities;
    std::vector<EncoderKind> encoders;
    std::vector<TaskMode> tasks;
    std::vector<LossKind> losses;
};

AblationAxes default_axes();

struct AblationVariant {
    std::string axis;  // "modalities", "encoder", "task", "loss"
    std::string name;  // row label
    ModelConfig model;
};

// One-at-a-time variation of `base` along each axis.
std::vector<AblationVariant> ablation_variants(const ModelConfig& base, const AblationAxes& axes);

struct AblationResult {
    FoldPlan plan;
    std::vector<AblationVariant> variants;
    std::vector<CvResult> results;  // parallel to variants

    std::string table() const;  // one aligned table per axis
    std::string to_json() const;
};

// All variants share one FoldPlan.  Variants with identical model settings
// are trained once.
AblationResult run_ablation(const Dataset& data, const CvConfig& base, const AblationAxes& axes);

}  // namespace dfm
