#pragma once

// Optimisation loop: AdamW, plateau learning-rate halving, early stopping and
// mini-batch training with validation monitoring.

#include "dfm/data.hpp"
#include "dfm/model.hpp"
#include "dfm/objective.hpp"

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dfm {

struct AdamWOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct OptimState {
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    std::uint64_t step = 0;
};

// In-place update of `params` from their gradients.  Throws NumericError,
// leaving every parameter untouched, when any gradient is non-finite.
void adamw_step(std::span<Tensor> params, OptimState& state, const AdamWOptions& options);

// Halves the learning rate after `patience` consecutive epochs without a
// strict improvement of the best validation loss.
class PlateauScheduler {
public:
    explicit PlateauScheduler(double lr, std::size_t patience = 5) : lr_(lr), patience_(patience) {}
    // Returns the learning rate to use from the next epoch on.
    double step(double val_loss);
    double lr() const { return lr_; }

private:
    double lr_;
    std::size_t patience_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t stale_ = 0;
};

class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience = 15) : patience_(patience) {}
    // True once `patience` consecutive epochs have not improved the best loss.
    bool step(double val_loss);
    bool improved() const { return improved_; }
    double best() const { return best_; }

private:
    std::size_t patience_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t stale_ = 0;
    bool improved_ = false;
};

struct TrainConfig {
    double lr = 1e-4;
    std::size_t batch_size = 8;
    std::size_t max_epochs = 200;
    std::size_t plateau_patience = 5;
    std::size_t early_stop_patience = 15;
    double val_fraction = 0.2;
    double weight_decay = 0.01;
    double grad_clip = 0.0;  // global L2 norm; 0 disables
    TaskWeights task_weights;
    std::uint64_t seed = 0;
    bool verbose = false;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;        // rate used during this epoch
    bool aborted = false;   // non-finite gradient encountered
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t stop_epoch = 0;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool early_stopped = false;

    std::string table() const;
};

// Training-set statistics used by the loss.
struct LossSetup {
    std::map<Component, ClassWeights> class_weights;
    TaskWeights task_weights;
};

LossSetup make_loss_setup(const Dataset& data, std::span<const std::size_t> train_indices,
                          const ModelConfig& config, const TaskWeights& task_weights = {});

// Weighted total of the per-task losses for one batch.
Tensor batch_loss(const ModelOutput& output, const Dataset& data, std::span<const std::size_t> indices,
                  const ModelConfig& config, const LossSetup& setup);

// Mean batch loss over `indices` in inference mode.
double evaluate_loss(FusionModel& model, const Dataset& data, std::span<const std::size_t> indices,
                     const LossSetup& setup, std::size_t batch_size);

// Splits indices by teacher; the validation side receives the nearest whole
// number of teachers to `fraction` (at least one, never all).
struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};
Split teacher_grouped_split(const Dataset& data, std::span<const std::size_t> indices, double fraction,
                            std::uint64_t seed);

// Trains in place and leaves the best-validation parameters loaded.
TrainHistory train(FusionModel& model, const Dataset& data, std::span<const std::size_t> train_indices,
                   std::span<const std::size_t> val_indices, const TrainConfig& config);

// Predicted ratings per task: argmax over the 7 classes, or the rounded score
// in regression mode.
std::map<Component, std::vector<double>> predict(FusionModel& model, const Dataset& data,
                                                 std::span<const std::size_t> indices, std::size_t batch_size = 32);

}  // namespace dfm
