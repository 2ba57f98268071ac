#include "dfm/train.hpp"

#include "dfm/seed.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace dfm {

namespace {

std::vector<const SegmentFeatures*> gather(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<const SegmentFeatures*> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(&data.features.at(i));
    return out;
}

void clip_gradients(std::span<Tensor> params, double max_norm) {
    double total = 0.0;
    for (auto& p : params)
        for (float g : p.grad()) total += double(g) * g;
    const double norm = std::sqrt(total);
    if (norm <= max_norm || norm == 0.0) return;
    const auto factor = static_cast<float>(max_norm / norm);
    for (auto& p : params)
        for (auto& g : p.mutable_grad()) g *= factor;
}

}  // namespace

void adamw_step(std::span<Tensor> params, OptimState& state, const AdamWOptions& o) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0f);
            state.v.emplace_back(p.numel(), 0.0f);
        }
    }
    if (state.m.size() != params.size()) throw UsageError("optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel()) throw ShapeError("optimizer moment shape mismatch");
        // Exponent bits all set means Inf or NaN.
        std::uint32_t bad = 0;
        for (float g : params[i].grad()) bad |= (std::bit_cast<std::uint32_t>(g) & 0x7f800000u) == 0x7f800000u;
        if (bad) throw NumericError("non-finite gradient in parameter " + std::to_string(i));
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
    const auto b1 = static_cast<float>(o.beta1), b2 = static_cast<float>(o.beta2);
    const auto a1 = static_cast<float>(1.0 - o.beta1), a2 = static_cast<float>(1.0 - o.beta2);
    const auto decay = static_cast<float>(1.0 - o.lr * o.weight_decay);
    const auto step_size = static_cast<float>(o.lr / c1);
    const auto inv_c2 = static_cast<float>(1.0 / c2);
    const auto eps = static_cast<float>(o.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        float* __restrict p = params[i].mutable_data().data();
        const float* __restrict g = params[i].grad().data();
        float* __restrict m = state.m[i].data();
        float* __restrict v = state.v[i].data();
        const std::size_t n = state.m[i].size();
        for (std::size_t k = 0; k < n; ++k) {
            m[k] = b1 * m[k] + a1 * g[k];
            v[k] = b2 * v[k] + a2 * g[k] * g[k];
            p[k] = p[k] * decay - step_size * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
        }
    }
}

double PlateauScheduler::step(double val_loss) {
    if (val_loss < best_) {
        best_ = val_loss;
        stale_ = 0;
    } else if (++stale_ >= patience_) {
        lr_ /= 2.0;
        stale_ = 0;
    }
    return lr_;
}

bool EarlyStopping::step(double val_loss) {
    improved_ = val_loss < best_;
    if (improved_) {
        best_ = val_loss;
        stale_ = 0;
        return false;
    }
    return ++stale_ >= patience_;
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw UsageError("learning rate must be positive");
    if (batch_size == 0) throw UsageError("batch size must be positive");
    if (max_epochs == 0) throw UsageError("max_epochs must be positive");
    if (plateau_patience == 0 || early_stop_patience == 0) throw UsageError("patience values must be positive");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw UsageError("val_fraction must be in (0, 1)");
    if (weight_decay < 0.0 || grad_clip < 0.0) throw UsageError("weight decay and clip norm must be non-negative");
    for (const auto& [c, w] : task_weights)
        if (w < 0.0) throw UsageError("task weights must be non-negative");
}

std::string TrainHistory::table() const {
    std::ostringstream os;
    os << "epoch  train_loss  val_loss    lr\n";
    for (const auto& e : epochs) {
        os << std::setw(5) << e.epoch << "  " << std::fixed << std::setprecision(6) << std::setw(10) << e.train_loss
           << "  " << std::setw(10) << e.val_loss << "  " << std::scientific << std::setprecision(3) << e.lr
           << (e.aborted ? "  aborted" : "") << (e.epoch == best_epoch ? "  *" : "") << '\n';
        os << std::defaultfloat;
    }
    os << "stopped after epoch " << stop_epoch << (early_stopped ? " (early stop)" : "") << ", best epoch "
       << best_epoch << '\n';
    return os.str();
}

LossSetup make_loss_setup(const Dataset& data, std::span<const std::size_t> train_indices,
                          const ModelConfig& config, const TaskWeights& task_weights) {
    LossSetup setup;
    setup.task_weights = task_weights;
    for (Component c : config.tasks()) {
        std::vector<int> labels;
        labels.reserve(train_indices.size());
        for (auto i : train_indices) labels.push_back(rating_to_index(data.label(i, c)));
        setup.class_weights[c] = class_weights(labels);
    }
    return setup;
}

Tensor batch_loss(const ModelOutput& output, const Dataset& data, std::span<const std::size_t> indices,
                  const ModelConfig& config, const LossSetup& setup) {
    std::map<Component, Tensor> losses;
    for (Component c : config.tasks()) {
        const auto& weights = setup.class_weights.at(c);
        const auto& out = output.outputs.at(c);
        if (config.loss == LossKind::L1) {
            std::vector<double> ratings;
            for (auto i : indices) ratings.push_back(data.label(i, c));
            losses[c] = l1_loss(out, ratings, weights);
        } else {
            std::vector<int> labels;
            for (auto i : indices) labels.push_back(rating_to_index(data.label(i, c)));
            losses[c] = config.loss == LossKind::Oll ? oll_loss(out, labels, weights)
                                                     : weighted_ce_loss(out, labels, weights);
        }
    }
    return multitask_total(losses, setup.task_weights);
}

double evaluate_loss(FusionModel& model, const Dataset& data, std::span<const std::size_t> indices,
                     const LossSetup& setup, std::size_t batch_size) {
    if (indices.empty()) throw UsageError("evaluate_loss: no segments");
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const auto part = indices.subspan(start, std::min(batch_size, indices.size() - start));
        const auto ptrs = gather(data, part);
        const auto out = model.forward(ptrs, false);
        total += batch_loss(out, data, part, model.config(), setup).item();
        ++batches;
    }
    return total / static_cast<double>(batches);
}

Split teacher_grouped_split(const Dataset& data, std::span<const std::size_t> indices, double fraction,
                            std::uint64_t seed) {
    std::set<std::string> unique;
    for (auto i : indices) unique.insert(data.teacher(i));
    if (unique.size() < 2) throw UsageError("validation split needs at least two teachers");
    std::vector<std::string> teachers(unique.begin(), unique.end());
    Rng rng(seed);
    std::shuffle(teachers.begin(), teachers.end(), rng);
    const double n = static_cast<double>(teachers.size());
    const auto k = static_cast<std::size_t>(std::clamp(std::round(fraction * n), 1.0, n - 1.0));
    const std::set<std::string> val_teachers(teachers.begin(), teachers.begin() + static_cast<std::ptrdiff_t>(k));
    Split split;
    for (auto i : indices) (val_teachers.count(data.teacher(i)) ? split.val : split.train).push_back(i);
    return split;
}

TrainHistory train(FusionModel& model, const Dataset& data, std::span<const std::size_t> train_indices,
                   std::span<const std::size_t> val_indices, const TrainConfig& config) {
    config.validate();
    if (train_indices.empty()) throw UsageError("train: empty training set");
    if (val_indices.empty()) throw UsageError("train: empty validation set");
    std::set<std::string> train_teachers;
    for (auto i : train_indices) train_teachers.insert(data.teacher(i));
    for (auto i : val_indices) {
        if (train_teachers.count(data.teacher(i))) {
            throw UsageError("train: teacher " + data.teacher(i) + " appears in both training and validation sets");
        }
    }

    const auto setup = make_loss_setup(data, train_indices, model.config(), config.task_weights);
    auto named = model.parameters();
    std::vector<Tensor> params;
    for (auto& [name, t] : named) params.push_back(t);

    OptimState state;
    AdamWOptions options;
    options.lr = config.lr;
    options.weight_decay = config.weight_decay;
    PlateauScheduler scheduler(config.lr, config.plateau_patience);
    EarlyStopping stopper(config.early_stop_patience);

    TrainHistory history;
    auto best = model.snapshot();
    std::vector<std::size_t> order(train_indices.begin(), train_indices.end());

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = options.lr;
        std::sort(order.begin(), order.end());
        Rng shuffle(derive_seed(config.seed, {epoch}));
        std::shuffle(order.begin(), order.end(), shuffle);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const auto part = std::span<const std::size_t>(order).subspan(
                start, std::min(config.batch_size, order.size() - start));
            for (auto& p : params) p.zero_grad();
            try {
                const auto out = model.forward(gather(data, part), true);
                const auto loss = batch_loss(out, data, part, model.config(), setup);
                const double value = loss.item();
                if (!std::isfinite(value)) throw NumericError("non-finite training loss");
                backward(loss);
                if (config.grad_clip > 0.0) clip_gradients(params, config.grad_clip);
                adamw_step(params, state, options);
                loss_sum += value;
                ++batches;
            } catch (const NumericError& e) {
                std::cerr << "warning: epoch " << epoch << " aborted at batch " << start / config.batch_size << ": "
                          << e.what() << '\n';
                rec.aborted = true;
                break;
            }
        }
        rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : std::nan("");
        rec.val_loss = evaluate_loss(model, data, val_indices, setup, config.batch_size);
        history.epochs.push_back(rec);
        history.stop_epoch = epoch;

        if (rec.val_loss < history.best_val_loss) {
            history.best_val_loss = rec.val_loss;
            history.best_epoch = epoch;
            best = model.snapshot();
        }
        if (config.verbose) {
            std::cerr << "epoch " << epoch << " train " << rec.train_loss << " val " << rec.val_loss << " lr "
                      << rec.lr << '\n';
        }
        options.lr = scheduler.step(rec.val_loss);
        if (stopper.step(rec.val_loss)) {
            history.early_stopped = true;
            break;
        }
    }
    model.restore(best);
    return history;
}

std::map<Component, std::vector<double>> predict(FusionModel& model, const Dataset& data,
                                                 std::span<const std::size_t> indices, std::size_t batch_size) {
    std::map<Component, std::vector<double>> out;
    const auto mode = model.config().head_mode();
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const auto part = indices.subspan(start, std::min(batch_size, indices.size() - start));
        const auto result = model.forward(gather(data, part), false);
        for (const auto& [c, t] : result.outputs) {
            auto& dst = out[c];
            const auto values = t.data();
            if (mode == HeadMode::Regress) {
                for (float v : values) dst.push_back(round_to_rating(v));
            } else {
                const std::size_t k = t.dim(1);
                for (std::size_t r = 0; r < part.size(); ++r) {
                    const auto row = values.subspan(r * k, k);
                    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
                    dst.push_back(index_to_rating(static_cast<int>(best) + 1));
                }
            }
        }
    }
    return out;
}

}  // namespace dfm
