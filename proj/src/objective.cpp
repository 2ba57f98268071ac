#include "dfm/objective.hpp"

#include <algorithm>
#include <cmath>

namespace dfm {

namespace {

double task_weight(const TaskWeights& mu, Component c) {
    auto it = mu.find(c);
    const double w = it == mu.end() ? 1.0 : it->second;
    if (w < 0.0) throw UsageError("task weights must be non-negative");
    return w;
}

void check_labels(std::size_t rows, std::size_t num_classes, std::span<const int> labels,
                  const ClassWeights& weights, const char* who) {
    if (labels.size() != rows) {
        throw ShapeError(std::string(who) + ": " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
    }
    if (weights.size() != num_classes) {
        throw ShapeError(std::string(who) + ": class weight vector has wrong length");
    }
    for (int y : labels) {
        if (y < 1 || y > static_cast<int>(num_classes)) {
            throw DataError(std::string(who) + ": label index " + std::to_string(y) + " out of range");
        }
    }
}

}  // namespace

std::string_view component_key(Component c) {
    switch (c) {
        case Component::Nature: return "nature";
        case Component::Questioning: return "questioning";
        case Component::Explanations: return "explanations";
    }
    return "?";
}

std::string_view component_title(Component c) {
    switch (c) {
        case Component::Nature: return "Nature of Discourse";
        case Component::Questioning: return "Questioning";
        case Component::Explanations: return "Explanations";
    }
    return "?";
}

Component parse_component(std::string_view text) {
    for (Component c : kComponents) {
        const auto key = component_key(c);
        if (text == key || (text.size() == 1 && text[0] == key[0])) return c;
    }
    throw UsageError("unknown component '" + std::string(text) + "'");
}

bool is_rating(double r) {
    return std::any_of(kRatings.begin(), kRatings.end(), [r](double v) { return v == r; });
}

int rating_to_index(double r) {
    if (!is_rating(r)) throw DataError("rating " + std::to_string(r) + " is not on the 1.0..4.0 half-point scale");
    return static_cast<int>(2.0 * r - 1.0);
}

double index_to_rating(int index) {
    if (index < 1 || index > kNumClasses) throw DataError("class index " + std::to_string(index) + " out of range");
    return (index + 1) / 2.0;
}

double round_to_rating(double value) {
    if (std::isnan(value)) throw NumericError("cannot round NaN to a rating");
    const double clamped = std::clamp(value, 1.0, 4.0);
    return std::floor(clamped * 2.0 + 0.5) / 2.0;
}

ClassWeights class_weights(std::span<const int> label_indices, int num_classes) {
    if (label_indices.empty()) throw UsageError("class_weights: empty training set");
    std::vector<double> counts(static_cast<std::size_t>(num_classes), 0.0);
    for (int y : label_indices) {
        if (y < 1 || y > num_classes) throw DataError("class_weights: label index out of range");
        counts[static_cast<std::size_t>(y - 1)] += 1.0;
    }
    ClassWeights w(counts.size(), 0.0);
    double total = 0.0;
    int present = 0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
        if (counts[j] > 0) {
            w[j] = 1.0 / counts[j];
            total += w[j];
            ++present;
        }
    }
    const double mean = total / present;
    double largest = 0.0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
        if (counts[j] > 0) {
            w[j] /= mean;
            largest = std::max(largest, w[j]);
        }
    }
    for (std::size_t j = 0; j < counts.size(); ++j)
        if (counts[j] == 0) w[j] = largest;
    return w;
}

template <typename T>
BasicTensor<T> oll_loss(const BasicTensor<T>& probs, std::span<const int> labels, const ClassWeights& weights) {
    if (probs.rank() != 2) throw ShapeError("oll_loss: probabilities must be [N,K], got " + shape_str(probs.shape()));
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    check_labels(n, k, labels, weights, "oll_loss");
    std::vector<T> coeff(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        const double w = weights[static_cast<std::size_t>(y - 1)];
        for (std::size_t j = 0; j < k; ++j) {
            coeff[i * k + j] = static_cast<T>(w * std::abs(y - static_cast<int>(j + 1)) / static_cast<double>(n));
        }
    }
    auto log_rest = log(clamp_min(add_scalar(scale(probs, T(-1)), T(1)), static_cast<T>(kLogClamp)));
    return scale(sum(mul(log_rest, BasicTensor<T>::from({n, k}, std::move(coeff)))), T(-1));
}

template <typename T>
BasicTensor<T> weighted_ce_loss(const BasicTensor<T>& probs, std::span<const int> labels,
                                const ClassWeights& weights) {
    if (probs.rank() != 2) throw ShapeError("ce_loss: probabilities must be [N,K], got " + shape_str(probs.shape()));
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    check_labels(n, k, labels, weights, "ce_loss");
    std::vector<T> coeff(n * k, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::size_t>(labels[i] - 1);
        coeff[i * k + y] = static_cast<T>(weights[y] / static_cast<double>(n));
    }
    auto logp = log(clamp_min(probs, static_cast<T>(kLogClamp)));
    return scale(sum(mul(logp, BasicTensor<T>::from({n, k}, std::move(coeff)))), T(-1));
}

template <typename T>
BasicTensor<T> l1_loss(const BasicTensor<T>& preds, std::span<const double> ratings, const ClassWeights& weights) {
    const std::size_t n = ratings.size();
    if (preds.numel() != n || preds.rank() > 2 || (preds.rank() == 2 && preds.dim(1) != 1)) {
        throw ShapeError("l1_loss: predictions " + shape_str(preds.shape()) + " do not match " +
                         std::to_string(n) + " ratings");
    }
    std::vector<T> target(n), coeff(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = rating_to_index(ratings[i]);
        target[i] = static_cast<T>(ratings[i]);
        coeff[i] = static_cast<T>(weights.at(static_cast<std::size_t>(y - 1)) / static_cast<double>(n));
    }
    auto flat = reshape(preds, {n});
    auto err = abs(sub(flat, BasicTensor<T>::from({n}, std::move(target))));
    return sum(mul(err, BasicTensor<T>::from({n}, std::move(coeff))));
}

template <typename T>
BasicTensor<T> multitask_total(const std::map<Component, BasicTensor<T>>& losses, const TaskWeights& mu) {
    if (losses.empty()) throw UsageError("multitask_total: no task losses");
    BasicTensor<T> total;
    for (const auto& [c, loss] : losses) {
        auto term = scale(loss, static_cast<T>(task_weight(mu, c)));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

double multitask_total(const std::map<Component, double>& losses, const TaskWeights& mu) {
    double total = 0.0;
    for (const auto& [c, loss] : losses) total += task_weight(mu, c) * loss;
    return total;
}

#define DFM_INSTANTIATE(T)                                                                                 \
    template BasicTensor<T> oll_loss(const BasicTensor<T>&, std::span<const int>, const ClassWeights&);    \
    template BasicTensor<T> weighted_ce_loss(const BasicTensor<T>&, std::span<const int>,                  \
                                             const ClassWeights&);                                         \
    template BasicTensor<T> l1_loss(const BasicTensor<T>&, std::span<const double>, const ClassWeights&); \
    template BasicTensor<T> multitask_total(const std::map<Component, BasicTensor<T>>&, const TaskWeights&);

DFM_INSTANTIATE(float)
DFM_INSTANTIATE(double)

#undef DFM_INSTANTIATE

}  // namespace dfm
