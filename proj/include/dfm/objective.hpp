#pragma once

// Rating scale, class weighting and the training objectives.

#include "dfm/tensor.hpp"

#include <array>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dfm {

enum class Component { Nature, Questioning, Explanations };

inline constexpr std::array<Component, 3> kComponents = {Component::Nature, Component::Questioning,
                                                         Component::Explanations};

// "nature", "questioning", "explanations".
std::string_view component_key(Component c);
// "Nature of Discourse", ...
std::string_view component_title(Component c);
// Accepts the key or its first letter.
Component parse_component(std::string_view text);

// Seven averaged ratings 1.0, 1.5, ..., 4.0 map to class indices 1..7.
inline constexpr int kNumClasses = 7;
inline constexpr std::array<double, kNumClasses> kRatings = {1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0};

bool is_rating(double r);
// j = 2r - 1.  Throws DataError when r is not on the scale.
int rating_to_index(double r);
double index_to_rating(int index);
// Clamp to [1, 4], then nearest rating; midpoints round up.
double round_to_rating(double value);

// Per-class sample weights, indexed by class index - 1.
using ClassWeights = std::vector<double>;

// Inverse class frequency renormalized to mean 1 over the classes present;
// absent classes receive the largest present weight.
ClassWeights class_weights(std::span<const int> label_indices, int num_classes = kNumClasses);

inline constexpr double kLogClamp = 1e-12;

// -(1/N) sum_i w(y_i) sum_j log(1 - p_ij) |y_i - j|, distances in index space.
// probs [N, K]; labels in 1..K.
template <typename T>
BasicTensor<T> oll_loss(const BasicTensor<T>& probs, std::span<const int> labels, const ClassWeights& weights);

// -(1/N) sum_i w(y_i) log p_{i, y_i}
template <typename T>
BasicTensor<T> weighted_ce_loss(const BasicTensor<T>& probs, std::span<const int> labels,
                                const ClassWeights& weights);

// (1/N) sum_i w(y_i) |pred_i - rating_i| on the rating scale.  preds [N] or [N, 1].
template <typename T>
BasicTensor<T> l1_loss(const BasicTensor<T>& preds, std::span<const double> ratings, const ClassWeights& weights);

// Missing components default to weight 1.
using TaskWeights = std::map<Component, double>;

template <typename T>
BasicTensor<T> multitask_total(const std::map<Component, BasicTensor<T>>& losses, const TaskWeights& mu = {});
double multitask_total(const std::map<Component, double>& losses, const TaskWeights& mu = {});

}  // namespace dfm
