#pragma once

#include "dfm/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace dfm {

struct GradCheckOptions {
    double step = 1e-5;
    // Tensors larger than this are checked on a random subset of this many
    // coordinates.
    std::size_t max_coords_per_input = 64;
    // Gradients smaller than this are compared on an absolute scale.
    double magnitude_floor = 1e-4;
    std::uint64_t seed = 1;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    std::size_t worst_input = 0;
    std::size_t worst_coord = 0;
    bool passed = false;
};

using TensorFn = std::function<Tensor64(const std::vector<Tensor64>&)>;

// Compares autodiff gradients of a random projection of fn(inputs) against
// central differences.  Every input is treated as a differentiable leaf.
GradCheckReport grad_check(const TensorFn& fn, const std::vector<Tensor64>& inputs, double tol,
                           const GradCheckOptions& options = {});

}  // namespace dfm
