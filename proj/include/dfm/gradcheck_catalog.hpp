#pragma once

// Finite-difference checks over every differentiable primitive and composite
// block, in 64-bit precision.

#include "dfm/grad_check.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dfm {

struct GradCheckCase {
    std::string name;
    std::string kind;  // "primitive" or "composite"
    TensorFn fn;
    std::vector<Tensor64> inputs;
};

// With `inject_fault`, appends a primitive whose backward is deliberately wrong.
std::vector<GradCheckCase> gradcheck_catalog(std::uint64_t seed = 1, bool inject_fault = false);

struct GradCheckRow {
    std::string name;
    std::string kind;
    GradCheckReport report;
};

std::vector<GradCheckRow> run_gradcheck(const std::vector<GradCheckCase>& cases, double tol);

}  // namespace dfm
