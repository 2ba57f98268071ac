#include "dfm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace dfm {

GradCheckReport grad_check(const TensorFn& fn, const std::vector<Tensor64>& inputs, double tol,
                           const GradCheckOptions& options) {
    std::vector<Tensor64> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs) {
        leaves.push_back(Tensor64::from(in.shape(), std::vector<double>(in.data().begin(), in.data().end()), true));
    }

    std::mt19937_64 rng(options.seed);
    Tensor64 projection;
    auto objective = [&](bool with_grad) {
        Tensor64 out = fn(leaves);
        if (!projection.defined()) {
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            std::vector<double> r(out.numel());
            for (auto& v : r) v = u(rng);
            projection = Tensor64::from(out.shape(), std::move(r));
        }
        Tensor64 loss = sum(mul(out, projection));
        if (with_grad) backward(loss);
        return loss.item();
    };

    for (auto& l : leaves) l.zero_grad();
    objective(true);
    std::vector<std::vector<double>> analytic;
    for (const auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());

    GradCheckReport report;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        const std::size_t n = leaves[k].numel();
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), 0);
        if (n > options.max_coords_per_input) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.max_coords_per_input);
            std::sort(coords.begin(), coords.end());
        }
        auto values = leaves[k].mutable_data();
        for (std::size_t c : coords) {
            const double saved = values[c];
            values[c] = saved + options.step;
            const double plus = objective(false);
            values[c] = saved - options.step;
            const double minus = objective(false);
            values[c] = saved;
            const double numeric = (plus - minus) / (2.0 * options.step);
            const double a = analytic[k][c];
            const double denom = std::max({std::abs(a), std::abs(numeric), options.magnitude_floor});
            double rel = std::abs(a - numeric) / denom;
            if (std::isnan(rel)) rel = std::numeric_limits<double>::infinity();
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_input = k;
                report.worst_coord = c;
            }
        }
    }
    report.passed = std::isfinite(report.max_rel_err) && report.max_rel_err < tol;
    return report;
}

}  // namespace dfm
