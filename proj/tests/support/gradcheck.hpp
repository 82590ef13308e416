#pragma once

// Finite-difference oracle for reverse-mode gradients. Kept independent of the
// library's backward path: it only calls forwards with recording off.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "pdiff/tensor.hpp"

namespace testsupport {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

inline double grad_rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

/// Compares one reverse sweep against central differences on every coordinate
/// of every listed parameter. loss_fn must be a pure function of the params.
inline GradCheckResult grad_check(const std::function<pdiff::Tensor(pdiff::Tape&)>& loss_fn,
                                  std::vector<pdiff::Tensor> params, double h = 1e-4) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    pdiff::Tape tape;
    pdiff::Tensor loss = loss_fn(tape);
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.grad());

    GradCheckResult result;
    pdiff::Tape off(false);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double orig = p.data()[j];
            p.data()[j] = orig + h;
            const double fp = loss_fn(off).item();
            p.data()[j] = orig - h;
            const double fm = loss_fn(off).item();
            p.data()[j] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            result.max_rel_err = std::max(result.max_rel_err, grad_rel_err(analytic[pi][j], fd));
            ++result.checked;
        }
    }
    return result;
}

}  // namespace testsupport
