#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "devmod/tensor.hpp"

namespace devmod {

struct GradCheckReport {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    bool nan_seen = false;
    bool passed = false;
};

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `h` (h in [1e-7, 1e-4]).
///
/// The per-element error is |analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-3 * max_j |numeric_j|, 1e-12), so components far below the gradient's
/// overall scale are judged on an absolute basis relative to that scale.
/// A NaN anywhere counts as failure.
GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  double h, double tol);

/// Same comparison for a leaf that `loss` reads implicitly (a layer
/// parameter). `param` is perturbed in place and restored.
GradCheckReport finite_diff_check_param(const std::function<Tensor()>& loss, Tensor& param, double h,
                                        double tol);

}  // namespace devmod
