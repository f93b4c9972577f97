#pragma once

#include <functional>
#include <string>

#include "dvit/tensor.hpp"

namespace dvit {

struct GradCheckResult {
    bool passed = false;
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    std::string summary() const;
};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences (f(x+h*e_i) - f(x-h*e_i)) / (2h), element by element.
/// Runs on the double instantiation of the tensor stack so the differencing
/// is trustworthy at tolerances around 1e-3. The error reported per element
/// is |analytic - numeric| / max(1, |analytic|, |numeric|); the check passes
/// iff the maximum over elements is <= tol. f must be deterministic.
GradCheckResult grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x,
                           double h = 1e-3, double tol = 1e-3);

}  // namespace dvit
