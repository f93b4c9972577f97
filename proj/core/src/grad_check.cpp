#include "dvit/grad_check.hpp"

#include <cmath>
#include <sstream>

namespace dvit {

std::string GradCheckResult::summary() const {
    std::ostringstream os;
    os << (passed ? "pass" : "FAIL") << " max_rel_err=" << max_rel_err;
    if (worst_index >= 0)
        os << " at index " << worst_index << " (analytic=" << analytic_at_worst
           << ", numeric=" << numeric_at_worst << ")";
    return os.str();
}

GradCheckResult grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x,
                           double h, double tol) {
    Tensor64 probe = x.clone();
    probe.set_requires_grad(true);

    std::vector<double> analytic;
    {
        Tape64 tape;
        Tape64::Scope scope(tape);
        Tensor64 loss = f(probe);
        if (loss.numel() != 1) throw NotScalar("grad_check: f must be scalar-valued");
        tape.backward(loss);
        analytic = probe.has_grad() ? probe.grad() : std::vector<double>(probe.data().size(), 0.0);
    }

    GradCheckResult result;
    result.passed = true;
    Tensor64 shifted = x.clone();  // no tape active below: pure evaluation
    for (std::size_t i = 0; i < shifted.data().size(); ++i) {
        const double orig = shifted.data()[i];
        shifted.data()[i] = orig + h;
        const double f_plus = f(shifted).item();
        shifted.data()[i] = orig - h;
        const double f_minus = f(shifted).item();
        shifted.data()[i] = orig;

        const double numeric = (f_plus - f_minus) / (2.0 * h);
        const double a = analytic[i];
        const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
        const double rel = std::fabs(a - numeric) / denom;
        if (rel > result.max_rel_err) {
            result.max_rel_err = rel;
            result.worst_index = static_cast<std::int64_t>(i);
            result.analytic_at_worst = a;
            result.numeric_at_worst = numeric;
        }
    }
    result.passed = result.max_rel_err <= tol;
    return result;
}

}  // namespace dvit
