#include "starformer/grad_check.hpp"

#include <cmath>

namespace starformer {

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step, double tolerance) {
    if (step <= 0.0) throw ContractError("grad_check: step must be positive");

    // analytic gradient from one taped evaluation
    std::vector<double> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor probe = x.detach().set_requires_grad(true);
        Tensor y = f(probe);
        if (y.numel() != 1) {
            throw ContractError("grad_check: function output " + shape_str(y.shape()) +
                                " is not a scalar");
        }
        tape.backward(y);
        analytic = probe.has_grad() ? probe.grad()
                                    : std::vector<double>(static_cast<std::size_t>(x.numel()), 0.0);
    }

    auto eval_at = [&](const Tensor& point) {
        const double v = f(point).item();
        if (!std::isfinite(v)) {
            throw NumericError("grad_check: non-finite probe value");
        }
        return v;
    };

    GradCheckReport report;
    report.tolerance = tolerance;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        Tensor lo = x.detach();
        Tensor hi = x.detach();
        lo[i] -= step;
        hi[i] += step;
        const double fd = (eval_at(hi) - eval_at(lo)) / (2.0 * step);
        const double g = analytic[static_cast<std::size_t>(i)];
        const double denom = std::max({1.0, std::abs(g), std::abs(fd)});
        const double rel = std::abs(g - fd) / denom;
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_error <= tolerance;
    return report;
}

} // namespace starformer
