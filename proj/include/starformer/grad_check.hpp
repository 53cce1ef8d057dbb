#pragma once

#include <functional>

#include "starformer/ops.hpp"

namespace starformer {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::int64_t worst_index = -1;
    double tolerance = 0.0;
    bool pass = false;
};

// Compares the tape gradient of a scalar-valued function against central
// finite differences, elementwise. The function must be deterministic and
// twice differentiable at x. Relative error is |g - g_fd| / max(1, |g|, |g_fd|).
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step = 1e-4, double tolerance = 1e-6);

} // namespace starformer
