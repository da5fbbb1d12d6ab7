#pragma once

// Central-difference gradient checking for scalar-valued functions built from
// tape ops. This is the acceptance oracle for every differentiable module.

#include <functional>

#include "ssvos/ops.hpp"

namespace ssvos {

// Returns max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must be composed solely of tape ops and return a scalar.
inline double fd_gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps = 1e-5) {
    if (eps < 1e-7 || eps > 1e-3)
        throw ContractError("fd_gradcheck: eps outside [1e-7, 1e-3]");
    Tape tape;
    Tensor xw = tape.watch(x.clone());
    Tensor y = f(xw);
    if (y.numel() != 1)
        throw ContractError("fd_gradcheck: f returned non-scalar shape " + shape_str(y.shape()));
    tape.backward(y);
    const std::vector<double> analytic = tape.grad(xw);

    Tensor probe = x.clone();
    double worst = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = probe.data()[static_cast<size_t>(i)];
        probe.data()[static_cast<size_t>(i)] = orig + eps;
        const double up = f(probe).at(0);
        probe.data()[static_cast<size_t>(i)] = orig - eps;
        const double dn = f(probe).at(0);
        probe.data()[static_cast<size_t>(i)] = orig;
        const double fd = (up - dn) / (2.0 * eps);
        const double a = analytic[static_cast<size_t>(i)];
        const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace ssvos
