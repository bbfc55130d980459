#pragma once

#include <functional>

#include "flowcf/tensor.hpp"

// Central finite-difference probes. All checks in the suite run in
// 64-bit with eps = 1e-5 and compare against analytic gradients with
// the relative metric below.

namespace flowcf {

inline constexpr double kGradEps = 1e-5;

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

// Max relative error between `analytic` and central differences of
// `f` over every element of `x`. `x` is restored after probing.
inline double check_gradient(Tensor3& x, const Tensor3& analytic,
                             const std::function<double()>& f, double eps = kGradEps) {
    if (!x.same_shape(analytic)) throw invalid_input("check_gradient: shape mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double saved = x.data[i];
        x.data[i] = saved + eps;
        const double up = f();
        x.data[i] = saved - eps;
        const double down = f();
        x.data[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        worst = std::max(worst, rel_err(analytic.data[i], numeric));
    }
    return worst;
}

// Same probe over an arbitrary set of scalars (network parameters).
inline double check_gradient_scalars(const std::vector<double*>& xs,
                                     const std::vector<double>& analytic,
                                     const std::function<double()>& f, double eps = kGradEps) {
    if (xs.size() != analytic.size()) throw invalid_input("check_gradient_scalars: size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double saved = *xs[i];
        *xs[i] = saved + eps;
        const double up = f();
        *xs[i] = saved - eps;
        const double down = f();
        *xs[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        worst = std::max(worst, rel_err(analytic[i], numeric));
    }
    return worst;
}

} // namespace flowcf
