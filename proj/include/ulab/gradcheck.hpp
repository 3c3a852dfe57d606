#pragma once

// Central finite-difference oracle for gradients. Lives in the library so the
// training and attribution paths can be audited anywhere, but stays fully
// independent of the reverse-mode path it checks: the numeric side only ever
// calls the forward function.

#include <cmath>
#include <functional>
#include <vector>

#include "ulab/errors.hpp"
#include "ulab/tensor.hpp"

namespace ulab::ag {

// f maps a tensor to a scalar tensor. Returns the max over coordinates of
// |analytic - numeric| / max(1, |numeric|). Intended for 64-bit use; the
// default epsilon follows the usual central-difference sweet spot.
template <class S>
double finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& x,
                         double epsilon = 1e-5) {
    if (epsilon <= 0) throw ConfigError("finite_diff_check: epsilon must be positive");

    Tensor<S> probe = x.clone_detached(/*requires_grad=*/true);
    std::vector<S> analytic;
    {
        GradTape<S> tape;
        Tensor<S> y = f(probe);
        if (y.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
        if (!std::isfinite(static_cast<double>(y.item())))
            throw NumericError("finite_diff_check: f(x) is not finite");
        tape.backward(y);
        analytic = probe.has_grad() ? probe.grad() : std::vector<S>(probe.values().size(), S(0));
    }

    Tensor<S> work = x.clone_detached(/*requires_grad=*/false);
    auto eval = [&]() {
        Tensor<S> y = f(work);
        if (y.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
        const double v = static_cast<double>(y.item());
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: f(x) is not finite");
        return v;
    };

    double max_rel = 0.0;
    auto& w = work.mutable_values();
    for (size_t i = 0; i < w.size(); ++i) {
        const S saved = w[i];
        w[i] = saved + static_cast<S>(epsilon);
        const double up = eval();
        w[i] = saved - static_cast<S>(epsilon);
        const double down = eval();
        w[i] = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double rel = std::abs(static_cast<double>(analytic[i]) - numeric) /
                           std::max(1.0, std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace ulab::ag
