#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "eqdet/audit.hpp"
#include "eqdet/grad_check.hpp"
#include "eqdet/params.hpp"
#include "eqdet/rng.hpp"
#include "eqdet/tensor.hpp"

namespace testutil {

inline eqdet::GridTensor random_tensor(eqdet::CounterRng& rng, std::vector<int> shape, double scale = 1.0) {
    eqdet::GridTensor t(std::move(shape));
    for (double& v : t.values()) v = scale * rng.normal();
    return t;
}

inline double max_abs(const eqdet::GridTensor& t) {
    double m = 0.0;
    for (double v : t.values()) m = std::max(m, std::fabs(v));
    return m;
}

/// linf(a - b) / max(linf(a), linf(b), tiny)
inline double rel_residual(const eqdet::GridTensor& a, const eqdet::GridTensor& b) {
    return eqdet::max_abs_diff(a, b) / std::max({max_abs(a), max_abs(b), 1e-30});
}

inline std::vector<double> random_readout(std::int64_t n, std::uint64_t seed) {
    eqdet::CounterRng rng(seed);
    std::vector<double> r(static_cast<std::size_t>(n));
    for (double& v : r) v = rng.normal();
    return r;
}

inline double contract(const eqdet::GridTensor& t, const std::vector<double>& readout) {
    double s = 0.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) s += t.data()[i] * readout[static_cast<std::size_t>(i)];
    return s;
}

inline eqdet::GridTensor tensor_of(std::vector<int> shape, const std::vector<double>& readout) {
    return eqdet::GridTensor(std::move(shape), readout);
}

/// Wraps an op whose learnables are registered Params: `value` runs the
/// forward with the current parameter values and projects to a scalar,
/// `backward` runs forward + backward so the Param grads hold the analytic
/// gradient of that same scalar.
inline eqdet::GradCheckReport check_params(const eqdet::ParamRefs& params, const std::function<double()>& value,
                                           const std::function<void()>& backward,
                                           const eqdet::GradCheckOptions& opts = {}) {
    eqdet::DifferentiableScalarFn fn;
    fn.value = [&](const std::vector<double>& flat) {
        eqdet::unflatten_values(params, flat);
        return value();
    };
    fn.gradient = [&](const std::vector<double>& flat) {
        eqdet::unflatten_values(params, flat);
        eqdet::zero_grads(params);
        backward();
        return eqdet::flatten_grads(params);
    };
    return eqdet::grad_check(fn, eqdet::flatten_values(params), opts);
}

}  // namespace testutil
