#pragma once

#include <cstdint>
#include <functional>
#include <vector>

namespace eqdet {

struct GradCheckReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    bool passed = false;
};

/// A scalar-valued function of a flat parameter vector together with its
/// hand-written gradient. Ops under test are wrapped by projecting their
/// output to a scalar with a fixed random readout.
struct DifferentiableScalarFn {
    std::function<double(const std::vector<double>&)> value;
    std::function<std::vector<double>(const std::vector<double>&)> gradient;
};

struct GradCheckOptions {
    double eps = 1e-5;
    double rel_tol = 1e-4;
    /// Above this many coordinates, check a seeded random subsample instead
    /// of every coordinate.
    std::int64_t full_check_limit = 10000;
    std::int64_t sample_count = 2000;
    std::uint64_t seed = 17;
};

/// Compares the analytic gradient against central differences coordinate by
/// coordinate. Relative error uses max(1, |analytic|, |numeric|) as the
/// denominator so tiny gradients are judged on absolute error.
GradCheckReport grad_check(const DifferentiableScalarFn& fn, std::vector<double> point,
                           const GradCheckOptions& opts = {});

}  // namespace eqdet
