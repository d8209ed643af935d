#include "eqdet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "eqdet/rng.hpp"

namespace eqdet {

GradCheckReport grad_check(const DifferentiableScalarFn& fn, std::vector<double> point,
                           const GradCheckOptions& opts) {
    GradCheckReport rep;
    if (opts.eps < 1e-7 || opts.eps > 1e-3) return rep;  // failed: eps outside the trusted window

    const std::vector<double> analytic = fn.gradient(point);
    const auto n = static_cast<std::int64_t>(point.size());
    if (static_cast<std::int64_t>(analytic.size()) != n) return rep;

    std::vector<std::int64_t> coords;
    if (n <= opts.full_check_limit) {
        coords.resize(static_cast<std::size_t>(n));
        std::iota(coords.begin(), coords.end(), 0);
    } else {
        CounterRng rng(opts.seed);
        coords.reserve(static_cast<std::size_t>(opts.sample_count));
        for (std::int64_t i = 0; i < opts.sample_count; ++i)
            coords.push_back(static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(n)));
    }

    bool all_finite = true;
    for (const std::int64_t c : coords) {
        const double saved = point[static_cast<std::size_t>(c)];
        point[static_cast<std::size_t>(c)] = saved + opts.eps;
        const double fp = fn.value(point);
        point[static_cast<std::size_t>(c)] = saved - opts.eps;
        const double fm = fn.value(point);
        point[static_cast<std::size_t>(c)] = saved;

        const double numeric = (fp - fm) / (2.0 * opts.eps);
        const double a = analytic[static_cast<std::size_t>(c)];
        if (!std::isfinite(numeric) || !std::isfinite(a)) {
            all_finite = false;
            rep.worst_index = c;
            break;
        }
        const double abs_err = std::fabs(a - numeric);
        const double rel_err = abs_err / std::max({1.0, std::fabs(a), std::fabs(numeric)});
        if (rel_err > rep.max_rel_err) {
            rep.max_rel_err = rel_err;
            rep.worst_index = c;
        }
        rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    }

    rep.passed = all_finite && rep.max_rel_err <= opts.rel_tol;
    return rep;
}

}  // namespace eqdet
