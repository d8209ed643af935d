#pragma once

#include <string>
#include <vector>

#include "eqdet/rng.hpp"
#include "eqdet/tensor.hpp"

namespace eqdet {

/// A named learnable tensor with its gradient accumulator.
struct Param {
    std::string name;
    GridTensor value;
    GridTensor grad;

    Param(std::string n, std::vector<int> shape) : name(std::move(n)), value(shape), grad(std::move(shape)) {}

    void zero_grad() { grad.fill(0.0); }

    void init_normal(CounterRng& rng, double stddev) {
        for (double& v : value.values()) v = stddev * rng.normal();
    }
};

using ParamRefs = std::vector<Param*>;

inline std::int64_t total_size(const ParamRefs& params) {
    std::int64_t n = 0;
    for (const Param* p : params) n += p->value.numel();
    return n;
}

inline void zero_grads(const ParamRefs& params) {
    for (Param* p : params) p->zero_grad();
}

/// Copy all parameter values into one flat vector (registry order).
std::vector<double> flatten_values(const ParamRefs& params);
std::vector<double> flatten_grads(const ParamRefs& params);
void unflatten_values(const ParamRefs& params, const std::vector<double>& flat);

}  // namespace eqdet
