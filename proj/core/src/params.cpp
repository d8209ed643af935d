#include "eqdet/params.hpp"

#include <stdexcept>

namespace eqdet {

std::vector<double> flatten_values(const ParamRefs& params) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_size(params)));
    for (const Param* p : params) {
        const auto vals = p->value.values();
        flat.insert(flat.end(), vals.begin(), vals.end());
    }
    return flat;
}

std::vector<double> flatten_grads(const ParamRefs& params) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total_size(params)));
    for (const Param* p : params) {
        const auto vals = p->grad.values();
        flat.insert(flat.end(), vals.begin(), vals.end());
    }
    return flat;
}

void unflatten_values(const ParamRefs& params, const std::vector<double>& flat) {
    if (static_cast<std::int64_t>(flat.size()) != total_size(params))
        throw std::invalid_argument("unflatten_values: size mismatch");
    std::size_t pos = 0;
    for (Param* p : params) {
        auto vals = p->value.values();
        for (double& v : vals) v = flat[pos++];
    }
}

}  // namespace eqdet
