#include "eqdet/group.hpp"

namespace eqdet {

std::array<int, 2> act_on_index(RotationC4 r, std::array<int, 2> yx, std::array<int, 2> extent) {
    if (extent[0] != extent[1]) throw std::invalid_argument("act_on_index: grid must be square");
    const int w = extent[1];
    if (yx[0] < 0 || yx[0] >= extent[0] || yx[1] < 0 || yx[1] >= w)
        throw std::out_of_range("act_on_index: index out of bounds");
    for (int i = 0; i < r.r; ++i) yx = {w - 1 - yx[1], yx[0]};
    return yx;
}

namespace {

void check_square_spatial(const GridTensor& x) {
    if (x.rank() < 2) throw std::invalid_argument("rotate: tensor must have two spatial axes");
    if (x.dim(x.rank() - 2) != x.dim(x.rank() - 1))
        throw std::invalid_argument("rotate: spatial extent must be square");
}

}  // namespace

GridTensor rotate_planar(const GridTensor& x, RotationC4 r) {
    check_square_spatial(x);
    const int n = x.dim(x.rank() - 1);
    GridTensor out(x.shape());
    if (r.r == 0) {
        std::copy(x.values().begin(), x.values().end(), out.values().begin());
        return out;
    }
    const std::int64_t plane = static_cast<std::int64_t>(n) * n;
    const std::int64_t planes = x.numel() / plane;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* in = x.data() + p * plane;
        double* op = out.data() + p * plane;
        for (int y = 0; y < n; ++y)
            for (int xx = 0; xx < n; ++xx) {
                const auto d = act_on_index(r, {y, xx}, {n, n});
                op[static_cast<std::int64_t>(d[0]) * n + d[1]] = in[static_cast<std::int64_t>(y) * n + xx];
            }
    }
    return out;
}

GridTensor rotate_p4(const GridTensor& x, RotationC4 r) {
    check_square_spatial(x);
    if (x.rank() < 3 || x.dim(x.rank() - 3) != 4)
        throw std::invalid_argument("rotate_p4: group axis must exist and have length 4");
    const int n = x.dim(x.rank() - 1);
    GridTensor out(x.shape());
    const std::int64_t plane = static_cast<std::int64_t>(n) * n;
    const std::int64_t block = 4 * plane;
    const std::int64_t blocks = x.numel() / block;
    for (std::int64_t b = 0; b < blocks; ++b)
        for (int s = 0; s < 4; ++s) {
            const int src_s = ((s - r.r) % 4 + 4) % 4;
            const double* in = x.data() + b * block + src_s * plane;
            double* op = out.data() + b * block + s * plane;
            for (int y = 0; y < n; ++y)
                for (int xx = 0; xx < n; ++xx) {
                    const auto d = act_on_index(r, {y, xx}, {n, n});
                    op[static_cast<std::int64_t>(d[0]) * n + d[1]] = in[static_cast<std::int64_t>(y) * n + xx];
                }
        }
    return out;
}

GridTensor rotate_kernel(const GridTensor& k, RotationC4 r) {
    if (k.dim(k.rank() - 1) % 2 == 0) throw std::invalid_argument("rotate_kernel: kernel extent must be odd");
    return rotate_planar(k, r);
}

}  // namespace eqdet
