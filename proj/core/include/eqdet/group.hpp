#pragma once

#include <array>

#include "eqdet/tensor.hpp"

namespace eqdet {

/// Quarter-turn rotation, r in {0,1,2,3}.
struct RotationC4 {
    int r = 0;

    constexpr RotationC4() = default;
    constexpr explicit RotationC4(int quarter_turns) : r(((quarter_turns % 4) + 4) % 4) {}

    constexpr RotationC4 compose(RotationC4 o) const { return RotationC4(r + o.r); }
    constexpr RotationC4 inverse() const { return RotationC4(4 - r); }
    constexpr bool operator==(const RotationC4&) const = default;
};

/// Element (t, r) of the group of grid translations and quarter turns.
/// Composition follows the semidirect product: (t1,r1)*(t2,r2) = (t1 + r1*t2, r1*r2).
struct GroupElementP4 {
    std::array<int, 2> t{0, 0};  // (dy, dx) displacement
    RotationC4 r;

    /// Linear action of a rotation on a grid displacement.
    static constexpr std::array<int, 2> rotate_displacement(RotationC4 rot, std::array<int, 2> d) {
        for (int i = 0; i < rot.r; ++i) d = {-d[1], d[0]};
        return d;
    }

    constexpr GroupElementP4 compose(const GroupElementP4& o) const {
        const auto rt = rotate_displacement(r, o.t);
        return {{t[0] + rt[0], t[1] + rt[1]}, r.compose(o.r)};
    }

    constexpr GroupElementP4 inverse() const {
        const auto ri = r.inverse();
        const auto rt = rotate_displacement(ri, t);
        return {{-rt[0], -rt[1]}, ri};
    }

    constexpr bool operator==(const GroupElementP4&) const = default;
};

/// Quarter-turn action on a square-grid index: r=1 maps (y,x) -> (W-1-x, y).
/// Requires H == W.
std::array<int, 2> act_on_index(RotationC4 r, std::array<int, 2> yx, std::array<int, 2> extent);

/// Rotate the last two (square) axes: out[.., act(r,(y,x))] = in[.., (y,x)].
GridTensor rotate_planar(const GridTensor& x, RotationC4 r);

/// Rotate a lifted map [.., S=4, Y, X]: spatial rotation plus a cyclic shift
/// of the group axis, out[.., s, act(r,(y,x))] = in[.., (s-r) mod 4, (y,x)].
GridTensor rotate_p4(const GridTensor& x, RotationC4 r);

/// Rotate a kernel [Cout, Cin, K, K] spatially about its center. K must be odd.
GridTensor rotate_kernel(const GridTensor& k, RotationC4 r);

/// The C4 element whose rotate_planar action matches a +90 degree world
/// rotation (counter-clockwise, +x toward +y) about the grid center under
/// the row = y-index, col = x-index cell convention. Every module that
/// relates world rotations to grid rotations goes through this constant.
inline constexpr RotationC4 kQuarterTurnCcw{3};

}  // namespace eqdet
