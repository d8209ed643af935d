#include <array>
#include <stdexcept>

#include "doctest.h"
#include "eqdet/group.hpp"
#include "eqdet/rng.hpp"
#include "testutil.hpp"

using namespace eqdet;
using namespace testutil;

TEST_CASE("RotationC4 forms a group") {
    for (int a = 0; a < 4; ++a) {
        RotationC4 ra(a);
        CHECK(ra.compose(ra.inverse()) == RotationC4(0));
        for (int b = 0; b < 4; ++b) CHECK(ra.compose(RotationC4(b)).r == (a + b) % 4);
    }
    CHECK(RotationC4(-1).r == 3);
    CHECK(RotationC4(7).r == 3);
}

TEST_CASE("GroupElementP4 composition follows the semidirect product") {
    const GroupElementP4 id{};
    std::vector<GroupElementP4> elems;
    for (int r = 0; r < 4; ++r)
        for (int ty = -2; ty <= 2; ty += 2)
            for (int tx = -2; tx <= 2; tx += 2) elems.push_back({{ty, tx}, RotationC4(r)});

    for (const auto& g : elems) {
        CHECK(g.compose(g.inverse()) == id);
        CHECK(g.inverse().compose(g) == id);
        CHECK(g.compose(id) == g);
    }
    CounterRng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto& a = elems[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(elems.size()) - 1))];
        const auto& b = elems[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(elems.size()) - 1))];
        const auto& c = elems[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(elems.size()) - 1))];
        CHECK(a.compose(b).compose(c) == a.compose(b.compose(c)));
    }
}

TEST_CASE("act_on_index convention and composition") {
    CHECK(act_on_index(RotationC4(0), {2, 3}, {5, 5}) == std::array<int, 2>{2, 3});
    CHECK(act_on_index(RotationC4(1), {0, 0}, {4, 4}) == std::array<int, 2>{3, 0});

    for (int r1 = 0; r1 < 4; ++r1)
        for (int r2 = 0; r2 < 4; ++r2)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) {
                    const std::array<int, 2> p{y, x};
                    const auto once = act_on_index(RotationC4(r2), p, {8, 8});
                    CHECK(act_on_index(RotationC4(r1), once, {8, 8}) ==
                          act_on_index(RotationC4(r1).compose(RotationC4(r2)), p, {8, 8}));
                }
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            std::array<int, 2> p{y, x};
            for (int i = 0; i < 4; ++i) p = act_on_index(RotationC4(1), p, {8, 8});
            CHECK(p == std::array<int, 2>{y, x});
        }
    CHECK_THROWS_AS(act_on_index(RotationC4(1), {0, 0}, {4, 6}), std::invalid_argument);
}

TEST_CASE("rotate_planar moves values by the index action") {
    CounterRng rng(6);

    GridTensor constant = GridTensor::full({2, 3, 3}, 4.5);
    for (int r = 0; r < 4; ++r) CHECK(max_abs_diff(rotate_planar(constant, RotationC4(r)), constant) == 0.0);

    GridTensor hot({1, 3, 3});
    hot.at(0, 0, 0) = 1.0;
    auto flipped = rotate_planar(hot, RotationC4(2));
    CHECK(flipped.at(0, 2, 2) == 1.0);
    CHECK(flipped.sum_squares() == 1.0);

    GridTensor x = random_tensor(rng, {4, 6, 6});
    GridTensor y = x;
    for (int i = 0; i < 4; ++i) y = rotate_planar(y, RotationC4(1));
    CHECK(max_abs_diff(x, y) == 0.0);

    for (int r1 = 0; r1 < 4; ++r1)
        for (int r2 = 0; r2 < 4; ++r2) {
            const auto composed = rotate_planar(x, RotationC4(r1).compose(RotationC4(r2)));
            const auto stepwise = rotate_planar(rotate_planar(x, RotationC4(r2)), RotationC4(r1));
            CHECK(max_abs_diff(composed, stepwise) == 0.0);
            CHECK(composed.sum_squares() == doctest::Approx(x.sum_squares()).epsilon(1e-15));
        }
}

TEST_CASE("rotate_p4 shifts the group axis alongside the spatial rotation") {
    CounterRng rng(7);
    GridTensor x = random_tensor(rng, {1, 2, 4, 5, 5});

    CHECK(max_abs_diff(rotate_p4(x, RotationC4(0)), x) == 0.0);

    GridTensor slices({1, 1, 4, 3, 3});
    for (int s = 0; s < 4; ++s)
        for (int y = 0; y < 3; ++y)
            for (int xx = 0; xx < 3; ++xx) slices.at(0, 0, s, y, xx) = static_cast<double>(s);
    auto rotated = rotate_p4(slices, RotationC4(1));
    for (int s = 0; s < 4; ++s) CHECK(rotated.at(0, 0, s, 1, 1) == static_cast<double>((s + 3) % 4));

    GridTensor y = x;
    for (int i = 0; i < 4; ++i) y = rotate_p4(y, RotationC4(1));
    CHECK(max_abs_diff(x, y) == 0.0);

    for (int r1 = 0; r1 < 4; ++r1)
        for (int r2 = 0; r2 < 4; ++r2) {
            const auto composed = rotate_p4(x, RotationC4(r1).compose(RotationC4(r2)));
            const auto stepwise = rotate_p4(rotate_p4(x, RotationC4(r2)), RotationC4(r1));
            CHECK(max_abs_diff(composed, stepwise) == 0.0);
        }

    CHECK_THROWS_AS(rotate_p4(GridTensor({1, 2, 3, 5, 5}), RotationC4(1)), std::invalid_argument);
}

TEST_CASE("rotate_kernel turns the taps about the center") {
    GridTensor ones = GridTensor::full({2, 2, 3, 3}, 1.0);
    for (int r = 0; r < 4; ++r) CHECK(max_abs_diff(rotate_kernel(ones, RotationC4(r)), ones) == 0.0);

    GridTensor k({1, 1, 3, 3});
    k.at(0, 0, 0, 1) = 1.0;  // top-center tap
    auto r1 = rotate_kernel(k, RotationC4(1));
    CHECK(r1.at(0, 0, 1, 0) == 1.0);  // left-center under the CCW convention
    CHECK(r1.sum_squares() == 1.0);

    CounterRng rng(8);
    GridTensor rk = random_tensor(rng, {3, 2, 5, 5});
    CHECK(max_abs_diff(rotate_kernel(rotate_kernel(rk, RotationC4(1)), RotationC4(3)), rk) == 0.0);

    CHECK_THROWS_AS(rotate_kernel(GridTensor({1, 1, 2, 2}), RotationC4(1)), std::invalid_argument);
}
