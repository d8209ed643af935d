#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "eqdet/metrics.hpp"
#include "eqdet/rng.hpp"
#include "metric_oracles.hpp"

using namespace eqdet;

namespace {

OrientedBox box_at(double x, double y, double score, int cls = 0) {
    OrientedBox b;
    b.x = x;
    b.y = y;
    b.z = 0.5;
    b.score = score;
    b.class_id = cls;
    return b;
}

std::vector<OrientedBox> random_boxes(CounterRng& rng, int n) {
    std::vector<OrientedBox> out;
    for (int i = 0; i < n; ++i) {
        OrientedBox b;
        b.x = rng.uniform(-6.0, 6.0);
        b.y = rng.uniform(-6.0, 6.0);
        b.z = rng.uniform(0.0, 1.0);
        b.w = rng.uniform(0.4, 2.5);
        b.l = rng.uniform(0.4, 5.0);
        b.h = rng.uniform(0.5, 2.0);
        b.yaw = rng.uniform(-M_PI, M_PI);
        b.score = rng.uniform();
        out.push_back(b);
    }
    return out;
}

}  // namespace

TEST_CASE("match_detections follows the greedy nearest rule") {
    auto exact = match_detections({box_at(1.0, 2.0, 0.9)}, {box_at(1.0, 2.0, 1.0)}, 4.0);
    REQUIRE(exact.pairs.size() == 1);
    CHECK(exact.pairs[0].distance == 0.0);

    auto miss = match_detections({box_at(0.0, 0.0, 0.9)}, {box_at(3.0, 0.0, 1.0)}, 2.0);
    CHECK(miss.pairs.empty());
    CHECK(miss.unmatched_preds == std::vector<int>{0});
    CHECK(miss.unmatched_gts == std::vector<int>{0});

    // threshold is inclusive
    CHECK(match_detections({box_at(2.0, 0.0, 0.9)}, {box_at(0.0, 0.0, 1.0)}, 2.0).pairs.size() == 1);

    CHECK_THROWS_AS(match_detections({}, {}, -1.0), std::invalid_argument);

    CounterRng rng(111);
    for (int trial = 0; trial < 30; ++trial) {
        const auto preds = random_boxes(rng, 5);
        const auto gts = random_boxes(rng, 3);
        const auto got = match_detections(preds, gts, 3.0);
        const auto want = oracle::greedy_match(preds, gts, 3.0);
        REQUIRE(got.pairs.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(got.pairs[i].pred == want[i].pred);
            CHECK(got.pairs[i].gt == want[i].gt);
        }
    }
}

TEST_CASE("average_precision handles the degenerate ends") {
    std::vector<OrientedBox> gts{box_at(0.0, 0.0, 1.0), box_at(4.0, 0.0, 1.0)};
    std::vector<OrientedBox> hits{box_at(0.1, 0.0, 0.9), box_at(4.1, 0.0, 0.8)};
    CHECK(average_precision(hits, gts, 2.0).value() == 1.0);

    CHECK(average_precision({}, gts, 2.0).value() == 0.0);
    CHECK_FALSE(average_precision(hits, {}, 2.0).has_value());
}

TEST_CASE("average_precision equals the score-cutoff enumeration oracle") {
    CounterRng rng(112);
    for (int trial = 0; trial < 40; ++trial) {
        const auto preds = random_boxes(rng, rng.uniform_int(0, 8));
        const auto gts = random_boxes(rng, rng.uniform_int(1, 5));
        for (const double tau : {0.5, 1.0, 2.0, 4.0}) {
            const double got = average_precision(preds, gts, tau).value();
            const double want = oracle::ap_by_cutoffs({preds}, {gts}, tau);
            CHECK(std::fabs(got - want) <= 1e-12);
        }
    }
}

TEST_CASE("AP never rises when the threshold tightens") {
    CounterRng rng(113);
    for (int trial = 0; trial < 10; ++trial) {
        const auto preds = random_boxes(rng, 6);
        const auto gts = random_boxes(rng, 4);
        double prev = -1.0;
        for (const double tau : {0.5, 1.0, 2.0, 4.0}) {
            const double ap = average_precision(preds, gts, tau).value();
            CHECK(ap >= prev - 1e-15);
            prev = ap;
        }
    }
}

TEST_CASE("orientation_error wraps to the smallest absolute difference") {
    CHECK(orientation_error(0.0, 2.0 * M_PI) <= 1e-15);
    CHECK(orientation_error(M_PI / 2, 0.0) == doctest::Approx(M_PI / 2).epsilon(1e-15));
    CHECK(orientation_error(-3.0, 3.0) == doctest::Approx(2.0 * M_PI - 6.0).epsilon(1e-12));

    CounterRng rng(114);
    for (int trial = 0; trial < 200; ++trial) {
        const double a = rng.uniform(-M_PI, M_PI);
        const double b = rng.uniform(-M_PI, M_PI);
        const double got = orientation_error(a, b);
        CHECK(std::fabs(got - oracle::wrap_diff(a, b)) <= 1e-12);
        CHECK(got == orientation_error(b, a));
        CHECK(got <= M_PI + 1e-12);
    }
}

TEST_CASE("tp_metrics averages the matched-pair errors") {
    std::vector<OrientedBox> gts{box_at(0.0, 0.0, 1.0)};
    std::vector<OrientedBox> preds{box_at(0.0, 0.0, 0.9)};

    auto perfect = tp_metrics(match_detections(preds, gts, 2.0), preds, gts);
    CHECK(perfect.ate == 0.0);
    CHECK(perfect.ase == 0.0);
    CHECK(perfect.aoe == 0.0);
    CHECK_FALSE(perfect.no_matches);

    auto doubled_pred = preds;
    doubled_pred[0].w *= 2.0;
    doubled_pred[0].l *= 2.0;
    doubled_pred[0].h *= 2.0;
    auto doubled = tp_metrics(match_detections(doubled_pred, gts, 2.0), doubled_pred, gts);
    CHECK(doubled.ase == doctest::Approx(0.875).epsilon(1e-15));

    auto none = tp_metrics(MatchResult{}, preds, gts);
    CHECK(none.no_matches);
    CHECK(none.ate == 1.0);
    CHECK(none.ase == 1.0);
    CHECK(none.aoe == 1.0);

    CounterRng rng(115);
    for (int trial = 0; trial < 30; ++trial) {
        const auto p = random_boxes(rng, 6);
        const auto g = random_boxes(rng, 5);
        const auto m = match_detections(p, g, 2.0);
        const auto got = tp_metrics(m, p, g);
        const auto want = oracle::tp_by_formula(oracle::greedy_match(p, g, 2.0), p, g);
        if (want.empty) {
            CHECK(got.no_matches);
            continue;
        }
        CHECK(std::fabs(got.ate - want.ate) <= 1e-12);
        CHECK(std::fabs(got.ase - want.ase) <= 1e-12);
        CHECK(std::fabs(got.aoe - want.aoe) <= 1e-12);
    }
}

TEST_CASE("nds matches its closed forms") {
    CHECK(nds(1.0, {0.0, 0.0, 0.0}) == 1.0);
    CHECK(nds(0.6, {2.0, 1.5, 7.0}) == doctest::Approx(5.0 * 0.6 / 8.0).epsilon(1e-15));
    CHECK(nds(1.0, {0.0, 0.0, 0.0, 0.0, 0.0}) == 1.0);
    CHECK(nds(0.5, {0.2, 0.4, 0.6}) ==
          doctest::Approx(oracle::nds_formula(0.5, {0.2, 0.4, 0.6})).epsilon(1e-15));
    CHECK_THROWS_AS(nds(0.5, {-0.1, 0.0, 0.0}), std::invalid_argument);
    CHECK_THROWS_AS(nds(1.2, {0.0, 0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("evaluate pools the precision-recall curve across scenes") {
    // scene 0: one hit at 0.9, one false positive at 0.8; scene 1: one hit at 0.85
    std::vector<std::vector<OrientedBox>> preds(2), gts(2);
    gts[0] = {box_at(0.0, 0.0, 1.0), box_at(5.0, 0.0, 1.0)};
    preds[0] = {box_at(0.1, 0.0, 0.9), box_at(-5.0, -5.0, 0.8)};
    gts[1] = {box_at(1.0, 1.0, 1.0)};
    preds[1] = {box_at(1.1, 1.0, 0.85)};

    EvalOptions opt;
    opt.ap_thresholds = {2.0};
    auto report = evaluate(preds, gts, 1, opt);
    REQUIRE(report.classes.size() == 1);
    CHECK(report.classes[0].n_gt == 3);
    CHECK(report.classes[0].ap[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(report.n_predictions == 3);
    CHECK(report.n_ground_truth == 3);

    const double want = oracle::ap_by_cutoffs(preds, gts, 2.0);
    CHECK(report.classes[0].ap[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("evaluate skips classes without ground truth and supports five-term parity") {
    std::vector<std::vector<OrientedBox>> preds(1), gts(1);
    gts[0] = {box_at(0.0, 0.0, 1.0, 0)};
    preds[0] = {box_at(0.0, 0.0, 0.9, 0), box_at(2.0, 2.0, 0.8, 1)};

    auto report = evaluate(preds, gts, 2);
    REQUIRE(report.classes.size() == 1);
    CHECK(report.classes[0].class_id == 0);

    EvalOptions five;
    five.five_term_nds = true;
    auto parity = evaluate(preds, gts, 2, five);
    CHECK(parity.nds ==
          doctest::Approx(nds(parity.mean_ap, {parity.mean_ate, parity.mean_ase, parity.mean_aoe, 1.0, 1.0}))
              .epsilon(1e-15));
    CHECK(report.nds == doctest::Approx(nds(report.mean_ap, {report.mean_ate, report.mean_ase, report.mean_aoe}))
                            .epsilon(1e-15));
}

TEST_CASE("metrics are invariant under a global rigid rotation") {
    CounterRng rng(116);
    std::vector<std::vector<OrientedBox>> preds(3), gts(3);
    for (int s = 0; s < 3; ++s) {
        preds[static_cast<std::size_t>(s)] = random_boxes(rng, 6);
        gts[static_cast<std::size_t>(s)] = random_boxes(rng, 4);
    }
    auto base = evaluate(preds, gts, 1);

    const double a = 0.83;
    auto spin = [&](std::vector<std::vector<OrientedBox>> scenes) {
        for (auto& scene : scenes)
            for (auto& b : scene) {
                const double x = b.x * std::cos(a) - b.y * std::sin(a);
                const double y = b.x * std::sin(a) + b.y * std::cos(a);
                b.x = x;
                b.y = y;
                b.yaw = wrap_angle(b.yaw + a);
            }
        return scenes;
    };
    auto turned = evaluate(spin(preds), spin(gts), 1);
    CHECK(std::fabs(base.mean_ap - turned.mean_ap) <= 1e-12);
    CHECK(std::fabs(base.mean_ate - turned.mean_ate) <= 1e-9);
    CHECK(std::fabs(base.mean_ase - turned.mean_ase) <= 1e-12);
    CHECK(std::fabs(base.mean_aoe - turned.mean_aoe) <= 1e-9);
    CHECK(std::fabs(base.nds - turned.nds) <= 1e-9);
}
