#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "eqdet/head.hpp"

// Brute-force re-implementations of the evaluation rules, kept deliberately
// naive and independent of the library's code paths.
namespace oracle {

struct Match {
    int pred;
    int gt;
    double distance;
};

inline std::vector<int> score_order(const std::vector<eqdet::OrientedBox>& preds) {
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return preds[static_cast<std::size_t>(a)].score > preds[static_cast<std::size_t>(b)].score;
    });
    return order;
}

inline std::vector<Match> greedy_match(const std::vector<eqdet::OrientedBox>& preds,
                                       const std::vector<eqdet::OrientedBox>& gts, double threshold) {
    std::vector<Match> out;
    std::vector<bool> used(gts.size(), false);
    for (const int p : score_order(preds)) {
        int best = -1;
        double best_d = 0.0;
        for (int g = 0; g < static_cast<int>(gts.size()); ++g) {
            if (used[static_cast<std::size_t>(g)]) continue;
            const double d = std::hypot(preds[static_cast<std::size_t>(p)].x - gts[static_cast<std::size_t>(g)].x,
                                        preds[static_cast<std::size_t>(p)].y - gts[static_cast<std::size_t>(g)].y);
            if (d > threshold) continue;
            if (best < 0 || d < best_d) {
                best = g;
                best_d = d;
            }
        }
        if (best >= 0) {
            used[static_cast<std::size_t>(best)] = true;
            out.push_back({p, best, best_d});
        }
    }
    return out;
}

/// AP by enumerating every score cutoff: for each prefix of the pooled
/// score-ordered prediction list, re-match every scene from scratch, record
/// (recall, precision), then integrate max-precision-at-recall over the G
/// recall steps.
inline double ap_by_cutoffs(const std::vector<std::vector<eqdet::OrientedBox>>& preds_per_scene,
                            const std::vector<std::vector<eqdet::OrientedBox>>& gts_per_scene, double threshold) {
    struct Ref {
        double score;
        int scene;
        int idx;
    };
    std::vector<Ref> pool;
    int n_gt = 0;
    for (int s = 0; s < static_cast<int>(preds_per_scene.size()); ++s) {
        for (int i = 0; i < static_cast<int>(preds_per_scene[static_cast<std::size_t>(s)].size()); ++i)
            pool.push_back({preds_per_scene[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)].score, s, i});
        n_gt += static_cast<int>(gts_per_scene[static_cast<std::size_t>(s)].size());
    }
    if (n_gt == 0) return 0.0;
    std::stable_sort(pool.begin(), pool.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

    std::vector<double> precision, recall;
    for (std::size_t cut = 1; cut <= pool.size(); ++cut) {
        std::vector<std::vector<eqdet::OrientedBox>> kept(preds_per_scene.size());
        for (std::size_t i = 0; i < cut; ++i)
            kept[static_cast<std::size_t>(pool[i].scene)].push_back(
                preds_per_scene[static_cast<std::size_t>(pool[i].scene)][static_cast<std::size_t>(pool[i].idx)]);
        int tp = 0;
        for (std::size_t s = 0; s < kept.size(); ++s)
            tp += static_cast<int>(greedy_match(kept[s], gts_per_scene[s], threshold).size());
        precision.push_back(static_cast<double>(tp) / static_cast<double>(cut));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }

    double ap = 0.0;
    for (int k = 1; k <= n_gt; ++k) {
        const double want = static_cast<double>(k) / static_cast<double>(n_gt);
        double best = 0.0;
        for (std::size_t j = 0; j < recall.size(); ++j)
            if (recall[j] >= want - 1e-12) best = std::max(best, precision[j]);
        ap += best / static_cast<double>(n_gt);
    }
    return ap;
}

inline double wrap_diff(double a, double b) {
    double best = 1e300;
    for (int k = -3; k <= 3; ++k) best = std::min(best, std::fabs(a - b + 2.0 * M_PI * k));
    return best;
}

struct TpOracle {
    double ate = 1.0;
    double ase = 1.0;
    double aoe = 1.0;
    bool empty = true;
};

inline TpOracle tp_by_formula(const std::vector<Match>& matches, const std::vector<eqdet::OrientedBox>& preds,
                              const std::vector<eqdet::OrientedBox>& gts) {
    TpOracle out;
    if (matches.empty()) return out;
    out.empty = false;
    double ate = 0.0, ase = 0.0, aoe = 0.0;
    for (const Match& m : matches) {
        const auto& p = preds[static_cast<std::size_t>(m.pred)];
        const auto& g = gts[static_cast<std::size_t>(m.gt)];
        ate += std::hypot(p.x - g.x, p.y - g.y);
        const double sim = (std::min(p.w, g.w) / std::max(p.w, g.w)) * (std::min(p.l, g.l) / std::max(p.l, g.l)) *
                           (std::min(p.h, g.h) / std::max(p.h, g.h));
        ase += 1.0 - sim;
        aoe += wrap_diff(p.yaw, g.yaw);
    }
    const double n = static_cast<double>(matches.size());
    out.ate = ate / n;
    out.ase = ase / n;
    out.aoe = aoe / n;
    return out;
}

inline double nds_formula(double map, const std::vector<double>& tps) {
    double s = 5.0 * map;
    for (const double t : tps) s += 1.0 - std::min(1.0, t);
    return s / (5.0 + static_cast<double>(tps.size()));
}

}  // namespace oracle
