#include "eqdet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace eqdet {

namespace {

double bev_distance(const OrientedBox& a, const OrientedBox& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

std::vector<int> score_order(const std::vector<OrientedBox>& preds) {
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&preds](int a, int b) {
        if (preds[static_cast<std::size_t>(a)].score != preds[static_cast<std::size_t>(b)].score)
            return preds[static_cast<std::size_t>(a)].score > preds[static_cast<std::size_t>(b)].score;
        return a < b;
    });
    return order;
}

/// AP from an ordered TP/FP sequence: area under the interpolated
/// precision-recall curve, all recall points.
double interpolated_auc(const std::vector<char>& is_tp, int n_gt) {
    const std::size_t p_n = is_tp.size();
    if (p_n == 0 || n_gt == 0) return 0.0;
    std::vector<double> prec(p_n), rec(p_n);
    int tp = 0;
    for (std::size_t i = 0; i < p_n; ++i) {
        if (is_tp[i]) ++tp;
        prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        rec[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    double best = 0.0;
    std::vector<double> ip(p_n);
    for (std::size_t i = p_n; i-- > 0;) {
        best = std::max(best, prec[i]);
        ip[i] = best;
    }
    double ap = 0.0, prev = 0.0;
    for (std::size_t i = 0; i < p_n; ++i) {
        if (rec[i] > prev) {
            ap += (rec[i] - prev) * ip[i];
            prev = rec[i];
        }
    }
    return ap;
}

}  // namespace

MatchResult match_detections(const std::vector<OrientedBox>& preds, const std::vector<OrientedBox>& gts,
                             double threshold_m) {
    if (threshold_m < 0.0) throw std::invalid_argument("match_detections: negative threshold");
    MatchResult result;
    std::vector<char> taken(gts.size(), 0);
    for (int pi : score_order(preds)) {
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
            if (taken[gi]) continue;
            const double d = bev_distance(preds[static_cast<std::size_t>(pi)], gts[gi]);
            if (d <= threshold_m && d < best_d) {
                best_d = d;
                best = static_cast<int>(gi);
            }
        }
        if (best >= 0) {
            taken[static_cast<std::size_t>(best)] = 1;
            result.pairs.push_back({pi, best, best_d});
        } else {
            result.unmatched_preds.push_back(pi);
        }
    }
    for (std::size_t gi = 0; gi < gts.size(); ++gi)
        if (!taken[gi]) result.unmatched_gts.push_back(static_cast<int>(gi));
    return result;
}

std::optional<double> average_precision(const std::vector<OrientedBox>& preds, const std::vector<OrientedBox>& gts,
                                        double threshold_m) {
    if (gts.empty()) return std::nullopt;
    const MatchResult m = match_detections(preds, gts, threshold_m);
    std::vector<char> matched(preds.size(), 0);
    for (const MatchResult::Pair& p : m.pairs) matched[static_cast<std::size_t>(p.pred)] = 1;
    std::vector<char> in_order;
    in_order.reserve(preds.size());
    for (int pi : score_order(preds)) in_order.push_back(matched[static_cast<std::size_t>(pi)]);
    return interpolated_auc(in_order, static_cast<int>(gts.size()));
}

double orientation_error(double pred_yaw, double gt_yaw) {
    return std::abs(wrap_angle(pred_yaw - gt_yaw));
}

TpMetrics tp_metrics(const MatchResult& matches, const std::vector<OrientedBox>& preds,
                     const std::vector<OrientedBox>& gts) {
    TpMetrics out;
    if (matches.pairs.empty()) {
        out.ate = out.ase = out.aoe = 1.0;
        out.no_matches = true;
        return out;
    }
    double ate = 0.0, ase = 0.0, aoe = 0.0;
    for (const MatchResult::Pair& p : matches.pairs) {
        const OrientedBox& a = preds.at(static_cast<std::size_t>(p.pred));
        const OrientedBox& b = gts.at(static_cast<std::size_t>(p.gt));
        ate += p.distance;
        double sim = 1.0;
        const double ps[3] = {a.w, a.l, a.h};
        const double gs[3] = {b.w, b.l, b.h};
        for (int d = 0; d < 3; ++d) sim *= std::min(ps[d], gs[d]) / std::max(ps[d], gs[d]);
        ase += 1.0 - sim;
        aoe += orientation_error(a.yaw, b.yaw);
    }
    const double n = static_cast<double>(matches.pairs.size());
    out.ate = ate / n;
    out.ase = ase / n;
    out.aoe = aoe / n;
    return out;
}

double nds(double mean_ap, const std::vector<double>& mean_tps) {
    if (mean_ap < 0.0 || mean_ap > 1.0) throw std::invalid_argument("nds: mean AP must lie in [0,1]");
    double s = 0.0;
    for (double t : mean_tps) {
        if (t < 0.0) throw std::invalid_argument("nds: TP errors must be non-negative");
        s += 1.0 - std::min(1.0, t);
    }
    return (5.0 * mean_ap + s) / (5.0 + static_cast<double>(mean_tps.size()));
}

EvalReport evaluate(const std::vector<std::vector<OrientedBox>>& preds_per_scene,
                    const std::vector<std::vector<OrientedBox>>& gts_per_scene, int n_classes,
                    const EvalOptions& options) {
    if (preds_per_scene.size() != gts_per_scene.size())
        throw std::invalid_argument("evaluate: prediction and ground-truth scene counts differ");
    if (n_classes < 1) throw std::invalid_argument("evaluate: need at least one class");
    if (options.ap_thresholds.empty()) throw std::invalid_argument("evaluate: need at least one AP threshold");

    const std::size_t s_n = preds_per_scene.size();
    EvalReport report;
    report.options = options;
    report.n_scenes = static_cast<int>(s_n);
    for (const auto& v : preds_per_scene) report.n_predictions += static_cast<int>(v.size());
    for (const auto& v : gts_per_scene) report.n_ground_truth += static_cast<int>(v.size());

    for (int cls = 0; cls < n_classes; ++cls) {
        std::vector<std::vector<OrientedBox>> cp(s_n), cg(s_n);
        int n_gt = 0;
        for (std::size_t s = 0; s < s_n; ++s) {
            for (const OrientedBox& b : preds_per_scene[s])
                if (b.class_id == cls) cp[s].push_back(b);
            for (const OrientedBox& b : gts_per_scene[s])
                if (b.class_id == cls) cg[s].push_back(b);
            n_gt += static_cast<int>(cg[s].size());
        }
        if (n_gt == 0) continue;

        ClassEval ce;
        ce.class_id = cls;
        ce.n_gt = n_gt;

        struct Entry {
            double score;
            int scene, idx;
            char tp;
        };
        for (double tau : options.ap_thresholds) {
            std::vector<Entry> pool;
            for (std::size_t s = 0; s < s_n; ++s) {
                const MatchResult m = match_detections(cp[s], cg[s], tau);
                std::vector<char> matched(cp[s].size(), 0);
                for (const MatchResult::Pair& p : m.pairs) matched[static_cast<std::size_t>(p.pred)] = 1;
                for (std::size_t i = 0; i < cp[s].size(); ++i)
                    pool.push_back({cp[s][i].score, static_cast<int>(s), static_cast<int>(i), matched[i]});
            }
            std::sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
                if (a.score != b.score) return a.score > b.score;
                if (a.scene != b.scene) return a.scene < b.scene;
                return a.idx < b.idx;
            });
            std::vector<char> in_order;
            in_order.reserve(pool.size());
            for (const Entry& e : pool) in_order.push_back(e.tp);
            ce.ap.push_back(interpolated_auc(in_order, n_gt));
        }
        ce.mean_ap = std::accumulate(ce.ap.begin(), ce.ap.end(), 0.0) / static_cast<double>(ce.ap.size());

        std::vector<OrientedBox> mp, mg;
        MatchResult pooled;
        for (std::size_t s = 0; s < s_n; ++s) {
            const MatchResult m = match_detections(cp[s], cg[s], options.tp_threshold);
            for (const MatchResult::Pair& p : m.pairs) {
                const int at = static_cast<int>(mp.size());
                mp.push_back(cp[s][static_cast<std::size_t>(p.pred)]);
                mg.push_back(cg[s][static_cast<std::size_t>(p.gt)]);
                pooled.pairs.push_back({at, at, p.distance});
            }
        }
        ce.tp = tp_metrics(pooled, mp, mg);
        report.classes.push_back(std::move(ce));
    }

    if (!report.classes.empty()) {
        double map = 0.0, ate = 0.0, ase = 0.0, aoe = 0.0;
        for (const ClassEval& ce : report.classes) {
            map += ce.mean_ap;
            ate += ce.tp.ate;
            ase += ce.tp.ase;
            aoe += ce.tp.aoe;
        }
        const double n = static_cast<double>(report.classes.size());
        report.mean_ap = map / n;
        report.mean_ate = ate / n;
        report.mean_ase = ase / n;
        report.mean_aoe = aoe / n;
    }

    std::vector<double> tps{report.mean_ate, report.mean_ase, report.mean_aoe};
    if (options.five_term_nds) {
        tps.push_back(1.0);
        tps.push_back(1.0);
    }
    report.nds = nds(report.mean_ap, tps);
    return report;
}

}  // namespace eqdet
