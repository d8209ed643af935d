#pragma once

#include <optional>
#include <vector>

#include "eqdet/head.hpp"

namespace eqdet {

struct MatchResult {
    struct Pair {
        int pred = -1;
        int gt = -1;
        double distance = 0.0;
    };
    std::vector<Pair> pairs;
    std::vector<int> unmatched_preds;
    std::vector<int> unmatched_gts;
};

/// Greedy matching for one class: predictions in descending score order,
/// each taking the nearest still-unmatched ground truth within the BEV
/// distance threshold. Score ties break by index, distance ties by ground
/// truth index.
MatchResult match_detections(const std::vector<OrientedBox>& preds, const std::vector<OrientedBox>& gts,
                             double threshold_m);

/// Area under the interpolated precision-recall curve of the greedy
/// matching, over recall in [0,1]. Empty ground truth leaves the AP
/// undefined.
std::optional<double> average_precision(const std::vector<OrientedBox>& preds, const std::vector<OrientedBox>& gts,
                                        double threshold_m);

/// Smallest absolute angular difference, in [0, pi].
double orientation_error(double pred_yaw, double gt_yaw);

struct TpMetrics {
    double ate = 0.0;  // mean BEV center distance, meters
    double ase = 0.0;  // mean (1 - volumetric similarity)
    double aoe = 0.0;  // mean orientation error, radians
    bool no_matches = false;
};

/// Mean true-positive errors over the matched pairs. With no matches every
/// metric is pinned at the worst value 1.0 and flagged.
TpMetrics tp_metrics(const MatchResult& matches, const std::vector<OrientedBox>& preds,
                     const std::vector<OrientedBox>& gts);

/// Composite score (5 * mAP + sum(1 - min(1, mTP))) / (5 + n). The standard
/// five-term variant is the same formula with n = 5.
double nds(double mean_ap, const std::vector<double>& mean_tps);

struct ClassEval {
    int class_id = 0;
    int n_gt = 0;
    std::vector<double> ap;  // aligned with EvalOptions::ap_thresholds
    double mean_ap = 0.0;
    TpMetrics tp;
};

struct EvalOptions {
    std::vector<double> ap_thresholds{0.5, 1.0, 2.0, 4.0};
    double tp_threshold = 2.0;
    /// Pad the TP set to the standard five terms, pinning the two terms this
    /// pipeline does not produce at the worst value.
    bool five_term_nds = false;
};

struct EvalReport {
    EvalOptions options;
    std::vector<ClassEval> classes;  // only classes with ground truth
    int n_scenes = 0;
    int n_predictions = 0;
    int n_ground_truth = 0;
    double mean_ap = 0.0;
    double mean_ate = 1.0;
    double mean_ase = 1.0;
    double mean_aoe = 1.0;
    double nds = 0.0;
};

/// Full evaluation over a set of scenes. Matching never crosses scene
/// boundaries; the precision-recall curve pools predictions of one class
/// across scenes by descending score.
EvalReport evaluate(const std::vector<std::vector<OrientedBox>>& preds_per_scene,
                    const std::vector<std::vector<OrientedBox>>& gts_per_scene, int n_classes,
                    const EvalOptions& options = {});

}  // namespace eqdet
