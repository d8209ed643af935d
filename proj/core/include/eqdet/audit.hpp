#pragma once

#include <string>
#include <vector>

#include "eqdet/metrics.hpp"
#include "eqdet/model.hpp"

namespace eqdet {

double max_abs_diff(const GridTensor& a, const GridTensor& b);

struct LayerResidual {
    std::string name;
    int rotation = 0;  // quarter turns, 1..3
    double residual = 0.0;
};

struct BoxSetDiff {
    bool count_match = true;
    double center = 0.0;  // worst matched center distance, meters
    double yaw = 0.0;     // worst orientation error, radians
    double score = 0.0;   // worst score difference
    int unmatched = 0;
};

/// Pair boxes of equal class greedily by center distance and report the
/// worst residuals.
BoxSetDiff compare_box_sets(const std::vector<OrientedBox>& a, const std::vector<OrientedBox>& b);

/// Map boxes through r counter-clockwise quarter turns about the grid center.
std::vector<OrientedBox> rotate_boxes_quarter(const std::vector<OrientedBox>& boxes, int r, const GridConfig& cfg);

/// Expected transforms of head output maps under r quarter turns: positions
/// move with the grid, vector channels rotate as world vectors.
GridTensor expected_rotated_offset(const GridTensor& offset, int r);
GridTensor expected_rotated_yaw_vec(const GridTensor& yaw_vec, int r);

struct AuditReport {
    std::vector<LayerResidual> layers;
    std::vector<BoxSetDiff> end_to_end;  // indices 0..2 for r = 1..3
    double tolerance = 1e-5;
    double worst_layer_residual = 0.0;
    bool pass = true;
};

/// Commuting-diagram residuals for every stage of the pipeline under all
/// three nontrivial quarter turns, with the model's actual weights, plus an
/// end-to-end detect comparison on a generated scene. Works on the plain
/// ablation too (where the residuals are expected to be large).
AuditReport audit_model(Model& m, std::uint64_t seed, double tolerance);
std::string audit_report_text(const AuditReport& report);

struct SweepRow {
    double heading_deg = 0.0;
    double ap = 0.0;   // AP at the 2 m threshold, mean over classes
    double aoe = 0.0;  // mean orientation error at the 2 m threshold
    bool no_matches = false;
};

/// Detect every scene rotated to each heading (n_headings steps over 360
/// degrees) and evaluate against the rotated ground truth.
std::vector<SweepRow> heading_sweep(Model& m, const std::vector<Scene>& scenes, int n_headings = 36);
std::string sweep_table_text(const std::vector<SweepRow>& rows);

double aoe_std(const std::vector<SweepRow>& rows);

}  // namespace eqdet
