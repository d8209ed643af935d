#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "eqdet/metrics.hpp"
#include "eqdet/scene.hpp"
#include "eqdet/tensor.hpp"

namespace eqdet {

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

/// One `x y z intensity` line per point, `#` comments ignored, no header.
/// The writer emits 9 significant digits.
void save_cloud(const std::string& path, const PointCloud& cloud);
PointCloud load_cloud(const std::string& path);

/// JSON array of {x,y,z,w,l,h,yaw,class_id,score}, six fractional digits,
/// sorted by descending score with (x, y) tie-breaks.
std::string boxes_to_json(std::vector<OrientedBox> boxes);
void save_boxes(const std::string& path, std::vector<OrientedBox> boxes);
std::vector<OrientedBox> load_boxes(const std::string& path);

/// Checkpoint: text manifest of (name, shape, byte offset) per tensor, a
/// `data` separator, then one little-endian float32 blob. Saving what was
/// loaded reproduces the file byte for byte.
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, GridTensor*>>& state);
void load_checkpoint(const std::string& path, const std::vector<std::pair<std::string, GridTensor*>>& state);

/// Flat `key = value` with `[section]` headers; keys are stored as
/// `section.key`. Duplicate keys are rejected.
using ConfigMap = std::map<std::string, std::string>;
ConfigMap parse_config_text(const std::string& text);
ConfigMap parse_config_file(const std::string& path);
std::string dump_config(const ConfigMap& config);

std::string eval_report_json(const EvalReport& report);
std::string eval_report_table(const EvalReport& report);

/// Binary PGM (P5, 8-bit) of a [Y, X] plane; values mapped linearly from
/// [lo, hi] and clamped.
void save_pgm(const std::string& path, const GridTensor& plane, double lo = 0.0, double hi = 1.0);

/// BEV scatter of the cloud with ground-truth and predicted boxes drawn as
/// outlined polygons with heading ticks.
std::string scene_svg(const PointCloud& cloud, const std::vector<OrientedBox>& gt,
                      const std::vector<OrientedBox>& dets, const GridConfig& cfg);

}  // namespace eqdet
