#pragma once

#include <string>
#include <vector>

#include "mfssd/graph.hpp"
#include "mfssd/priors.hpp"

namespace mfssd {

/// Axis-aligned box in normalized corners, xmin < xmax and ymin < ymax.
struct Box {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
};

struct Annotation {
  int cls = 0;  // 1..num_classes; 0 is reserved for background
  Box box;
};

struct Detection {
  int cls = 0;
  double score = 0;
  Box box;
};

/// Channel widths of the three 1x1 fusion projections, fixed at 2:1:1.
struct FusionSpec {
  int u_a = 64;
  int u_b = 32;
  int u_c = 32;
};

struct DetectorConfig {
  int image_size = 96;
  int classes = 3;  // foreground classes; background is class 0

  // Backbone stage widths: stage A at full resolution, B at /2, C at /4,
  // D keeps C's resolution (the widest-context source).
  int width_a = 8;
  int width_b = 16;
  int width_c = 32;
  int width_d = 32;

  FusionSpec fusion;

  // One entry per detection level; level 0 sits at the fused resolution and
  // each later level halves it.
  std::vector<int> pyramid_widths = {32, 32, 32, 32};
  std::vector<int> prior_counts = {6, 4, 4, 4};
  double s_min = 0.1;
  double s_max = 0.7;
};

/// The built network plus everything inference and training need to interpret
/// its outputs: head order, per-level geometry, and the anchor set.
struct Detector {
  GraphSpec graph;
  DetectorConfig config;
  PriorConfig prior_config;
  std::vector<PriorBox> priors;
  std::vector<std::string> loc_heads;   // level order; graph.outputs pairs them
  std::vector<std::string> conf_heads;
};

/// Appends a fusion block to the graph: 1x1 conv-BN-ReLU projections of the
/// three sources (b and c bilinearly upsampled to a's resolution), channel
/// concat in a|b|c order, then a BatchNorm. Returns the fused node's name.
/// Rejects specs violating the 2:1:1 projection ratio.
std::string add_fusion_block(GraphSpec& g, const FusionSpec& f, const std::string& a,
                             const std::string& b, const std::string& c, int target_h,
                             int target_w, const std::string& prefix = "fuse");

Detector build_mfssd(const DetectorConfig& cfg);

}  // namespace mfssd
