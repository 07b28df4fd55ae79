#include "mfssd/detector.hpp"

#include <string>

namespace mfssd {

namespace {

GraphNode make_node(std::string name, NodeKind kind, std::vector<std::string> inputs) {
  GraphNode n;
  n.name = std::move(name);
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}

// conv-BN-ReLU block; returns the ReLU node's name.
std::string add_cbr(GraphSpec& g, const std::string& prefix, const std::string& input,
                    int cout, int k, int stride, int pad) {
  GraphNode conv = make_node(prefix + "_conv", NodeKind::conv, {input});
  conv.cout = cout;
  conv.k = k;
  conv.stride = stride;
  conv.pad = pad;
  g.nodes.push_back(conv);
  g.nodes.push_back(make_node(prefix + "_bn", NodeKind::batchnorm, {prefix + "_conv"}));
  g.nodes.push_back(make_node(prefix + "_relu", NodeKind::relu, {prefix + "_bn"}));
  return prefix + "_relu";
}

std::string add_pool(GraphSpec& g, const std::string& name, const std::string& input) {
  GraphNode p = make_node(name, NodeKind::maxpool, {input});
  p.k = 2;
  p.stride = 2;
  g.nodes.push_back(p);
  return name;
}

}  // namespace

std::string add_fusion_block(GraphSpec& g, const FusionSpec& f, const std::string& a,
                             const std::string& b, const std::string& c, int target_h,
                             int target_w, const std::string& prefix) {
  if (f.u_b < 1 || f.u_b != f.u_c || f.u_a != f.u_b + f.u_c)
    throw ShapeError("fusion: projection widths " + std::to_string(f.u_a) + ":" +
                     std::to_string(f.u_b) + ":" + std::to_string(f.u_c) +
                     " violate the required 2:1:1 ratio");

  const std::string pa = add_cbr(g, prefix + "_a", a, f.u_a, 1, 1, 0);

  GraphNode up_b = make_node(prefix + "_b_up", NodeKind::upsample, {b});
  up_b.out_h = target_h;
  up_b.out_w = target_w;
  g.nodes.push_back(up_b);
  const std::string pb = add_cbr(g, prefix + "_b", prefix + "_b_up", f.u_b, 1, 1, 0);

  GraphNode up_c = make_node(prefix + "_c_up", NodeKind::upsample, {c});
  up_c.out_h = target_h;
  up_c.out_w = target_w;
  g.nodes.push_back(up_c);
  const std::string pc = add_cbr(g, prefix + "_c", prefix + "_c_up", f.u_c, 1, 1, 0);

  g.nodes.push_back(make_node(prefix + "_cat", NodeKind::concat, {pa, pb, pc}));
  g.nodes.push_back(make_node(prefix + "_bn", NodeKind::batchnorm, {prefix + "_cat"}));
  return prefix + "_bn";
}

Detector build_mfssd(const DetectorConfig& cfg) {
  const std::size_t levels = cfg.pyramid_widths.size();
  if (cfg.classes < 1) throw ShapeError("detector: needs at least one foreground class");
  if (levels < 1 || cfg.prior_counts.size() != levels)
    throw ShapeError("detector: pyramid_widths and prior_counts must be non-empty and "
                     "equal-length");
  if (cfg.image_size < 4 || cfg.image_size % 4 != 0)
    throw ShapeError("detector: image size must be a positive multiple of 4");
  const int fused_side = cfg.image_size / 4;
  if (fused_side % (1 << (levels - 1)) != 0)
    throw ShapeError("detector: fused map side " + std::to_string(fused_side) +
                     " cannot be halved " + std::to_string(levels - 1) + " times");
  for (int w : {cfg.width_a, cfg.width_b, cfg.width_c, cfg.width_d})
    if (w < 1) throw ShapeError("detector: stage widths must be positive");

  Detector det;
  det.config = cfg;
  GraphSpec& g = det.graph;

  // Backbone. Stages A..C are conv-BN-ReLU pairs followed by 2x2 pooling;
  // stage D is the wide-context tail at the /4 resolution.
  std::string x = add_cbr(g, "a1", "input", cfg.width_a, 3, 1, 1);
  x = add_cbr(g, "a2", x, cfg.width_a, 3, 1, 1);
  x = add_pool(g, "a_pool", x);
  x = add_cbr(g, "b1", x, cfg.width_b, 3, 1, 1);
  x = add_cbr(g, "b2", x, cfg.width_b, 3, 1, 1);
  const std::string source_a = add_pool(g, "b_pool", x);
  x = add_cbr(g, "c1", source_a, cfg.width_c, 3, 1, 1);
  x = add_cbr(g, "c2", x, cfg.width_c, 3, 1, 1);
  const std::string source_b = add_pool(g, "c_pool", x);
  const std::string source_c = add_cbr(g, "d", source_b, cfg.width_d, 3, 1, 1);

  const std::string fused =
      add_fusion_block(g, cfg.fusion, source_a, source_b, source_c, fused_side, fused_side);

  // Detection pyramid: a 1x1 transition at the fused resolution, then
  // pool-plus-3x3 blocks halving the map at each further level.
  std::vector<std::string> level_nodes;
  x = add_cbr(g, "p0", fused, cfg.pyramid_widths[0], 1, 1, 0);
  level_nodes.push_back(x);
  for (std::size_t i = 1; i < levels; ++i) {
    const std::string pooled = add_pool(g, "p" + std::to_string(i) + "_pool", x);
    x = add_cbr(g, "p" + std::to_string(i), pooled, cfg.pyramid_widths[i], 3, 1, 1);
    level_nodes.push_back(x);
  }

  for (std::size_t i = 0; i < levels; ++i) {
    const int n = cfg.prior_counts[i];
    GraphNode loc = make_node("loc" + std::to_string(i), NodeKind::head_loc, {level_nodes[i]});
    loc.cout = n * 4;
    loc.k = 3;
    loc.stride = 1;
    loc.pad = 1;
    g.nodes.push_back(loc);
    GraphNode conf =
        make_node("conf" + std::to_string(i), NodeKind::head_conf, {level_nodes[i]});
    conf.cout = n * (cfg.classes + 1);
    conf.k = 3;
    conf.stride = 1;
    conf.pad = 1;
    g.nodes.push_back(conf);
    det.loc_heads.push_back(loc.name);
    det.conf_heads.push_back(conf.name);
  }
  for (const auto& n : det.loc_heads) g.outputs.push_back(n);
  for (const auto& n : det.conf_heads) g.outputs.push_back(n);

  const auto shapes = graph_shapes(g, Shape{1, 3, cfg.image_size, cfg.image_size});
  det.prior_config.s_min = cfg.s_min;
  det.prior_config.s_max = cfg.s_max;
  for (std::size_t i = 0; i < levels; ++i) {
    det.prior_config.fmaps.push_back(shapes.at(level_nodes[i])[3]);
    det.prior_config.counts.push_back(cfg.prior_counts[i]);
  }
  det.priors = generate_priors(det.prior_config);
  return det;
}

}  // namespace mfssd
