#include "mfssd/graph.hpp"

#include <set>

namespace mfssd {

const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::conv: return "conv";
    case NodeKind::batchnorm: return "batchnorm";
    case NodeKind::relu: return "relu";
    case NodeKind::maxpool: return "maxpool";
    case NodeKind::upsample: return "upsample";
    case NodeKind::concat: return "concat";
    case NodeKind::head_loc: return "head_loc";
    case NodeKind::head_conf: return "head_conf";
  }
  throw ShapeError("unknown node kind");
}

NodeKind node_kind_from_name(const std::string& name) {
  if (name == "conv") return NodeKind::conv;
  if (name == "batchnorm") return NodeKind::batchnorm;
  if (name == "relu") return NodeKind::relu;
  if (name == "maxpool") return NodeKind::maxpool;
  if (name == "upsample") return NodeKind::upsample;
  if (name == "concat") return NodeKind::concat;
  if (name == "head_loc") return NodeKind::head_loc;
  if (name == "head_conf") return NodeKind::head_conf;
  throw DataError("unknown node kind '" + name + "'");
}

const GraphNode& GraphSpec::node(const std::string& name) const {
  for (const auto& n : nodes)
    if (n.name == name) return n;
  throw ShapeError("graph: no node named '" + name + "'");
}

bool GraphSpec::has_node(const std::string& name) const {
  for (const auto& n : nodes)
    if (n.name == name) return true;
  return false;
}

std::map<std::string, Shape> graph_shapes(const GraphSpec& g, const Shape& input_shape) {
  if (input_shape.size() != 4)
    throw ShapeError("graph: input must be rank-4 N,C,H,W, got " + shape_str(input_shape));
  std::map<std::string, Shape> shapes;
  shapes["input"] = input_shape;

  std::set<std::string> seen{"input"};
  for (const auto& n : g.nodes) {
    if (n.name.empty() || n.name == "input")
      throw ShapeError("graph: node name '" + n.name + "' is reserved or empty");
    if (!seen.insert(n.name).second)
      throw ShapeError("graph: duplicate node name '" + n.name + "'");
    const std::size_t want_inputs = n.kind == NodeKind::concat ? n.inputs.size() : 1;
    if (n.inputs.size() != want_inputs || n.inputs.empty())
      throw ShapeError("graph: node '" + n.name + "' has wrong input count");
    std::vector<Shape> in;
    for (const auto& src : n.inputs) {
      auto it = shapes.find(src);
      if (it == shapes.end())
        throw ShapeError("graph: node '" + n.name + "' references undefined producer '" + src +
                         "'");
      in.push_back(it->second);
    }

    Shape out;
    switch (n.kind) {
      case NodeKind::conv:
      case NodeKind::head_loc:
      case NodeKind::head_conf: {
        if (n.k % 2 == 0)
          throw ShapeError("graph: conv '" + n.name + "' kernel extent must be odd");
        const auto d = kernels::conv_dims(in[0], Shape{n.cout, in[0][1], n.k, n.k},
                                          Shape{n.cout}, n.stride, n.pad);
        out = Shape{d.n, d.cout, d.oh, d.ow};
        break;
      }
      case NodeKind::batchnorm:
      case NodeKind::relu:
        out = in[0];
        break;
      case NodeKind::maxpool: {
        const auto d = kernels::pool_dims(in[0], n.k, n.stride);
        out = Shape{d.n, d.c, d.oh, d.ow};
        break;
      }
      case NodeKind::upsample: {
        if (n.out_h < in[0][2] || n.out_w < in[0][3])
          throw ShapeError("graph: upsample '" + n.name + "' target smaller than source");
        out = Shape{in[0][0], in[0][1], n.out_h, n.out_w};
        break;
      }
      case NodeKind::concat: {
        int ctotal = 0;
        for (const auto& s : in) {
          if (s[0] != in[0][0] || s[2] != in[0][2] || s[3] != in[0][3])
            throw ShapeError("graph: concat '" + n.name + "' inputs disagree on batch/spatial");
          ctotal += s[1];
        }
        out = Shape{in[0][0], ctotal, in[0][2], in[0][3]};
        break;
      }
    }
    shapes[n.name] = std::move(out);
  }

  for (const auto& o : g.outputs)
    if (!shapes.count(o)) throw ShapeError("graph: output '" + o + "' is not a node");
  return shapes;
}

ParamStore init_params(const GraphSpec& g, const Shape& input_shape, std::mt19937_64& rng,
                       DType dt) {
  const auto shapes = graph_shapes(g, input_shape);
  ParamStore ps;
  for (const auto& n : g.nodes) {
    if (is_conv_kind(n.kind)) {
      const int cin = shapes.at(n.inputs[0])[1];
      ps.conv[n.name] = make_conv(cin, n.cout, n.k, n.stride, n.pad, rng, dt);
    } else if (n.kind == NodeKind::batchnorm) {
      ps.bn[n.name] = make_batchnorm(shapes.at(n.inputs[0])[1], dt);
    }
  }
  return ps;
}

void check_params(const GraphSpec& g, const ParamStore& ps, const Shape& input_shape) {
  const auto shapes = graph_shapes(g, input_shape);
  for (const auto& n : g.nodes) {
    if (is_conv_kind(n.kind)) {
      auto it = ps.conv.find(n.name);
      if (it == ps.conv.end())
        throw ShapeError("params: missing conv parameters for '" + n.name + "'");
      const int cin = shapes.at(n.inputs[0])[1];
      const Shape want{n.cout, cin, n.k, n.k};
      if (it->second.weight.shape() != want)
        throw ShapeError("params: conv '" + n.name + "' weight is " +
                         shape_str(it->second.weight.shape()) + ", expected " +
                         shape_str(want));
      if (it->second.bias.shape() != Shape{n.cout})
        throw ShapeError("params: conv '" + n.name + "' bias extent mismatch");
      if (it->second.stride != n.stride || it->second.pad != n.pad)
        throw ShapeError("params: conv '" + n.name + "' stride/pad disagree with the graph");
    } else if (n.kind == NodeKind::batchnorm) {
      auto it = ps.bn.find(n.name);
      if (it == ps.bn.end())
        throw ShapeError("params: missing batchnorm parameters for '" + n.name + "'");
      const int c = shapes.at(n.inputs[0])[1];
      for (const Tensor* t :
           {&it->second.gamma, &it->second.beta, &it->second.running_mean,
            &it->second.running_var})
        if (t->shape() != Shape{c})
          throw ShapeError("params: batchnorm '" + n.name + "' extent does not match channels " +
                           std::to_string(c));
    }
  }
}

std::int64_t count_params(const GraphSpec& g, const ParamStore& ps) {
  std::int64_t total = 0;
  for (const auto& n : g.nodes) {
    if (is_conv_kind(n.kind)) {
      const auto& p = ps.conv.at(n.name);
      total += p.weight.numel() + p.bias.numel();
    } else if (n.kind == NodeKind::batchnorm) {
      const auto& p = ps.bn.at(n.name);
      total += p.gamma.numel() + p.beta.numel();
    }
  }
  return total;
}

std::vector<Tensor> graph_forward_eval(const GraphSpec& g, const ParamStore& ps,
                                       const Tensor& input) {
  check_params(g, ps, input.shape());
  std::map<std::string, Tensor> values;
  values["input"] = input;
  for (const auto& n : g.nodes) {
    switch (n.kind) {
      case NodeKind::conv:
      case NodeKind::head_loc:
      case NodeKind::head_conf:
        values[n.name] = conv2d_eval(values.at(n.inputs[0]), ps.conv.at(n.name));
        break;
      case NodeKind::batchnorm:
        values[n.name] = batchnorm_eval(values.at(n.inputs[0]), ps.bn.at(n.name));
        break;
      case NodeKind::relu:
        values[n.name] = relu_eval(values.at(n.inputs[0]));
        break;
      case NodeKind::maxpool:
        values[n.name] = maxpool_eval(values.at(n.inputs[0]), n.k, n.stride);
        break;
      case NodeKind::upsample:
        values[n.name] = upsample_eval(values.at(n.inputs[0]), n.out_h, n.out_w);
        break;
      case NodeKind::concat: {
        std::vector<Tensor> xs;
        for (const auto& src : n.inputs) xs.push_back(values.at(src));
        values[n.name] = concat_eval(xs);
        break;
      }
    }
  }
  std::vector<Tensor> out;
  out.reserve(g.outputs.size());
  for (const auto& o : g.outputs) out.push_back(values.at(o));
  return out;
}

std::vector<Var> graph_forward_train(const GraphSpec& g, ParamStore& ps, Tape& tape, Var input,
                                     TapeBindings& binds) {
  check_params(g, ps, tape.value(input).shape());
  std::map<std::string, Var> values;
  values["input"] = input;
  for (const auto& n : g.nodes) {
    switch (n.kind) {
      case NodeKind::conv:
      case NodeKind::head_loc:
      case NodeKind::head_conf: {
        auto& p = ps.conv.at(n.name);
        Var w = tape.leaf(p.weight.astype(tape.dtype()), true);
        Var b = tape.leaf(p.bias.astype(tape.dtype()), true);
        binds.conv_w[n.name] = w;
        binds.conv_b[n.name] = b;
        values[n.name] = conv2d(values.at(n.inputs[0]), w, b, n.stride, n.pad);
        break;
      }
      case NodeKind::batchnorm: {
        auto& p = ps.bn.at(n.name);
        Var gm = tape.leaf(p.gamma.astype(tape.dtype()), true);
        Var bt = tape.leaf(p.beta.astype(tape.dtype()), true);
        binds.bn_gamma[n.name] = gm;
        binds.bn_beta[n.name] = bt;
        if (p.running_mean.dtype() != tape.dtype()) {
          p.running_mean = p.running_mean.astype(tape.dtype());
          p.running_var = p.running_var.astype(tape.dtype());
        }
        values[n.name] = batchnorm_train(values.at(n.inputs[0]), gm, bt, &p.running_mean,
                                         &p.running_var, p.eps, p.momentum);
        break;
      }
      case NodeKind::relu:
        values[n.name] = relu(values.at(n.inputs[0]));
        break;
      case NodeKind::maxpool:
        values[n.name] = maxpool2d(values.at(n.inputs[0]), n.k, n.stride);
        break;
      case NodeKind::upsample:
        values[n.name] = upsample_bilinear(values.at(n.inputs[0]), n.out_h, n.out_w);
        break;
      case NodeKind::concat: {
        std::vector<Var> xs;
        for (const auto& src : n.inputs) xs.push_back(values.at(src));
        values[n.name] = concat_channels(xs);
        break;
      }
    }
  }
  std::vector<Var> out;
  out.reserve(g.outputs.size());
  for (const auto& o : g.outputs) out.push_back(values.at(o));
  return out;
}

}  // namespace mfssd
