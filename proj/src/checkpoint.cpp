#include "mfssd/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "io_internal.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace mfssd {

namespace {

constexpr int kFormatVersion = 1;

struct NamedTensor {
  std::string name;
  const Tensor* t;
};

// Flat tensor list in the canonical order: graph nodes as declared, conv
// weights before biases, batchnorm factors before their running statistics.
std::vector<NamedTensor> enumerate(const GraphSpec& g, const ParamStore& ps) {
  std::vector<NamedTensor> out;
  for (const auto& node : g.nodes) {
    if (is_conv_kind(node.kind)) {
      const ConvParams& cp = ps.conv.at(node.name);
      out.push_back({node.name + ".w", &cp.weight});
      out.push_back({node.name + ".b", &cp.bias});
    } else if (node.kind == NodeKind::batchnorm) {
      const BnParams& bp = ps.bn.at(node.name);
      out.push_back({node.name + ".gamma", &bp.gamma});
      out.push_back({node.name + ".beta", &bp.beta});
      out.push_back({node.name + ".running_mean", &bp.running_mean});
      out.push_back({node.name + ".running_var", &bp.running_var});
    }
  }
  return out;
}

const void* raw_ptr(const Tensor& t) {
  return t.dtype() == DType::f32 ? static_cast<const void*>(t.data<float>().data())
                                 : static_cast<const void*>(t.data<double>().data());
}

void* raw_ptr(Tensor& t) {
  return t.dtype() == DType::f32 ? static_cast<void*>(t.data<float>().data())
                                 : static_cast<void*>(t.data<double>().data());
}

}  // namespace

void save_checkpoint(const std::string& dir, const GraphSpec& g, const ParamStore& ps,
                     const Shape& input_shape, const nlohmann::json& config) {
  fs::create_directories(dir);

  ordered_json nodes = ordered_json::array();
  for (const auto& n : g.nodes)
    nodes.push_back({{"name", n.name},
                     {"kind", node_kind_name(n.kind)},
                     {"inputs", n.inputs},
                     {"cout", n.cout},
                     {"k", n.k},
                     {"stride", n.stride},
                     {"pad", n.pad},
                     {"out_h", n.out_h},
                     {"out_w", n.out_w}});

  std::string blob;
  ordered_json tensors = ordered_json::array();
  for (const NamedTensor& nt : enumerate(g, ps)) {
    const std::size_t bytes = static_cast<std::size_t>(nt.t->numel()) * dtype_size(nt.t->dtype());
    tensors.push_back({{"name", nt.name},
                       {"dtype", dtype_name(nt.t->dtype())},
                       {"shape", nt.t->shape()},
                       {"offset", blob.size()},
                       {"bytes", bytes},
                       {"crc32", io::crc_of(raw_ptr(*nt.t), bytes)}});
    blob.append(static_cast<const char*>(raw_ptr(*nt.t)), bytes);
  }

  ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["input_shape"] = input_shape;
  manifest["config"] = config;
  manifest["graph"] = {{"nodes", std::move(nodes)}, {"outputs", g.outputs}};
  manifest["tensors"] = std::move(tensors);

  io::atomic_write(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
  io::atomic_write(fs::path(dir) / "weights.bin", blob);
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  const fs::path wpath = fs::path(dir) / "weights.bin";
  std::ifstream mf(mpath);
  if (!mf) throw DataError(mpath.string() + ": cannot open");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }

  Checkpoint ck;
  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion)
      throw DataError(mpath.string() + ": unsupported format version");
    ck.input_shape = manifest.at("input_shape").get<Shape>();
    ck.config = manifest.at("config");

    for (const json& jn : manifest.at("graph").at("nodes")) {
      GraphNode n;
      n.name = jn.at("name").get<std::string>();
      n.kind = node_kind_from_name(jn.at("kind").get<std::string>());
      n.inputs = jn.at("inputs").get<std::vector<std::string>>();
      n.cout = jn.at("cout").get<int>();
      n.k = jn.at("k").get<int>();
      n.stride = jn.at("stride").get<int>();
      n.pad = jn.at("pad").get<int>();
      n.out_h = jn.at("out_h").get<int>();
      n.out_w = jn.at("out_w").get<int>();
      ck.graph.nodes.push_back(std::move(n));
    }
    ck.graph.outputs = manifest.at("graph").at("outputs").get<std::vector<std::string>>();
    graph_shapes(ck.graph, ck.input_shape);  // topology sanity before any weights

    std::ifstream wf(wpath, std::ios::binary);
    if (!wf) throw DataError(wpath.string() + ": cannot open");
    std::string blob((std::istreambuf_iterator<char>(wf)), std::istreambuf_iterator<char>());

    const auto& jtensors = manifest.at("tensors");
    std::map<std::string, Tensor> loaded;
    std::vector<std::string> order;
    std::size_t consumed = 0;
    for (const json& jt : jtensors) {
      const std::string name = jt.at("name").get<std::string>();
      const Shape shape = jt.at("shape").get<Shape>();
      const DType dt = dtype_from_name(jt.at("dtype").get<std::string>());
      const std::size_t offset = jt.at("offset").get<std::size_t>();
      const std::size_t bytes = jt.at("bytes").get<std::size_t>();
      if (offset != consumed || offset + bytes > blob.size())
        throw DataError(wpath.string() + ": bad extent for tensor " + name);
      Tensor t = Tensor::zeros(shape, dt);
      if (bytes != static_cast<std::size_t>(t.numel()) * dtype_size(dt))
        throw DataError(mpath.string() + ": byte count disagrees with shape for " + name);
      if (io::crc_of(blob.data() + offset, bytes) != jt.at("crc32").get<std::uint32_t>())
        throw DataError(wpath.string() + ": checksum mismatch for tensor " + name);
      std::memcpy(raw_ptr(t), blob.data() + offset, bytes);
      consumed += bytes;
      loaded.emplace(name, std::move(t));
      order.push_back(name);
    }
    if (consumed != blob.size()) throw DataError(wpath.string() + ": trailing bytes");

    // The stored order must be exactly the canonical enumeration.
    std::vector<std::string> expected;
    for (const auto& node : ck.graph.nodes) {
      if (is_conv_kind(node.kind)) {
        expected.push_back(node.name + ".w");
        expected.push_back(node.name + ".b");
      } else if (node.kind == NodeKind::batchnorm) {
        for (const char* sfx : {".gamma", ".beta", ".running_mean", ".running_var"})
          expected.push_back(node.name + sfx);
      }
    }
    if (order != expected)
      throw DataError(mpath.string() + ": tensor table does not match the graph");

    for (const auto& node : ck.graph.nodes) {
      if (is_conv_kind(node.kind)) {
        ConvParams cp;
        cp.weight = loaded.at(node.name + ".w");
        cp.bias = loaded.at(node.name + ".b");
        cp.stride = node.stride;
        cp.pad = node.pad;
        ck.params.conv.emplace(node.name, std::move(cp));
      } else if (node.kind == NodeKind::batchnorm) {
        BnParams bp;
        bp.gamma = loaded.at(node.name + ".gamma");
        bp.beta = loaded.at(node.name + ".beta");
        bp.running_mean = loaded.at(node.name + ".running_mean");
        bp.running_var = loaded.at(node.name + ".running_var");
        ck.params.bn.emplace(node.name, std::move(bp));
      }
    }
    check_params(ck.graph, ck.params, ck.input_shape);
  } catch (const json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace mfssd
