#pragma once

#include <string>

#include "json.hpp"
#include "mfssd/graph.hpp"

namespace mfssd {

struct Checkpoint {
  GraphSpec graph;
  ParamStore params;
  Shape input_shape;
  nlohmann::json config;  // tool configuration echoed verbatim at save time
};

/// Writes manifest.json (format version, input shape, config echo, graph
/// topology, and a per-tensor table of name/dtype/shape/offset/crc32) plus
/// weights.bin holding the raw little-endian tensor bytes in manifest order.
/// Tensors enumerate in graph-node order: conv nodes contribute .w and .b,
/// batchnorms .gamma, .beta, .running_mean, .running_var. Both files are
/// written atomically; saving a just-loaded checkpoint reproduces both
/// byte for byte.
void save_checkpoint(const std::string& dir, const GraphSpec& g, const ParamStore& ps,
                     const Shape& input_shape, const nlohmann::json& config);

/// Validates checksums, topology and parameter shapes; DataError names the
/// offending tensor or file.
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace mfssd
