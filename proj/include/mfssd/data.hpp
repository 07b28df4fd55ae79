#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mfssd/detector.hpp"
#include "mfssd/tensor.hpp"

namespace mfssd {

/// Synthetic detection corpus: colored circles (class 1), squares (2) and
/// triangles (3) with exact integer-pixel bounding boxes over a noisy dark
/// background.
struct DatasetSpec {
  int count = 2000;
  int image_size = 96;
  int classes = 3;              // 1..3 shape classes
  double small_fraction = 0.5;  // share of objects below the 32x32-px area cutoff
  int min_objects = 1;
  int max_objects = 4;
  std::uint64_t seed = 0;
};

/// Writes manifest.json plus images.bin ("MFSSDIMG", u32 count, u32
/// bytes-per-image, then planar RGB u8 blocks). Annotations live in the
/// manifest in absolute pixel coordinates with exclusive max edges, each with
/// its exact bounding-box pixel area and a per-image CRC32 of the raw bytes.
void generate_dataset(const DatasetSpec& spec, const std::string& dir);

struct Dataset {
  int image_size = 0;
  int classes = 0;
  std::vector<Tensor> images;                        // [3,H,W] float in [0,1]
  std::vector<std::vector<Annotation>> annotations;  // boxes normalized to [0,1]
  std::vector<std::vector<std::int64_t>> bbox_areas; // exact pixel areas
};

/// Fail-fast loader: checksum or structural mismatches raise DataError naming
/// the offending file or image.
Dataset load_dataset(const std::string& dir);

}  // namespace mfssd
