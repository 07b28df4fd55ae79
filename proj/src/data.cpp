#include "mfssd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "io_internal.hpp"
#include "json.hpp"
#include "mfssd/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace mfssd {

namespace {

constexpr char kMagic[8] = {'M', 'F', 'S', 'S', 'D', 'I', 'M', 'G'};
constexpr int kFormatVersion = 1;

struct PixelBox {
  int xmin, ymin, xmax, ymax;  // max edges exclusive
  std::int64_t area() const { return std::int64_t(xmax - xmin) * (ymax - ymin); }
};

double pixel_iou(const PixelBox& a, const PixelBox& b) {
  const int ix = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const int iy = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (ix <= 0 || iy <= 0) return 0;
  const double inter = double(ix) * iy;
  return inter / (double(a.area()) + double(b.area()) - inter);
}

struct Placed {
  int cls;
  PixelBox box;
};

}  // namespace

void generate_dataset(const DatasetSpec& spec, const std::string& dir) {
  if (spec.count < 1) throw ShapeError("gen-data: count must be positive");
  if (spec.image_size < 48) throw ShapeError("gen-data: image size must be at least 48");
  if (spec.classes < 1 || spec.classes > 3)
    throw ShapeError("gen-data: between 1 and 3 shape classes are available");
  if (!(spec.small_fraction >= 0) || !(spec.small_fraction <= 1))
    throw ShapeError("gen-data: small_fraction must lie in [0,1]");
  if (spec.min_objects < 1 || spec.max_objects < spec.min_objects)
    throw ShapeError("gen-data: need 1 <= min_objects <= max_objects");

  const int S = spec.image_size;
  const std::int64_t plane = std::int64_t(S) * S;
  const std::int64_t bpi = 3 * plane;
  const int big_side_max = std::min(48, S - 4);

  fs::create_directories(dir);
  std::mt19937_64 g(spec.seed);

  std::string image_bytes;
  image_bytes.reserve(static_cast<std::size_t>(bpi) * spec.count);
  ordered_json images_meta = ordered_json::array();

  std::vector<std::uint8_t> img(static_cast<std::size_t>(bpi));
  for (int id = 0; id < spec.count; ++id) {
    for (std::int64_t i = 0; i < bpi; ++i)
      img[i] = static_cast<std::uint8_t>(rng::uniform_int(g, 0, 40));

    std::vector<Placed> placed;
    const int want = rng::uniform_int(g, spec.min_objects, spec.max_objects);
    for (int obj = 0; obj < want; ++obj) {
      const int cls = rng::uniform_int(g, 1, spec.classes);
      const bool small = rng::uniform(g, 0.0, 1.0) < spec.small_fraction;

      // Sizes keep the bounding-box area strictly below 32*32 px for small
      // objects and at or above it otherwise.
      int w, h, radius = 0;
      if (cls == 1) {
        radius = small ? rng::uniform_int(g, 4, 15) : rng::uniform_int(g, 16, (big_side_max - 1) / 2);
        w = h = 2 * radius + 1;
      } else {
        w = h = small ? rng::uniform_int(g, 8, 31) : rng::uniform_int(g, 32, big_side_max);
      }

      PixelBox box{};
      bool ok = false;
      for (int attempt = 0; attempt < 30 && !ok; ++attempt) {
        const int x0 = rng::uniform_int(g, 2, S - 2 - w);
        const int y0 = rng::uniform_int(g, 2, S - 2 - h);
        box = {x0, y0, x0 + w, y0 + h};
        ok = true;
        for (const Placed& p : placed)
          if (pixel_iou(box, p.box) > 0.3) ok = false;
      }
      if (!ok) continue;

      static constexpr int base[3][3] = {{200, 70, 70}, {70, 200, 70}, {70, 70, 200}};
      std::array<int, 3> color;
      for (int c = 0; c < 3; ++c)
        color[c] = int(std::clamp<std::int64_t>(base[cls - 1][c] + rng::uniform_int(g, -40, 40), 0, 255));

      auto paint = [&](int x, int y) {
        for (int c = 0; c < 3; ++c) {
          const int v = int(std::clamp<std::int64_t>(color[c] + rng::uniform_int(g, -10, 10), 0, 255));
          img[c * plane + std::int64_t(y) * S + x] = static_cast<std::uint8_t>(v);
        }
      };
      if (cls == 1) {
        const int cx = box.xmin + radius, cy = box.ymin + radius;
        for (int y = box.ymin; y < box.ymax; ++y)
          for (int x = box.xmin; x < box.xmax; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius) paint(x, y);
      } else if (cls == 2) {
        for (int y = box.ymin; y < box.ymax; ++y)
          for (int x = box.xmin; x < box.xmax; ++x) paint(x, y);
      } else {
        for (int y = box.ymin; y < box.ymax; ++y)
          for (int x = box.xmin; x < box.xmax; ++x)
            if ((x - box.xmin) + (y - box.ymin) <= w - 1) paint(x, y);
      }
      placed.push_back({cls, box});
    }

    ordered_json anns = ordered_json::array();
    for (const Placed& p : placed)
      anns.push_back({{"cls", p.cls},
                      {"xmin", p.box.xmin},
                      {"ymin", p.box.ymin},
                      {"xmax", p.box.xmax},
                      {"ymax", p.box.ymax},
                      {"area", p.box.area()}});
    images_meta.push_back({{"id", id},
                           {"crc32", io::crc_of(img.data(), img.size())},
                           {"annotations", std::move(anns)}});
    image_bytes.append(reinterpret_cast<const char*>(img.data()), img.size());
  }

  ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["image_size"] = S;
  manifest["classes"] = spec.classes;
  manifest["count"] = spec.count;
  manifest["bytes_per_image"] = bpi;
  manifest["images"] = std::move(images_meta);
  io::atomic_write(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");

  std::string bin;
  bin.append(kMagic, sizeof(kMagic));
  io::append_u32(bin, std::uint32_t(spec.count));
  io::append_u32(bin, std::uint32_t(bpi));
  bin += image_bytes;
  io::atomic_write(fs::path(dir) / "images.bin", bin);
}

Dataset load_dataset(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  const fs::path bpath = fs::path(dir) / "images.bin";
  std::ifstream mf(mpath);
  if (!mf) throw DataError(mpath.string() + ": cannot open");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }

  Dataset ds;
  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion)
      throw DataError(mpath.string() + ": unsupported format version");
    ds.image_size = manifest.at("image_size").get<int>();
    ds.classes = manifest.at("classes").get<int>();
    const int count = manifest.at("count").get<int>();
    const std::int64_t bpi = manifest.at("bytes_per_image").get<std::int64_t>();
    const int S = ds.image_size;
    if (S < 1 || count < 1 || bpi != 3 * std::int64_t(S) * S)
      throw DataError(mpath.string() + ": inconsistent geometry");
    if (static_cast<int>(manifest.at("images").size()) != count)
      throw DataError(mpath.string() + ": image list does not match count");

    std::ifstream bf(bpath, std::ios::binary);
    if (!bf) throw DataError(bpath.string() + ": cannot open");
    char magic[8];
    if (!bf.read(magic, 8) || !std::equal(magic, magic + 8, kMagic))
      throw DataError(bpath.string() + ": bad magic");
    if (io::get_u32(bf, bpath.string()) != static_cast<std::uint32_t>(count))
      throw DataError(bpath.string() + ": image count disagrees with manifest");
    if (io::get_u32(bf, bpath.string()) != static_cast<std::uint32_t>(bpi))
      throw DataError(bpath.string() + ": image stride disagrees with manifest");

    const std::int64_t plane = std::int64_t(S) * S;
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(bpi));
    for (int id = 0; id < count; ++id) {
      if (!bf.read(reinterpret_cast<char*>(buf.data()), bpi))
        throw DataError(bpath.string() + ": truncated at image " + std::to_string(id));
      const json& meta = manifest.at("images").at(id);
      if (meta.at("id").get<int>() != id)
        throw DataError(mpath.string() + ": image ids must be dense and ordered");
      if (io::crc_of(buf.data(), buf.size()) != meta.at("crc32").get<std::uint32_t>())
        throw DataError(bpath.string() + ": checksum mismatch at image " + std::to_string(id));

      Tensor img = Tensor::zeros({3, S, S});
      auto px = img.data<float>();
      for (std::int64_t i = 0; i < bpi; ++i) px[i] = float(buf[i]) / 255.0f;
      ds.images.push_back(std::move(img));

      std::vector<Annotation> anns;
      std::vector<std::int64_t> areas;
      for (const json& a : meta.at("annotations")) {
        const int cls = a.at("cls").get<int>();
        const int x0 = a.at("xmin").get<int>(), y0 = a.at("ymin").get<int>();
        const int x1 = a.at("xmax").get<int>(), y1 = a.at("ymax").get<int>();
        const std::int64_t area = a.at("area").get<std::int64_t>();
        if (cls < 1 || cls > ds.classes || x0 < 0 || y0 < 0 || x1 <= x0 || y1 <= y0 ||
            x1 > S || y1 > S || area != std::int64_t(x1 - x0) * (y1 - y0))
          throw DataError(mpath.string() + ": bad annotation on image " + std::to_string(id));
        anns.push_back({cls, Box{double(x0) / S, double(y0) / S, double(x1) / S,
                                 double(y1) / S}});
        areas.push_back(area);
      }
      ds.annotations.push_back(std::move(anns));
      ds.bbox_areas.push_back(std::move(areas));
    }
    char extra;
    if (bf.read(&extra, 1)) throw DataError(bpath.string() + ": trailing bytes");
    (void)plane;
  } catch (const json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace mfssd
