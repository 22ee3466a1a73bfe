#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"

namespace inrc {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0; // altitude, meters
};

// Per-axis affine map: normalized = (value - offset) * scale.
// For a non-degenerate axis, scale = 2 / (max - min) maps the fitted range
// onto [-1, 1]. A degenerate axis (max == min) keeps scale 1 and centers on
// the shared value, so it maps to 0.
struct AxisAffine {
  double offset = 0.0; // meters
  double scale = 1.0;  // 1/meters
  bool degenerate = false;

  double normalize(double v) const { return (v - offset) * scale; }
  double denormalize(double n) const { return n / scale + offset; }
};

struct Normalizer {
  AxisAffine x, y, z;
  std::optional<AxisAffine> t; // present only for single-model (time) inputs

  bool has_time() const { return t.has_value(); }
};

struct PointCloud {
  std::vector<Point3> points;
  int timestamp = 0;                   // 0 or 1
  std::vector<int> labels;             // optional, parallel to points (PLY `label`)
  std::optional<Normalizer> norm;      // set once fitted

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct SplitIndex {
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
  std::uint64_t seed = 0;
};

enum class CloudFormat { xyz, ply, autodetect };

// One point per line, whitespace- or comma-separated floats; `#` comments
// skipped. An optional 4th integer field is tolerated and ignored.
PointCloud load_xyz(const std::string& path, CloudFormat format = CloudFormat::autodetect);

void save_xyz(const PointCloud& cloud, const std::string& path);

// Joint normalizer over the union of the given clouds. With include_time the
// time axis maps timestamp 0 -> -1 and 1 -> +1.
Normalizer fit_normalizer(const std::vector<const PointCloud*>& clouds, bool include_time);

SplitIndex split_train_val(std::size_t n, double fraction, std::uint64_t seed);

} // namespace inrc
