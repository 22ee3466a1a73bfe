#include "point_cloud.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "rng.hpp"

namespace inrc {

namespace {

bool parse_double(std::string_view s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto res = std::from_chars(first, last, out);
  return res.ec == std::errc{} && res.ptr == last;
}

// Splits on commas and/or runs of whitespace.
std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (std::isspace(static_cast<unsigned char>(line[i])) || line[i] == ','))
      ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j])) && line[j] != ',')
      ++j;
    if (j > i) fields.push_back(line.substr(i, j - i));
    i = j;
  }
  return fields;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

CloudFormat detect_format(const std::string& path, std::istream& in) {
  const std::string p = lower(path);
  if (p.size() >= 4 && p.compare(p.size() - 4, 4, ".ply") == 0) return CloudFormat::ply;
  // peek at the first bytes: a PLY file starts with the magic "ply"
  char magic[3] = {0, 0, 0};
  in.read(magic, 3);
  in.clear();
  in.seekg(0);
  if (magic[0] == 'p' && magic[1] == 'l' && magic[2] == 'y') return CloudFormat::ply;
  return CloudFormat::xyz;
}

PointCloud load_xyz_stream(std::istream& in, const std::string& path) {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto fields = split_fields(line);
    if (fields.empty() || fields[0].front() == '#') continue;
    if (fields.size() < 3)
      fail(Errc::parse, path + ":" + std::to_string(lineno) + ": expected at least 3 numeric fields");
    double c[3];
    for (int k = 0; k < 3; ++k) {
      if (!parse_double(fields[k], c[k]) || !std::isfinite(c[k]))
        fail(Errc::parse, path + ":" + std::to_string(lineno) + ": invalid coordinate '" +
                              std::string(fields[k]) + "'");
    }
    cloud.points.push_back({c[0], c[1], c[2]});
  }
  if (cloud.points.empty()) fail(Errc::parse, path + ": no points found");
  return cloud;
}

PointCloud load_ply_stream(std::istream& in, const std::string& path) {
  std::string line;
  std::size_t lineno = 0;
  auto next_line = [&](std::string& out) {
    if (!std::getline(in, out)) fail(Errc::parse, path + ": truncated PLY header");
    ++lineno;
  };

  next_line(line);
  if (split_fields(line).empty() || split_fields(line)[0] != "ply")
    fail(Errc::parse, path + ": not a PLY file");

  std::size_t vertex_count = 0;
  bool in_vertex_element = false;
  bool seen_vertex_element = false;
  std::vector<std::string> vertex_props;
  int ix = -1, iy = -1, iz = -1, ilabel = -1;

  for (;;) {
    next_line(line);
    auto fields = split_fields(line);
    if (fields.empty()) continue;
    const std::string keyword(fields[0]);
    if (keyword == "comment") continue;
    if (keyword == "format") {
      if (fields.size() < 2 || fields[1] != "ascii")
        fail(Errc::parse, path + ": only ASCII PLY is supported");
    } else if (keyword == "element") {
      if (fields.size() < 3) fail(Errc::parse, path + ":" + std::to_string(lineno) + ": bad element");
      in_vertex_element = fields[1] == "vertex";
      if (in_vertex_element) {
        seen_vertex_element = true;
        double n;
        if (!parse_double(fields[2], n) || n < 0)
          fail(Errc::parse, path + ": bad vertex count");
        vertex_count = static_cast<std::size_t>(n);
      }
    } else if (keyword == "property" && in_vertex_element) {
      if (fields.size() < 3) fail(Errc::parse, path + ":" + std::to_string(lineno) + ": bad property");
      if (fields[1] == "list") fail(Errc::parse, path + ": list properties not supported on vertices");
      const std::string name(fields.back());
      if (name == "x") ix = static_cast<int>(vertex_props.size());
      if (name == "y") iy = static_cast<int>(vertex_props.size());
      if (name == "z") iz = static_cast<int>(vertex_props.size());
      if (name == "label") ilabel = static_cast<int>(vertex_props.size());
      vertex_props.push_back(name);
    } else if (keyword == "end_header") {
      break;
    }
  }

  if (!seen_vertex_element) fail(Errc::parse, path + ": missing 'element vertex'");
  if (ix < 0 || iy < 0 || iz < 0) fail(Errc::parse, path + ": vertex element lacks x/y/z properties");
  if (vertex_count == 0) fail(Errc::parse, path + ": empty vertex element");

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  if (ilabel >= 0) cloud.labels.reserve(vertex_count);

  for (std::size_t i = 0; i < vertex_count; ++i) {
    next_line(line);
    auto fields = split_fields(line);
    if (fields.size() < vertex_props.size())
      fail(Errc::parse, path + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(vertex_props.size()) + " vertex values");
    double c[3];
    const int idx[3] = {ix, iy, iz};
    for (int k = 0; k < 3; ++k) {
      if (!parse_double(fields[idx[k]], c[k]) || !std::isfinite(c[k]))
        fail(Errc::parse, path + ":" + std::to_string(lineno) + ": invalid coordinate '" +
                              std::string(fields[idx[k]]) + "'");
    }
    cloud.points.push_back({c[0], c[1], c[2]});
    if (ilabel >= 0) {
      double lv;
      if (!parse_double(fields[ilabel], lv))
        fail(Errc::parse, path + ":" + std::to_string(lineno) + ": invalid label");
      cloud.labels.push_back(static_cast<int>(lv));
    }
  }
  return cloud;
}

} // namespace

PointCloud load_xyz(const std::string& path, CloudFormat format) {
  std::ifstream in(path);
  if (!in) fail(Errc::io, "cannot open '" + path + "'");
  if (format == CloudFormat::autodetect) format = detect_format(path, in);
  return format == CloudFormat::ply ? load_ply_stream(in, path) : load_xyz_stream(in, path);
}

void save_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(Errc::io, "cannot write '" + path + "'");
  out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& p : cloud.points) out << p.x << ' ' << p.y << ' ' << p.z << '\n';
  if (!out) fail(Errc::io, "write failed for '" + path + "'");
}

namespace {

AxisAffine fit_axis(double lo, double hi) {
  AxisAffine a;
  a.offset = 0.5 * (lo + hi);
  if (hi > lo) {
    a.scale = 2.0 / (hi - lo);
  } else {
    a.scale = 1.0;
    a.degenerate = true;
  }
  return a;
}

} // namespace

Normalizer fit_normalizer(const std::vector<const PointCloud*>& clouds, bool include_time) {
  std::size_t total = 0;
  for (const auto* c : clouds) total += c ? c->size() : 0;
  if (total == 0) fail(Errc::invalid_argument, "fit_normalizer: no points");

  constexpr double inf = std::numeric_limits<double>::infinity();
  double lo[3] = {inf, inf, inf};
  double hi[3] = {-inf, -inf, -inf};
  for (const auto* c : clouds) {
    if (!c) continue;
    for (const auto& p : c->points) {
      lo[0] = std::min(lo[0], p.x); hi[0] = std::max(hi[0], p.x);
      lo[1] = std::min(lo[1], p.y); hi[1] = std::max(hi[1], p.y);
      lo[2] = std::min(lo[2], p.z); hi[2] = std::max(hi[2], p.z);
    }
  }

  Normalizer n;
  n.x = fit_axis(lo[0], hi[0]);
  n.y = fit_axis(lo[1], hi[1]);
  n.z = fit_axis(lo[2], hi[2]);
  if (include_time) n.t = fit_axis(0.0, 1.0); // timestamps 0/1 -> -1/+1
  return n;
}

SplitIndex split_train_val(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    fail(Errc::invalid_argument, "split fraction must lie in (0, 1)");
  if (n < 5) fail(Errc::invalid_argument, "need at least 5 points to split");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0x53504c49)); // "SPLI" stream tag
  rng.shuffle(order);

  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  SplitIndex split;
  split.seed = seed;
  split.train_indices.assign(order.begin(), order.begin() + n_train);
  split.val_indices.assign(order.begin() + n_train, order.end());
  return split;
}

} // namespace inrc
