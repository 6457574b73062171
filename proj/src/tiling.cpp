#include "hsiseg/tiling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <queue>

#include <nlohmann/json.hpp>

#include "hsiseg/binary_io.hpp"
#include "hsiseg/error.hpp"

namespace hsiseg {

namespace {

constexpr std::uint32_t kUnassigned = std::numeric_limits<std::uint32_t>::max();

struct Center {
  double x = 0.0;
  double y = 0.0;
  std::vector<double> spectrum;
  double norm = 0.0;
};

double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Spectral part of the SLIC distance. Dark pixels have no angle; they sit at
// a right angle from everything except other dark pixels.
class SpectralMetric {
 public:
  SpectralMetric(const HsiCube& cube, SpectralDistance kind)
      : cube_(cube), kind_(kind), pixel_norm_(cube.num_pixels()) {
    for (std::size_t p = 0; p < cube.num_pixels(); ++p) {
      double s = 0.0;
      for (float v : cube.spectrum(p)) s += static_cast<double>(v) * v;
      pixel_norm_[p] = std::sqrt(s);
    }
  }

  double operator()(std::size_t pixel, const Center& c) const {
    const auto s = cube_.spectrum(pixel);
    if (kind_ == SpectralDistance::kL2) {
      double sum = 0.0;
      for (std::size_t l = 0; l < s.size(); ++l) {
        const double d = s[l] - c.spectrum[l];
        sum += d * d;
      }
      return std::sqrt(sum);
    }
    constexpr double kEps = 1e-12;
    const double np = pixel_norm_[pixel];
    if (np < kEps || c.norm < kEps) {
      return (np < kEps && c.norm < kEps) ? 0.0 : std::numbers::pi / 2.0;
    }
    double dot = 0.0;
    for (std::size_t l = 0; l < s.size(); ++l) dot += s[l] * c.spectrum[l];
    return std::acos(std::clamp(dot / (np * c.norm), -1.0, 1.0));
  }

 private:
  const HsiCube& cube_;
  SpectralDistance kind_;
  std::vector<double> pixel_norm_;
};

std::vector<std::uint32_t> relabel_contiguous(std::span<const std::uint32_t> ids,
                                              std::size_t max_id) {
  std::vector<std::uint32_t> remap(max_id + 1, kUnassigned);
  std::vector<bool> used(max_id + 1, false);
  for (auto id : ids) used[id] = true;
  std::uint32_t next = 0;
  for (std::size_t i = 0; i <= max_id; ++i) {
    if (used[i]) remap[i] = next++;
  }
  std::vector<std::uint32_t> out(ids.size());
  for (std::size_t p = 0; p < ids.size(); ++p) out[p] = remap[ids[p]];
  return out;
}

// 4-connected components of an assignment. Returns component id per pixel.
std::vector<std::uint32_t> label_components(std::span<const std::uint32_t> assignment,
                                            std::size_t width, std::size_t height,
                                            std::size_t& count) {
  std::vector<std::uint32_t> comp(assignment.size(), kUnassigned);
  count = 0;
  std::vector<std::uint32_t> stack;
  for (std::size_t start = 0; start < assignment.size(); ++start) {
    if (comp[start] != kUnassigned) continue;
    const auto id = assignment[start];
    const auto c = static_cast<std::uint32_t>(count++);
    comp[start] = c;
    stack.push_back(static_cast<std::uint32_t>(start));
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      const std::size_t x = p % width;
      const std::size_t y = p / width;
      auto visit = [&](std::size_t q) {
        if (comp[q] == kUnassigned && assignment[q] == id) {
          comp[q] = c;
          stack.push_back(static_cast<std::uint32_t>(q));
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < width) visit(p + 1);
      if (y > 0) visit(p - width);
      if (y + 1 < height) visit(p + width);
    }
  }
  return comp;
}

}  // namespace

std::string to_string(SpectralDistance d) {
  return d == SpectralDistance::kSam ? "sam" : "l2";
}

SpectralDistance parse_distance(const std::string& name) {
  if (name == "sam" || name == "SAM") return SpectralDistance::kSam;
  if (name == "l2" || name == "L2") return SpectralDistance::kL2;
  throw ConfigError("unknown spectral distance '" + name + "' (use sam or l2)");
}

std::vector<Tile> compute_tile_stats(const HsiCube& cube,
                                     std::span<const std::uint32_t> assignment) {
  if (assignment.size() != cube.num_pixels()) {
    throw ShapeError("tile assignment size does not match cube");
  }
  std::uint32_t max_id = 0;
  for (auto id : assignment) max_id = std::max(max_id, id);
  const std::size_t n = assignment.empty() ? 0 : max_id + 1;
  const std::size_t nl = cube.channels();
  std::vector<Tile> tiles(n);
  std::vector<double> sx(n, 0.0), sy(n, 0.0), spec(n * nl, 0.0);
  for (std::size_t p = 0; p < assignment.size(); ++p) {
    const auto id = assignment[p];
    tiles[id].pixels.push_back(static_cast<std::uint32_t>(p));
    sx[id] += static_cast<double>(p % cube.width());
    sy[id] += static_cast<double>(p / cube.width());
    const auto s = cube.spectrum(p);
    for (std::size_t l = 0; l < nl; ++l) spec[id * nl + l] += s[l];
  }
  for (std::size_t i = 0; i < n; ++i) {
    Tile& t = tiles[i];
    t.id = static_cast<std::uint32_t>(i);
    if (t.pixels.empty()) throw ShapeError("tile ids are not contiguous");
    const double count = static_cast<double>(t.pixels.size());
    t.centroid = {sx[i] / count, sy[i] / count};
    t.mean_spectrum.resize(nl);
    for (std::size_t l = 0; l < nl; ++l) {
      t.mean_spectrum[l] = static_cast<float>(spec[i * nl + l] / count);
    }
  }
  return tiles;
}

SlicResult slic_segment(const HsiCube& cube, const SlicParams& params) {
  const std::size_t w = cube.width();
  const std::size_t h = cube.height();
  if (w < 8 || h < 8) throw ConfigError("slic_segment: cube must be at least 8x8");
  if (params.target_pixels_per_tile < 4) {
    throw ConfigError("slic_segment: target_pixels_per_tile must be >= 4");
  }
  const double m = params.resolved_compactness();
  if (!(m > 0.0)) throw ConfigError("slic_segment: compactness must be > 0");
  const double step = std::sqrt(static_cast<double>(params.target_pixels_per_tile));
  if (step > static_cast<double>(std::min(w, h)) + 1e-9) {
    throw ConfigError("slic_segment: cube is smaller than one grid cell");
  }
  const std::size_t nl = cube.channels();
  const auto nx = std::max<std::size_t>(1, std::lround(static_cast<double>(w) / step));
  const auto ny = std::max<std::size_t>(1, std::lround(static_cast<double>(h) / step));
  const double cell_w = static_cast<double>(w) / static_cast<double>(nx);
  const double cell_h = static_cast<double>(h) / static_cast<double>(ny);

  // Initial centers: grid cell midpoints with the cell's mean spectrum.
  std::vector<Center> centers(nx * ny);
  for (std::size_t j = 0; j < ny; ++j) {
    for (std::size_t i = 0; i < nx; ++i) {
      Center& c = centers[j * nx + i];
      // pixel centers sit at integer coordinates
      c.x = (static_cast<double>(i) + 0.5) * cell_w - 0.5;
      c.y = (static_cast<double>(j) + 0.5) * cell_h - 0.5;
      c.spectrum.assign(nl, 0.0);
      const auto x0 = static_cast<std::size_t>(std::floor(i * cell_w));
      const auto x1 = std::min(w, static_cast<std::size_t>(std::floor((i + 1) * cell_w)));
      const auto y0 = static_cast<std::size_t>(std::floor(j * cell_h));
      const auto y1 = std::min(h, static_cast<std::size_t>(std::floor((j + 1) * cell_h)));
      std::size_t count = 0;
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          const auto s = cube.spectrum(x, y);
          for (std::size_t l = 0; l < nl; ++l) c.spectrum[l] += s[l];
          ++count;
        }
      }
      for (double& v : c.spectrum) v /= static_cast<double>(std::max<std::size_t>(count, 1));
      c.norm = norm_of(c.spectrum);
    }
  }

  const SpectralMetric spectral(cube, params.distance);
  auto combined = [&](std::size_t p, const Center& c) {
    const double ds = spectral(p, c);
    const double dx = static_cast<double>(p % w) - c.x;
    const double dy = static_cast<double>(p / w) - c.y;
    const double dxy2 = (dx * dx + dy * dy) / (step * step);
    return std::sqrt(ds * ds + m * m * dxy2);
  };

  SlicResult result;
  result.grid_step = step;
  std::vector<std::uint32_t> label(w * h, kUnassigned);
  std::vector<double> dist(w * h);

  auto total_objective = [&] {
    double total = 0.0;
    for (std::size_t p = 0; p < w * h; ++p) total += combined(p, centers[label[p]]);
    return total;
  };

  const auto half = static_cast<long>(std::ceil(step));
  for (std::size_t iter = 0; iter < params.max_iters; ++iter) {
    // Assignment. A pixel may always stay with its current center, which
    // keeps the objective from increasing when windows move away.
    for (std::size_t p = 0; p < w * h; ++p) {
      dist[p] = label[p] == kUnassigned ? std::numeric_limits<double>::infinity()
                                        : combined(p, centers[label[p]]);
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const Center& c = centers[k];
      const long cx = std::lround(c.x);
      const long cy = std::lround(c.y);
      const long x0 = std::max(0L, cx - half);
      const long x1 = std::min(static_cast<long>(w) - 1, cx + half);
      const long y0 = std::max(0L, cy - half);
      const long y1 = std::min(static_cast<long>(h) - 1, cy + half);
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          const auto p = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          const double d = combined(p, c);
          if (d < dist[p] || (d == dist[p] && k < label[p])) {
            dist[p] = d;
            label[p] = static_cast<std::uint32_t>(k);
          }
        }
      }
    }
    for (std::size_t p = 0; p < w * h; ++p) {
      if (label[p] != kUnassigned) continue;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < centers.size(); ++k) {
        const double d = combined(p, centers[k]);
        if (d < best) {
          best = d;
          label[p] = static_cast<std::uint32_t>(k);
        }
      }
    }
    if (iter == 0) result.objective.push_back(total_objective());

    // Update. A cluster moves to its mean only if that does not raise its
    // own cost, so the total objective is non-increasing.
    const std::size_t kc = centers.size();
    std::vector<Center> proposed(kc);
    std::vector<double> count(kc, 0.0);
    for (auto& c : proposed) c.spectrum.assign(nl, 0.0);
    for (std::size_t p = 0; p < w * h; ++p) {
      Center& c = proposed[label[p]];
      c.x += static_cast<double>(p % w);
      c.y += static_cast<double>(p / w);
      const auto s = cube.spectrum(p);
      for (std::size_t l = 0; l < nl; ++l) c.spectrum[l] += s[l];
      count[label[p]] += 1.0;
    }
    for (std::size_t k = 0; k < kc; ++k) {
      if (count[k] == 0.0) {
        proposed[k] = centers[k];
        continue;
      }
      proposed[k].x /= count[k];
      proposed[k].y /= count[k];
      for (double& v : proposed[k].spectrum) v /= count[k];
      proposed[k].norm = norm_of(proposed[k].spectrum);
    }
    std::vector<double> cost_old(kc, 0.0), cost_new(kc, 0.0);
    for (std::size_t p = 0; p < w * h; ++p) {
      cost_old[label[p]] += combined(p, centers[label[p]]);
      cost_new[label[p]] += combined(p, proposed[label[p]]);
    }
    double moved = 0.0;
    double objective = 0.0;
    for (std::size_t k = 0; k < kc; ++k) {
      if (cost_new[k] <= cost_old[k]) {
        moved += std::hypot(proposed[k].x - centers[k].x, proposed[k].y - centers[k].y);
        centers[k] = std::move(proposed[k]);
        objective += cost_new[k];
      } else {
        objective += cost_old[k];
      }
    }
    result.objective.push_back(objective);
    result.iterations = iter + 1;
    if (moved < params.convergence_px) break;
  }

  std::uint32_t max_id = 0;
  for (auto id : label) max_id = std::max(max_id, id);
  TileMap map;
  map.width = w;
  map.height = h;
  map.assignment = relabel_contiguous(label, max_id);
  if (params.enforce_connectivity) {
    map = enforce_connectivity(cube, std::move(map),
                               std::max<std::size_t>(1, params.target_pixels_per_tile / 4));
  } else {
    map.tiles = compute_tile_stats(cube, map.assignment);
  }
  result.map = std::move(map);
  return result;
}

TileMap enforce_connectivity(const HsiCube& cube, TileMap map,
                             std::size_t min_fragment) {
  const std::size_t w = map.width;
  const std::size_t h = map.height;
  if (map.assignment.size() != w * h) throw ShapeError("enforce_connectivity: bad assignment size");
  auto& a = map.assignment;

  while (true) {
    std::size_t ncomp = 0;
    const auto comp = label_components(a, w, h, ncomp);
    std::vector<std::size_t> size(ncomp, 0);
    std::vector<std::uint32_t> owner(ncomp, 0);
    for (std::size_t p = 0; p < a.size(); ++p) {
      ++size[comp[p]];
      owner[comp[p]] = a[p];
    }
    // Largest component of each tile is its primary body; ties go to the
    // component found first in raster order.
    std::uint32_t max_id = 0;
    for (auto id : a) max_id = std::max(max_id, id);
    std::vector<std::uint32_t> primary(max_id + 1, kUnassigned);
    for (std::size_t c = 0; c < ncomp; ++c) {
      auto& pr = primary[owner[c]];
      if (pr == kUnassigned || size[c] > size[pr]) pr = static_cast<std::uint32_t>(c);
    }
    // Pick the smallest orphan fragment below the size limit and merge it
    // into its largest adjacent component.
    std::uint32_t victim = kUnassigned;
    for (std::size_t c = 0; c < ncomp; ++c) {
      if (primary[owner[c]] == c || size[c] >= min_fragment) continue;
      if (victim == kUnassigned || size[c] < size[victim]) victim = static_cast<std::uint32_t>(c);
    }
    if (victim == kUnassigned) {
      // Remaining orphans are large: give each its own id after the
      // existing ones, then compact.
      std::uint32_t next = max_id + 1;
      std::vector<std::uint32_t> new_id(ncomp, kUnassigned);
      for (std::size_t c = 0; c < ncomp; ++c) {
        new_id[c] = primary[owner[c]] == c ? owner[c] : next++;
      }
      for (std::size_t p = 0; p < a.size(); ++p) a[p] = new_id[comp[p]];
      a = relabel_contiguous(a, next);
      break;
    }
    std::uint32_t target = kUnassigned;
    for (std::size_t p = 0; p < a.size(); ++p) {
      if (comp[p] != victim) continue;
      const std::size_t x = p % w;
      const std::size_t y = p / w;
      auto consider = [&](std::size_t q) {
        const auto cq = comp[q];
        if (cq == victim) return;
        if (target == kUnassigned || size[cq] > size[target] ||
            (size[cq] == size[target] && cq < target)) {
          target = cq;
        }
      };
      if (x > 0) consider(p - 1);
      if (x + 1 < w) consider(p + 1);
      if (y > 0) consider(p - w);
      if (y + 1 < h) consider(p + w);
    }
    if (target == kUnassigned) break;  // single-component image
    for (std::size_t p = 0; p < a.size(); ++p) {
      if (comp[p] == victim) a[p] = owner[target];
    }
  }

  std::uint32_t max_id = 0;
  for (auto id : a) max_id = std::max(max_id, id);
  a = relabel_contiguous(a, max_id);
  map.tiles = compute_tile_stats(cube, a);
  return map;
}

void assign_tile_labels(TileMap& map, std::span<const std::uint8_t> label_map) {
  if (label_map.size() != map.assignment.size()) {
    throw ShapeError("assign_tile_labels: label map size does not match tile map");
  }
  for (Tile& t : map.tiles) {
    std::array<std::size_t, 256> votes{};
    for (auto p : t.pixels) ++votes[label_map[p]];
    const auto best = std::max_element(votes.begin(), votes.end());
    t.label = static_cast<int>(best - votes.begin());
    t.label_uniform = static_cast<double>(*best) >= 0.99 * static_cast<double>(t.pixels.size());
  }
}

bool is_four_connected(const TileMap& map) {
  std::size_t ncomp = 0;
  label_components(map.assignment, map.width, map.height, ncomp);
  std::uint32_t max_id = 0;
  for (auto id : map.assignment) max_id = std::max(max_id, id);
  return ncomp == static_cast<std::size_t>(max_id) + 1;
}

TilePatch extract_tile_patch(const HsiCube& cube, const Tile& tile,
                             std::size_t patch_size) {
  TilePatch out;
  out.size = patch_size;
  out.channels = cube.channels();
  out.data.assign(patch_size * patch_size * cube.channels(), 0.0F);
  if (tile.pixels.empty()) return out;
  const std::size_t w = cube.width();
  long min_x = std::numeric_limits<long>::max(), max_x = -1;
  long min_y = std::numeric_limits<long>::max(), max_y = -1;
  for (auto p : tile.pixels) {
    const auto x = static_cast<long>(p % w);
    const auto y = static_cast<long>(p / w);
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  }
  const auto ps = static_cast<long>(patch_size);
  auto origin = [ps](long lo, long hi, double centroid) {
    const long extent = hi - lo + 1;
    if (extent <= ps) return lo - (ps - extent + 1) / 2;
    return std::lround(centroid) - ps / 2;
  };
  out.offset_x = static_cast<int>(origin(min_x, max_x, tile.centroid.x));
  out.offset_y = static_cast<int>(origin(min_y, max_y, tile.centroid.y));
  const std::size_t nl = cube.channels();
  for (auto p : tile.pixels) {
    const long px = static_cast<long>(p % w) - out.offset_x;
    const long py = static_cast<long>(p / w) - out.offset_y;
    if (px < 0 || py < 0 || px >= ps || py >= ps) {
      out.cropped = true;
      continue;
    }
    const auto s = cube.spectrum(p);
    std::copy(s.begin(), s.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(
                                     (static_cast<std::size_t>(py) * patch_size +
                                      static_cast<std::size_t>(px)) * nl));
  }
  return out;
}

void save_tile_map(const TileMap& map, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.magic("HST1");
  w.put(static_cast<std::uint32_t>(map.width));
  w.put(static_cast<std::uint32_t>(map.height));
  w.put(static_cast<std::uint32_t>(map.tiles.size()));
  w.put_all(std::span<const std::uint32_t>(map.assignment));
  io::write_file(path, w.take());

  nlohmann::json tiles = nlohmann::json::array();
  for (const Tile& t : map.tiles) {
    nlohmann::json j;
    j["id"] = t.id;
    j["pixel_count"] = t.pixel_count();
    j["centroid"] = {t.centroid.x, t.centroid.y};
    j["mean_spectrum"] = t.mean_spectrum;
    j["label"] = t.label ? nlohmann::json(*t.label) : nlohmann::json(nullptr);
    j["label_uniform"] = t.label_uniform;
    tiles.push_back(std::move(j));
  }
  nlohmann::json side{{"width", map.width}, {"height", map.height}, {"tiles", tiles}};
  io::write_text(path.string() + ".json", side.dump(1));
}

TileMap load_tile_map(const HsiCube& cube, const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  r.expect_magic("HST1", "tile map");
  TileMap map;
  map.width = r.get<std::uint32_t>("width");
  map.height = r.get<std::uint32_t>("height");
  const auto n = r.get<std::uint32_t>("tile count");
  if (map.width != cube.width() || map.height != cube.height()) {
    throw FormatError("tile map size does not match cube", 4);
  }
  map.assignment.resize(map.width * map.height);
  r.get_all(std::span<std::uint32_t>(map.assignment), "tile ids");
  for (auto id : map.assignment) {
    if (id >= n) throw FormatError("tile id out of range", 16);
  }
  map.tiles = compute_tile_stats(cube, map.assignment);
  const auto side_path = std::filesystem::path(path.string() + ".json");
  if (std::filesystem::exists(side_path)) {
    const auto side = nlohmann::json::parse(io::read_text(side_path));
    for (const auto& j : side.at("tiles")) {
      const auto id = j.at("id").get<std::size_t>();
      if (id >= map.tiles.size()) continue;
      if (!j.at("label").is_null()) map.tiles[id].label = j.at("label").get<int>();
      map.tiles[id].label_uniform = j.value("label_uniform", true);
    }
  }
  return map;
}

}  // namespace hsiseg
