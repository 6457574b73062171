#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsiseg/cube.hpp"

namespace hsiseg {

enum class SpectralDistance { kSam, kL2 };

std::string to_string(SpectralDistance d);
SpectralDistance parse_distance(const std::string& name);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct Tile {
  std::uint32_t id = 0;
  std::vector<std::uint32_t> pixels;  // linear indices y * width + x, ascending
  Point2 centroid;
  std::vector<float> mean_spectrum;
  std::optional<int> label;   // majority class, when a label map was given
  bool label_uniform = true;  // >= 99% of pixels share `label`

  std::size_t pixel_count() const { return pixels.size(); }
};

struct TileMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint32_t> assignment;  // per pixel, ids 0..N-1
  std::vector<Tile> tiles;
};

struct SlicParams {
  std::size_t target_pixels_per_tile = 200;
  // Spatial weight; unset means 0.1 for SAM and 1.0 for L2.
  std::optional<double> compactness;
  std::size_t max_iters = 10;
  SpectralDistance distance = SpectralDistance::kSam;
  double convergence_px = 0.1;
  bool enforce_connectivity = true;

  double resolved_compactness() const {
    return compactness.value_or(distance == SpectralDistance::kSam ? 0.1 : 1.0);
  }
};

struct SlicResult {
  TileMap map;
  // Total objective sum_p D(p, center(p)) after initialization and after
  // every assignment+update iteration.
  std::vector<double> objective;
  std::size_t iterations = 0;
  double grid_step = 0.0;
};

// Superpixel segmentation with a spectral color distance. Throws ConfigError
// for cubes smaller than 8x8, targets below 4 or a grid cell larger than the
// image.
SlicResult slic_segment(const HsiCube& cube, const SlicParams& params);

// Makes every tile 4-connected. Fragments smaller than min_fragment pixels
// join their largest adjacent tile; larger fragments become new tiles. Ids
// stay in original order, so an already-connected map is unchanged.
TileMap enforce_connectivity(const HsiCube& cube, TileMap map,
                             std::size_t min_fragment);

// Rebuilds the tile list (pixels, centroid, mean spectrum) from an assignment
// whose ids are contiguous.
std::vector<Tile> compute_tile_stats(const HsiCube& cube,
                                     std::span<const std::uint32_t> assignment);

// Majority label per tile; label_uniform iff the majority share is >= 99%.
void assign_tile_labels(TileMap& map, std::span<const std::uint8_t> label_map);

// True iff every tile's pixel set is 4-connected (BFS).
bool is_four_connected(const TileMap& map);

struct TilePatch {
  std::size_t size = 0;
  std::size_t channels = 0;
  std::vector<float> data;  // size x size x channels, channel-last
  bool cropped = false;     // some tile pixels fell outside the patch
  int offset_x = 0;         // patch (0, 0) corresponds to image (offset_x, offset_y)
  int offset_y = 0;
};

// Copies the tile's pixels into a zero patch. The bounding box is centered
// when it fits; otherwise the window is centered on the centroid and the
// overflow cropped.
TilePatch extract_tile_patch(const HsiCube& cube, const Tile& tile,
                             std::size_t patch_size = 48);

// "HST1", u32 width, u32 height, u32 tile count, then u32 ids per pixel.
// The JSON sidecar carries per-tile statistics.
void save_tile_map(const TileMap& map, const std::filesystem::path& path);
TileMap load_tile_map(const HsiCube& cube, const std::filesystem::path& path);

}  // namespace hsiseg
