#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hsiseg/cube.hpp"
#include "hsiseg/tiling.hpp"

namespace hsiseg {

struct TileQuality {
  double intensity = 0.0;  // mean reflectance over pixels and channels
  double l2 = 0.0;         // mean L2 distance of member spectra to the tile mean
  double sam = 0.0;        // mean SAM distance to the tile mean, radians
  // Some member (or the mean) had no spectral angle; those pixels count as
  // angle 0.
  bool sam_degenerate = false;
};

// Parameters of the piecewise intensity factor and the two exponential
// uniformity factors of the loss weight.
struct WeightConfig {
  double intensity_low_break = 0.167;
  double intensity_high_break = 0.5;
  double intensity_low_slope = 6.0;    // w_I = slope * I below the low break
  double intensity_high_slope = -2.0;  // w_I = 1 + slope * (I - high break)
  double l2_base = 0.7;
  double sam_base = 0.4;

  void validate() const;
};

TileQuality compute_quality(const HsiCube& cube, const Tile& tile);

double intensity_factor(double intensity, const WeightConfig& cfg = {});
double l2_factor(double l2, const WeightConfig& cfg = {});
double sam_factor(double sam, const WeightConfig& cfg = {});

// Product of the three factors, clamped to [0, 1].
double loss_weight(const TileQuality& q, const WeightConfig& cfg = {});

// Percentile with linear interpolation between order statistics, p in [0, 1].
double percentile(std::vector<double> values, double p);

enum class RejectReason {
  kNone,
  kNonUniformLabel,
  kHighSam,
  kHighL2,
  kLowIntensity,
  kHighIntensity,
};

std::string to_string(RejectReason r);

struct FilterParams {
  double uniformity_percentile = 0.75;  // SAM and L2 must not exceed this
  double intensity_low_percentile = 0.10;
  double intensity_high_percentile = 0.90;
};

struct FilterResult {
  std::vector<bool> kept;
  std::vector<RejectReason> reason;  // first failing cut, kNone if kept
  double sam_cut = 0.0;
  double l2_cut = 0.0;
  double intensity_lo = 0.0;
  double intensity_hi = 0.0;

  std::size_t kept_count() const;
};

// Percentile cuts computed over the given set (one image). A tile survives
// iff SAM and L2 are at or below their upper cut, intensity lies within the
// two intensity cuts, and its label is uniform. Throws ConfigError on an
// empty input or fewer than 4 tiles.
FilterResult filter_high_quality(std::span<const TileQuality> qualities,
                                 const std::vector<bool>& label_uniform,
                                 const FilterParams& params = {});

// One JSON line per tile: {id, I, L2, SAM, weight, kept, reason}.
std::string quality_report_jsonl(std::span<const TileQuality> qualities,
                                 const FilterResult& filter,
                                 const WeightConfig& cfg = {});

}  // namespace hsiseg
