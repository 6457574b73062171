#include "hsiseg/quality.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "hsiseg/error.hpp"

namespace hsiseg {

void WeightConfig::validate() const {
  if (!(intensity_low_break < intensity_high_break)) {
    throw ConfigError("WeightConfig: intensity breakpoints must be ordered");
  }
  if (!(l2_base > 0.0 && l2_base < 1.0) || !(sam_base > 0.0 && sam_base < 1.0)) {
    throw ConfigError("WeightConfig: bases must lie in (0, 1)");
  }
}

TileQuality compute_quality(const HsiCube& cube, const Tile& tile) {
  TileQuality q;
  const std::size_t nl = cube.channels();
  if (tile.pixels.empty()) return q;
  std::vector<double> mean(nl, 0.0);
  double total = 0.0;
  for (auto p : tile.pixels) {
    const auto s = cube.spectrum(p);
    for (std::size_t l = 0; l < nl; ++l) {
      mean[l] += s[l];
      total += s[l];
    }
  }
  const double n = static_cast<double>(tile.pixels.size());
  for (double& v : mean) v /= n;
  q.intensity = total / (n * static_cast<double>(nl));

  double mean_norm = 0.0;
  for (double v : mean) mean_norm += v * v;
  mean_norm = std::sqrt(mean_norm);
  constexpr double kEps = 1e-12;

  double l2_sum = 0.0;
  double sam_sum = 0.0;
  for (auto p : tile.pixels) {
    const auto s = cube.spectrum(p);
    double d2 = 0.0, dot = 0.0, ns = 0.0;
    for (std::size_t l = 0; l < nl; ++l) {
      const double d = s[l] - mean[l];
      d2 += d * d;
      dot += s[l] * mean[l];
      ns += static_cast<double>(s[l]) * s[l];
    }
    l2_sum += std::sqrt(d2);
    ns = std::sqrt(ns);
    if (ns < kEps || mean_norm < kEps) {
      q.sam_degenerate = true;
    } else {
      sam_sum += std::acos(std::clamp(dot / (ns * mean_norm), -1.0, 1.0));
    }
  }
  q.l2 = l2_sum / n;
  q.sam = sam_sum / n;
  return q;
}

double intensity_factor(double intensity, const WeightConfig& cfg) {
  if (intensity <= cfg.intensity_low_break) return cfg.intensity_low_slope * intensity;
  if (intensity < cfg.intensity_high_break) return 1.0;
  return 1.0 + cfg.intensity_high_slope * (intensity - cfg.intensity_high_break);
}

double l2_factor(double l2, const WeightConfig& cfg) { return std::pow(cfg.l2_base, l2); }

double sam_factor(double sam, const WeightConfig& cfg) { return std::pow(cfg.sam_base, sam); }

double loss_weight(const TileQuality& q, const WeightConfig& cfg) {
  const double w = intensity_factor(q.intensity, cfg) * l2_factor(q.l2, cfg) *
                   sam_factor(q.sam, cfg);
  return std::clamp(w, 0.0, 1.0);
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ConfigError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::string to_string(RejectReason r) {
  switch (r) {
    case RejectReason::kNone: return "";
    case RejectReason::kNonUniformLabel: return "non-uniform label";
    case RejectReason::kHighSam: return "high SAM";
    case RejectReason::kHighL2: return "high L2";
    case RejectReason::kLowIntensity: return "low intensity";
    case RejectReason::kHighIntensity: return "high intensity";
  }
  return "";
}

std::size_t FilterResult::kept_count() const {
  return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true));
}

FilterResult filter_high_quality(std::span<const TileQuality> qualities,
                                 const std::vector<bool>& label_uniform,
                                 const FilterParams& params) {
  if (qualities.empty()) throw ConfigError("filter_high_quality: no tiles");
  if (qualities.size() < 4) {
    throw ConfigError("filter_high_quality: need at least 4 tiles for percentiles");
  }
  if (label_uniform.size() != qualities.size()) {
    throw ShapeError("filter_high_quality: label flags do not match tiles");
  }
  std::vector<double> sam, l2, inten;
  for (const auto& q : qualities) {
    sam.push_back(q.sam);
    l2.push_back(q.l2);
    inten.push_back(q.intensity);
  }
  FilterResult r;
  r.sam_cut = percentile(sam, params.uniformity_percentile);
  r.l2_cut = percentile(l2, params.uniformity_percentile);
  r.intensity_lo = percentile(inten, params.intensity_low_percentile);
  r.intensity_hi = percentile(inten, params.intensity_high_percentile);
  r.kept.resize(qualities.size());
  r.reason.resize(qualities.size());
  for (std::size_t i = 0; i < qualities.size(); ++i) {
    const auto& q = qualities[i];
    RejectReason why = RejectReason::kNone;
    if (!label_uniform[i]) {
      why = RejectReason::kNonUniformLabel;
    } else if (q.sam > r.sam_cut) {
      why = RejectReason::kHighSam;
    } else if (q.l2 > r.l2_cut) {
      why = RejectReason::kHighL2;
    } else if (q.intensity < r.intensity_lo) {
      why = RejectReason::kLowIntensity;
    } else if (q.intensity > r.intensity_hi) {
      why = RejectReason::kHighIntensity;
    }
    r.kept[i] = why == RejectReason::kNone;
    r.reason[i] = why;
  }
  return r;
}

std::string quality_report_jsonl(std::span<const TileQuality> qualities,
                                 const FilterResult& filter,
                                 const WeightConfig& cfg) {
  std::string out;
  for (std::size_t i = 0; i < qualities.size(); ++i) {
    const auto& q = qualities[i];
    nlohmann::json j{{"id", i},
                     {"I", q.intensity},
                     {"L2", q.l2},
                     {"SAM", q.sam},
                     {"weight", loss_weight(q, cfg)},
                     {"kept", static_cast<bool>(filter.kept[i])},
                     {"reason", to_string(filter.reason[i])}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace hsiseg
