#include "hsiseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "hsiseg/binary_io.hpp"
#include "hsiseg/classes.hpp"
#include "hsiseg/error.hpp"

namespace hsiseg {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : n_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw ConfigError("ConfusionMatrix: need at least one class");
}

ConfusionMatrix ConfusionMatrix::from_labels(std::span<const int> truth, std::span<const int> predicted,
                                             std::size_t num_classes) {
  if (truth.size() != predicted.size()) {
    throw ShapeError("confusion matrix: " + std::to_string(truth.size()) + " labels vs " +
                     std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

void ConfusionMatrix::add(int truth, int predicted, std::uint64_t count) {
  const auto n = static_cast<int>(n_);
  if (truth < 0 || truth >= n || predicted < 0 || predicted >= n) {
    throw DomainError("confusion matrix: class out of range (" + std::to_string(truth) + ", " +
                      std::to_string(predicted) + ")");
  }
  counts_[static_cast<std::size_t>(truth) * n_ + static_cast<std::size_t>(predicted)] += count;
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

MetricsReport per_class_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DomainError("per_class_metrics: empty confusion matrix");
  const std::size_t n = cm.num_classes();
  MetricsReport r;
  r.per_class.resize(n);
  std::size_t present = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t tp = cm.at(c, c), fn = 0, fp = 0;
    for (std::size_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fn += cm.at(c, o);
      fp += cm.at(o, c);
    }
    auto& m = r.per_class[c];
    m.present = tp + fn + fp > 0;
    if (!m.present) {
      r.warnings.push_back("class " + std::to_string(c) + " absent from truth and predictions");
      continue;
    }
    const auto d = [](std::uint64_t v) { return static_cast<double>(v); };
    m.recall = tp + fn > 0 ? d(tp) / d(tp + fn) : 0.0;
    m.f1 = 2.0 * d(tp) / (2.0 * d(tp) + d(fp) + d(fn));
    m.iou = d(tp) / d(tp + fp + fn);
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
    r.macro_iou += m.iou;
    ++present;
  }
  r.macro_recall /= static_cast<double>(present);
  r.macro_f1 /= static_cast<double>(present);
  r.macro_iou /= static_cast<double>(present);
  return r;
}

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels, const char* who) {
  if (scores.size() != labels.size()) {
    throw ShapeError(std::string(who) + ": scores and labels differ in length");
  }
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DomainError(std::string(who) + ": labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw DomainError(std::string(who) + ": non-finite score");
    (labels[i] == 1 ? pos : neg) = true;
  }
  if (!pos || !neg) throw DomainError(std::string(who) + ": needs both positive and negative samples");
}

std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels, "roc_auc");
  const auto order = order_by_score(scores);
  // Twice the Mann-Whitney count, kept integral: 2 per (pos > neg) pair, 1 per tie.
  std::uint64_t twice = 0, neg_below = 0, n_pos = 0, n_neg = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::uint64_t pos_here = 0, neg_here = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos_here : neg_here) += 1;
      ++j;
    }
    twice += pos_here * (2 * neg_below + neg_here);
    neg_below += neg_here;
    n_pos += pos_here;
    n_neg += neg_here;
    i = j;
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::vector<std::pair<double, double>> roc_curve(std::span<const double> scores,
                                                 std::span<const int> labels) {
  check_binary(scores, labels, "roc_curve");
  auto order = order_by_score(scores);
  std::reverse(order.begin(), order.end());
  double n_pos = 0, n_neg = 0;
  for (int l : labels) (l == 1 ? n_pos : n_neg) += 1;
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  double tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    pts.emplace_back(fp / n_neg, tp / n_pos);
  }
  return pts;
}

std::vector<double> tumor_probability(std::span<const float> probs, std::size_t num_classes) {
  if (num_classes < 2 || probs.size() % num_classes != 0) {
    throw ShapeError("tumor_probability: probabilities are not N x " + std::to_string(num_classes));
  }
  const std::size_t n = probs.size() / num_classes;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = probs[i * num_classes + kTumor];
    const double h = probs[i * num_classes + kHealthy];
    out[i] = t + h > 0.0 ? t / (t + h) : 0.5;
  }
  return out;
}

std::optional<double> tumor_auc(std::span<const float> probs, std::span<const int> truth,
                                std::size_t num_classes) {
  const auto p = tumor_probability(probs, num_classes);
  if (p.size() != truth.size()) throw ShapeError("tumor_auc: probabilities and labels differ in length");
  std::vector<double> s;
  std::vector<int> y;
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (truth[i] != kTumor && truth[i] != kHealthy) continue;
    s.push_back(p[i]);
    y.push_back(truth[i] == kTumor ? 1 : 0);
    (truth[i] == kTumor ? pos : neg) = true;
  }
  if (!pos || !neg) return std::nullopt;
  return roc_auc(s, y);
}

nlohmann::json metrics_json(const MetricsReport& report, std::optional<double> auc) {
  // Column order H, T, B as in the usual comparison table.
  const std::pair<const char*, int> cols[] = {{"H", kHealthy}, {"T", kTumor}, {"B", kBackground}};
  auto block = [&](auto field, double macro) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, c] : cols) {
      const auto idx = static_cast<std::size_t>(c);
      if (idx < report.per_class.size() && report.per_class[idx].present) {
        j[key] = report.per_class[idx].*field;
      } else {
        j[key] = nullptr;
      }
    }
    j["Avg"] = macro;
    return j;
  };
  nlohmann::json j;
  j["accuracy"] = block(&ClassMetrics::recall, report.macro_recall);
  j["f1"] = block(&ClassMetrics::f1, report.macro_f1);
  j["iou"] = block(&ClassMetrics::iou, report.macro_iou);
  j["auc"] = auc ? nlohmann::json(*auc) : nlohmann::json(nullptr);
  return j;
}

RgbImage render_overlay(const HsiCube& cube, const TileMap& map, std::span<const int> predictions,
                        double alpha) {
  if (map.width != cube.width() || map.height != cube.height()) {
    throw ShapeError("render_overlay: tile map and cube sizes differ");
  }
  if (predictions.size() != map.tiles.size()) {
    throw ShapeError("render_overlay: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(map.tiles.size()) + " tiles");
  }
  for (int p : predictions) {
    if (p < 0 || p >= kNumClasses) throw DomainError("render_overlay: prediction out of class range");
  }
  const std::size_t band = cube.channels() / 2;
  const std::size_t n = cube.num_pixels();
  float lo = cube.data()[band], hi = lo;
  for (std::size_t p = 0; p < n; ++p) {
    const float v = cube.data()[p * cube.channels() + band];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi > lo ? static_cast<double>(hi) - lo : 1.0;
  RgbImage img{cube.width(), cube.height(), std::vector<std::uint8_t>(n * 3)};
  for (std::size_t p = 0; p < n; ++p) {
    const double g = (cube.data()[p * cube.channels() + band] - lo) / range * 255.0;
    const auto& color = kClassColors[static_cast<std::size_t>(predictions[map.assignment[p]])];
    for (int k = 0; k < 3; ++k) {
      const double v = (1.0 - alpha) * g + alpha * color[k];
      img.rgb[p * 3 + k] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return img;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  const std::string header =
      "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

void save_ppm(const RgbImage& image, const std::filesystem::path& path) {
  io::write_file(path, encode_ppm(image));
}

}  // namespace hsiseg
