#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsiseg/cube.hpp"
#include "hsiseg/tiling.hpp"

namespace hsiseg {

// Rows are ground truth, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes = 3);

  static ConfusionMatrix from_labels(std::span<const int> truth, std::span<const int> predicted,
                                     std::size_t num_classes);

  void add(int truth, int predicted, std::uint64_t count = 1);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * n_ + predicted];
  }
  std::size_t num_classes() const { return n_; }
  std::uint64_t total() const;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct ClassMetrics {
  double recall = 0.0;  // reported as per-class accuracy
  double f1 = 0.0;
  double iou = 0.0;
  bool present = false;  // occurs in the truth or in the predictions
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double macro_iou = 0.0;
  std::vector<std::string> warnings;
};

// Macro averages skip classes absent from both truth and predictions. Throws
// DomainError on an empty matrix.
MetricsReport per_class_metrics(const ConfusionMatrix& cm);

// Mann-Whitney AUC with ties counted half; labels are 1 (positive) or 0.
// Throws DomainError unless both classes occur.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// ROC curve points (fpr, tpr), one per distinct score threshold, from (0, 0)
// to (1, 1).
std::vector<std::pair<double, double>> roc_curve(std::span<const double> scores,
                                                 std::span<const int> labels);

// p(tumor) / (p(tumor) + p(healthy)) per row of an N x 3 probability matrix.
std::vector<double> tumor_probability(std::span<const float> probs, std::size_t num_classes = 3);

// Tumor-vs-healthy AUC over samples whose truth is tumor or healthy.
std::optional<double> tumor_auc(std::span<const float> probs, std::span<const int> truth,
                                std::size_t num_classes = 3);

// {"accuracy": {"H","T","B","Avg"}, "f1": {...}, "iou": {...}, "auc": x|null}.
// Absent classes are reported as null.
nlohmann::json metrics_json(const MetricsReport& report, std::optional<double> auc);

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

inline constexpr double kOverlayAlpha = 0.45;

// Gray base from channel floor(C/2), min-max stretched, blended per pixel
// with the color of its tile's predicted class. Throws ShapeError when a
// tile has no prediction.
RgbImage render_overlay(const HsiCube& cube, const TileMap& map, std::span<const int> predictions,
                        double alpha = kOverlayAlpha);

// Binary PPM (P6).
void save_ppm(const RgbImage& image, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_ppm(const RgbImage& image);

}  // namespace hsiseg
