#pragma once

// Confusion-matrix accumulation and the segmentation scores built on it:
// per-class and mean F1, overall accuracy, per-class and mean IoU.
// Rows are ground truth, columns are predictions. Pixels whose ground truth
// is the ignore index are never counted.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "drd/data.hpp"

namespace drd::metrics {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::int64_t num_classes);

  std::int64_t num_classes() const { return m_; }
  std::int64_t at(std::int64_t truth, std::int64_t pred) const;
  void add(std::int64_t truth, std::int64_t pred, std::int64_t count = 1);

  // pred and truth are (H, W) or (B, H, W) index tensors of equal shape.
  // pred must not contain the ignore index.
  void accumulate(const torch::Tensor& pred, const torch::Tensor& truth,
                  std::int64_t ignore_index = data::kIgnoreIndex);

  ConfusionMatrix& merge(const ConfusionMatrix& other);

  std::int64_t total() const;
  std::int64_t row_sum(std::int64_t k) const;
  std::int64_t col_sum(std::int64_t k) const;
  std::int64_t trace() const;

  bool operator==(const ConfusionMatrix& other) const = default;

 private:
  std::int64_t m_;
  std::vector<std::int64_t> counts_;
};

// Free-function form over label masks.
ConfusionMatrix accumulate(ConfusionMatrix cm, const data::LabelMask& pred, const data::LabelMask& truth);

struct ClassScores {
  std::vector<double> per_class;
  std::vector<bool> included;  // whether the class takes part in the mean
  double mean = 0.0;
};

// F1 = 2PR / (P + R) per class, 0 when P + R = 0. Classes absent from both
// ground truth and prediction are left out of the mean.
ClassScores f1_scores(const ConfusionMatrix& cm);

// trace / total. Throws on an empty matrix.
double overall_accuracy(const ConfusionMatrix& cm);

// IoU = tp / (row + col - tp); classes with an empty union are left out of
// the mean.
ClassScores mean_iou(const ConfusionMatrix& cm);

// Per-class F1/IoU, means, OA and pixel counts.
nlohmann::json metrics_json(const ConfusionMatrix& cm, const std::vector<std::string>& class_names = {});

}  // namespace drd::metrics
