#include "drd/metrics.hpp"

#include <fmt/format.h>

#include "drd/error.hpp"
#include "drd/tensor_util.hpp"

namespace drd::metrics {

ConfusionMatrix::ConfusionMatrix(std::int64_t num_classes)
    : m_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw ValueError(fmt::format("confusion matrix needs >= 1 class, got {}", num_classes));
}

std::int64_t ConfusionMatrix::at(std::int64_t truth, std::int64_t pred) const {
  return counts_[static_cast<std::size_t>(truth * m_ + pred)];
}

void ConfusionMatrix::add(std::int64_t truth, std::int64_t pred, std::int64_t count) {
  if (truth < 0 || truth >= m_ || pred < 0 || pred >= m_) {
    throw ValueError(fmt::format("cell ({}, {}) outside a {}-class matrix", truth, pred, m_));
  }
  counts_[static_cast<std::size_t>(truth * m_ + pred)] += count;
}

void ConfusionMatrix::accumulate(const torch::Tensor& pred, const torch::Tensor& truth, std::int64_t ignore_index) {
  if (pred.sizes() != truth.sizes()) {
    throw ShapeError(fmt::format("prediction {} and ground truth {} differ in shape", shape_str(pred),
                                 shape_str(truth)));
  }
  const auto p = pred.to(torch::kLong).flatten();
  const auto t = truth.to(torch::kLong).flatten();
  const auto keep = t != ignore_index;
  const auto pk = p.masked_select(keep);
  const auto tk = t.masked_select(keep);
  if (pk.numel() == 0) return;
  if (((pk < 0) | (pk >= m_)).any().item<bool>()) {
    throw ValueError(fmt::format("predictions must lie in [0, {})", m_));
  }
  if (((tk < 0) | (tk >= m_)).any().item<bool>()) {
    throw ValueError(fmt::format("ground truth outside [0, {}) that is not the ignore index", m_));
  }
  const auto cells = torch::bincount(tk * m_ + pk, /*weights=*/{}, m_ * m_);
  const auto* c = cells.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += c[i];
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.m_ != m_) throw ShapeError(fmt::format("cannot merge {}- and {}-class matrices", m_, other.m_));
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t s = 0;
  for (const auto c : counts_) s += c;
  return s;
}

std::int64_t ConfusionMatrix::row_sum(std::int64_t k) const {
  std::int64_t s = 0;
  for (std::int64_t j = 0; j < m_; ++j) s += at(k, j);
  return s;
}

std::int64_t ConfusionMatrix::col_sum(std::int64_t k) const {
  std::int64_t s = 0;
  for (std::int64_t i = 0; i < m_; ++i) s += at(i, k);
  return s;
}

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t s = 0;
  for (std::int64_t k = 0; k < m_; ++k) s += at(k, k);
  return s;
}

ConfusionMatrix accumulate(ConfusionMatrix cm, const data::LabelMask& pred, const data::LabelMask& truth) {
  cm.accumulate(pred.data, truth.data, truth.ignore_index);
  return cm;
}

namespace {

double finish_mean(ClassScores& s) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < s.per_class.size(); ++k) {
    if (s.included[k]) {
      sum += s.per_class[k];
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

}  // namespace

ClassScores f1_scores(const ConfusionMatrix& cm) {
  const auto m = cm.num_classes();
  ClassScores s;
  s.per_class.assign(static_cast<std::size_t>(m), 0.0);
  s.included.assign(static_cast<std::size_t>(m), false);
  for (std::int64_t k = 0; k < m; ++k) {
    const auto tp = static_cast<double>(cm.at(k, k));
    const auto row = static_cast<double>(cm.row_sum(k));
    const auto col = static_cast<double>(cm.col_sum(k));
    s.included[static_cast<std::size_t>(k)] = row > 0 || col > 0;
    const double precision = col > 0 ? tp / col : 0.0;
    const double recall = row > 0 ? tp / row : 0.0;
    if (precision + recall > 0) s.per_class[static_cast<std::size_t>(k)] = 2 * precision * recall / (precision + recall);
  }
  s.mean = finish_mean(s);
  return s;
}

double overall_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw ValueError("overall accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

ClassScores mean_iou(const ConfusionMatrix& cm) {
  const auto m = cm.num_classes();
  ClassScores s;
  s.per_class.assign(static_cast<std::size_t>(m), 0.0);
  s.included.assign(static_cast<std::size_t>(m), false);
  for (std::int64_t k = 0; k < m; ++k) {
    const auto tp = static_cast<double>(cm.at(k, k));
    const auto uni = static_cast<double>(cm.row_sum(k) + cm.col_sum(k)) - tp;
    if (uni > 0) {
      s.per_class[static_cast<std::size_t>(k)] = tp / uni;
      s.included[static_cast<std::size_t>(k)] = true;
    }
  }
  s.mean = finish_mean(s);
  return s;
}

nlohmann::json metrics_json(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  const auto f1 = f1_scores(cm);
  const auto iou = mean_iou(cm);
  nlohmann::json per_class = nlohmann::json::array();
  for (std::int64_t k = 0; k < cm.num_classes(); ++k) {
    const auto i = static_cast<std::size_t>(k);
    per_class.push_back({{"class", i < class_names.size() ? class_names[i] : std::to_string(k)},
                         {"f1", f1.per_class[i]},
                         {"iou", iou.per_class[i]},
                         {"included", iou.included[i]},
                         {"truth_pixels", cm.row_sum(k)},
                         {"predicted_pixels", cm.col_sum(k)}});
  }
  return nlohmann::json{{"per_class", per_class},
                        {"mean_f1", f1.mean},
                        {"miou", iou.mean},
                        {"oa", cm.total() > 0 ? overall_accuracy(cm) : 0.0},
                        {"pixels", cm.total()}};
}

}  // namespace drd::metrics
