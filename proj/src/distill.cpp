#include "drd/distill.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "drd/error.hpp"
#include "drd/tensor_util.hpp"

namespace drd::distill {
namespace {

void require_finite_scalar(double v, const char* what) {
  if (!std::isfinite(v)) throw ValueError(fmt::format("{} is not finite ({})", what, v));
}

void check_score_rank(const torch::Tensor& t, const char* what) {
  if (!t.defined() || (t.dim() != 3 && t.dim() != 4)) {
    throw ShapeError(fmt::format("{} must be (c,H,W) or (B,c,H,W), got {}", what, shape_str(t)));
  }
  if (t.size(-3) < 2) throw ShapeError(fmt::format("{} needs at least 2 classes, got {}", what, shape_str(t)));
}

torch::Tensor as_double(const torch::Tensor& t) { return t.defined() ? t.to(torch::kDouble) : t; }

}  // namespace

void LossWeights::validate() const {
  for (const double v : {lambda1, lambda2, lambda3}) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ValueError(fmt::format("loss weights must be finite and >= 0, got ({}, {}, {})", lambda1, lambda2,
                                   lambda3));
    }
  }
}

double LossBreakdown::recombine(const LossWeights& w) const {
  return l_ce + w.lambda1 * l_p - w.lambda2 * l_adv + w.lambda3 * (l_s + l_c);
}

std::string LossBreakdown::csv_header() { return "step,l_ce,l_p,l_adv,l_s,l_c,total"; }

std::string LossBreakdown::csv_row(std::int64_t step) const {
  // 17 significant digits round-trip doubles exactly.
  return fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}", step, l_ce, l_p, l_adv, l_s, l_c, total);
}

torch::Tensor softmax_scores(const torch::Tensor& logits) {
  check_score_rank(logits, "logits");
  require_finite(logits, "logits");
  const auto class_max = std::get<0>(logits.max(-3, /*keepdim=*/true));
  const auto e = (logits - class_max).exp();
  return e / e.sum(-3, /*keepdim=*/true);
}

void check_probabilities(const torch::Tensor& probs, const char* what) {
  check_score_rank(probs, what);
  require_finite(probs, what);
  const auto p = probs.detach();
  if ((p < 0).any().item<bool>()) throw ValueError(fmt::format("{} has negative entries", what));
  const auto dev = (p.to(torch::kDouble).sum(-3) - 1.0).abs().max().item<double>();
  if (dev > 1e-6) {
    throw ValueError(fmt::format("{} per-pixel class sums deviate from 1 by {:.3g}", what, dev));
  }
}

torch::Tensor pixel_kl_loss(const torch::Tensor& teacher_probs, const torch::Tensor& student_probs) {
  if (teacher_probs.sizes() != student_probs.sizes()) {
    throw ShapeError(fmt::format("score maps differ in shape: teacher {} vs student {}", shape_str(teacher_probs),
                                 shape_str(student_probs)));
  }
  check_score_rank(teacher_probs, "teacher probabilities");
  const auto t = teacher_probs.detach();
  const auto per_entry = torch::xlogy(t, t) - t * student_probs.clamp_min(kProbabilityFloor).log();
  // Sum over classes, mean over pixels (and batch).
  return per_entry.sum(-3).mean();
}

LossBreakdown total_loss(double l_ce, double l_p, double l_adv, double l_s, double l_c, const LossWeights& w) {
  require_finite_scalar(l_ce, "l_ce");
  require_finite_scalar(l_p, "l_p");
  require_finite_scalar(l_adv, "l_adv");
  require_finite_scalar(l_s, "l_s");
  require_finite_scalar(l_c, "l_c");
  w.validate();
  LossBreakdown b{l_ce, l_p, l_adv, l_s, l_c, 0.0};
  b.total = b.recombine(w);
  return b;
}

torch::Tensor total_objective(const torch::Tensor& l_ce, const torch::Tensor& l_p, const torch::Tensor& l_adv,
                              const torch::Tensor& l_s, const torch::Tensor& l_c, const LossWeights& w) {
  w.validate();
  // Combined in double so the logged total matches a scalar recombination of
  // the logged components to rounding of doubles.
  auto total = as_double(l_ce);
  if (l_p.defined()) total = total + w.lambda1 * as_double(l_p);
  if (l_adv.defined()) total = total - w.lambda2 * as_double(l_adv);
  if (l_s.defined() || l_c.defined()) {
    auto relation = torch::zeros({}, total.options());
    if (l_s.defined()) relation = relation + as_double(l_s);
    if (l_c.defined()) relation = relation + as_double(l_c);
    total = total + w.lambda3 * relation;
  }
  return total;
}

torch::Tensor masked_cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels,
                                   std::int64_t ignore_index) {
  check_score_rank(logits, "logits");
  const bool batched = logits.dim() == 4;
  const auto lg = batched ? logits : logits.unsqueeze(0);
  const auto lb = batched ? labels : labels.unsqueeze(0);
  if (lb.dim() != 3 || lb.size(0) != lg.size(0) || lb.size(1) != lg.size(2) || lb.size(2) != lg.size(3)) {
    throw ShapeError(
        fmt::format("labels {} do not match logits {}", shape_str(labels), shape_str(logits)));
  }
  const auto targets = lb.to(torch::kLong);
  const auto kept = targets != ignore_index;
  if (!kept.any().item<bool>()) throw ValueError("every pixel is ignored; cross-entropy is undefined");
  const auto num_classes = lg.size(1);
  if (((targets < 0) | (targets >= num_classes)).logical_and(kept).any().item<bool>()) {
    throw ValueError(fmt::format("labels outside [0, {}) that are not the ignore index {}", num_classes,
                                 ignore_index));
  }
  const auto log_probs = torch::log_softmax(lg, 1);
  return torch::nll_loss2d(log_probs, targets, /*weight=*/{}, at::Reduction::Mean, ignore_index);
}

torch::Tensor resize_scores(const torch::Tensor& scores, std::int64_t h, std::int64_t w) {
  if (scores.size(-2) == h && scores.size(-1) == w) return scores;
  const bool batched = scores.dim() == 4;
  auto s = batched ? scores : scores.unsqueeze(0);
  s = torch::nn::functional::interpolate(
      s, torch::nn::functional::InterpolateFuncOptions()
             .size(std::vector<std::int64_t>{h, w})
             .mode(torch::kBilinear)
             .align_corners(false));
  return batched ? s : s.squeeze(0);
}

DualRelationLossImpl::DualRelationLossImpl(std::int64_t student_channels, std::int64_t teacher_channels,
                                           RelationLossOptions options)
    : options_(options) {
  if (options_.pool_h < 1 || options_.pool_w < 1) {
    throw ValueError(fmt::format("relation pool size must be positive, got {}x{}", options_.pool_h,
                                 options_.pool_w));
  }
  if (student_channels != teacher_channels) {
    projection_ = register_module(
        "projection", torch::nn::Conv2d(torch::nn::Conv2dOptions(student_channels, teacher_channels, 1).bias(false)));
    torch::nn::init::kaiming_normal_(projection_->weight, 0.0, torch::kFanIn, torch::kLinear);
  }
}

std::pair<torch::Tensor, torch::Tensor> DualRelationLossImpl::align(const torch::Tensor& teacher_features,
                                                                    const torch::Tensor& student_features) const {
  const auto h = std::min({teacher_features.size(-2), student_features.size(-2), options_.pool_h});
  const auto w = std::min({teacher_features.size(-1), student_features.size(-1), options_.pool_w});
  return {relation::adapt_resolution(teacher_features, h, w), relation::adapt_resolution(student_features, h, w)};
}

torch::Tensor DualRelationLossImpl::spatial(const torch::Tensor& teacher_features,
                                            const torch::Tensor& student_features) const {
  const auto [t, s] = align(teacher_features.detach(), student_features);
  return relation::spatial_relation_loss(relation::spatial_relation(t, options_.relation),
                                         relation::spatial_relation(s, options_.relation));
}

torch::Tensor DualRelationLossImpl::channel(const torch::Tensor& teacher_features,
                                            const torch::Tensor& student_features) {
  const auto s = has_projection() ? projection_->forward(student_features) : student_features;
  return relation::channel_relation_loss(relation::channel_relation(teacher_features.detach(), options_.relation),
                                         relation::channel_relation(s, options_.relation));
}

}  // namespace drd::distill
