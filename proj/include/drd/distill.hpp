#pragma once

// Pixel-wise probability distillation and assembly of the full training
// objective
//
//   total = l_ce + lambda1 * l_p - lambda2 * l_adv + lambda3 * (l_s + l_c)
//
// Score maps are (c, H, W) or (B, c, H, W) with the class axis at dim -3.

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "drd/relation.hpp"

namespace drd::distill {

inline constexpr double kProbabilityFloor = 1e-8;
inline constexpr std::int64_t kDefaultIgnoreIndex = 255;

struct LossWeights {
  double lambda1 = 10.0;  // pixel KL
  double lambda2 = 0.1;   // adversarial
  double lambda3 = 25.0;  // spatial + channel relation

  void validate() const;
};

struct LossBreakdown {
  double l_ce = 0.0;
  double l_p = 0.0;
  double l_adv = 0.0;
  double l_s = 0.0;
  double l_c = 0.0;
  double total = 0.0;

  // Recomputes the objective from the components.
  double recombine(const LossWeights& w) const;

  static std::string csv_header();
  std::string csv_row(std::int64_t step) const;
};

// Per-pixel softmax over the class axis.
torch::Tensor softmax_scores(const torch::Tensor& logits);

// Throws unless `probs` is a valid probability score map (c >= 2, entries
// >= 0, per-pixel sums within 1e-6 of one).
void check_probabilities(const torch::Tensor& probs, const char* what);

// (1/N) sum_i sum_j t_ij log(t_ij / s_ij) with s clamped below at 1e-8 and
// 0 log 0 = 0. Averaged over the batch as well when batched. The teacher
// distribution comes first.
torch::Tensor pixel_kl_loss(const torch::Tensor& teacher_probs, const torch::Tensor& student_probs);

// Scalar bookkeeping form.
LossBreakdown total_loss(double l_ce, double l_p, double l_adv, double l_s, double l_c, const LossWeights& w);

// Differentiable form; undefined tensors are treated as zero terms.
torch::Tensor total_objective(const torch::Tensor& l_ce, const torch::Tensor& l_p, const torch::Tensor& l_adv,
                              const torch::Tensor& l_s, const torch::Tensor& l_c, const LossWeights& w);

// Mean negative log-likelihood of the labeled class over pixels whose label
// is not `ignore_index`. logits (B,c,H,W) with labels (B,H,W) of kLong, or
// unbatched (c,H,W) with (H,W).
torch::Tensor masked_cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels,
                                   std::int64_t ignore_index = kDefaultIgnoreIndex);

// Bilinear resize of a score map to (h, w); a no-op when already that size.
torch::Tensor resize_scores(const torch::Tensor& scores, std::int64_t h, std::int64_t w);

struct RelationLossOptions {
  // Features are average-pooled to at most this many rows/cols before the
  // spatial map is formed.
  std::int64_t pool_h = 64;
  std::int64_t pool_w = 64;
  relation::RelationOptions relation;
};

// Spatial and channel alignment between teacher and student feature taps.
// Owns the learned 1x1 projection that lifts student channels to teacher
// width for the channel map; there is no projection when the widths match.
class DualRelationLossImpl : public torch::nn::Module {
 public:
  DualRelationLossImpl(std::int64_t student_channels, std::int64_t teacher_channels,
                       RelationLossOptions options = {});

  // Pools both taps to a common grid no larger than the configured bound.
  std::pair<torch::Tensor, torch::Tensor> align(const torch::Tensor& teacher_features,
                                                const torch::Tensor& student_features) const;

  torch::Tensor spatial(const torch::Tensor& teacher_features, const torch::Tensor& student_features) const;
  torch::Tensor channel(const torch::Tensor& teacher_features, const torch::Tensor& student_features);

  bool has_projection() const { return !projection_.is_empty(); }
  const RelationLossOptions& options() const { return options_; }

 private:
  RelationLossOptions options_;
  torch::nn::Conv2d projection_{nullptr};
};
TORCH_MODULE(DualRelationLoss);

}  // namespace drd::distill
