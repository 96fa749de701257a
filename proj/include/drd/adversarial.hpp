#pragma once

// Holistic distillation: a critic conditioned on the raw image scores
// segmentation probability maps, trained WGAN-style with a gradient penalty
// to separate teacher maps from student maps, while the student learns to
// raise its own score.
//
//   l_d   = mean D(student) - mean D(teacher)   (+ gp_weight * penalty)
//   l_adv = mean D(student)                      (enters the objective as -lambda2 * l_adv)

#include <cstdint>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include "drd/distill.hpp"
#include "drd/layers.hpp"
#include "drd/models.hpp"

namespace drd::adversarial {

struct DiscriminatorSpec {
  std::vector<std::int64_t> conv_widths{64, 128, 256, 512};
  std::int64_t downsample_stride = 2;
  double leaky_slope = 0.2;

  void validate() const;
};

// Strided conv + leaky ReLU stages over the image concatenated with a score
// map, spatial sum divided by sqrt(H * W), then a linear score.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  DiscriminatorImpl(std::int64_t image_channels, std::int64_t num_classes, DiscriminatorSpec spec = {});

  // image (B, bands, H, W), score_map (B, classes, H, W) probabilities.
  // Returns one score per sample, shape (B).
  torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& score_map);

  // Zeroes the scalar head so every input scores exactly 0.
  void zero_head();

  const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  std::int64_t image_channels_;
  std::int64_t num_classes_;
  std::vector<layers::CountedConv2d> convs_;
  layers::CountedLinear head_{nullptr};
};
TORCH_MODULE(Discriminator);

// Batch means of the critic losses. Inputs are per-sample scores.
torch::Tensor discriminator_loss(const torch::Tensor& score_student, const torch::Tensor& score_teacher);
torch::Tensor adversarial_term(const torch::Tensor& score_student);

struct PenaltyResult {
  torch::Tensor penalty;     // mean over samples of (||grad||_2 - 1)^2, differentiable in D
  double mean_grad_norm = 0.0;
};

// Gradient penalty on score maps interpolated between teacher and student
// with per-sample uniform weights drawn from `generator`. The image channel
// is held fixed; the norm is taken over the score-map input.
PenaltyResult gradient_penalty(Discriminator& critic, const torch::Tensor& image, const torch::Tensor& teacher_probs,
                               const torch::Tensor& student_probs, torch::Generator& generator);

struct StepToggles {
  bool use_lp = true;
  bool use_adv = true;
  bool use_ls = true;
  bool use_lc = true;

  bool any() const { return use_lp || use_adv || use_ls || use_lc; }
};

struct AdversarialOptions {
  double gp_weight = 10.0;
  // Recompute the teacher checksum after every step and fail if it moved.
  bool verify_teacher_frozen = true;
};

struct Batch {
  torch::Tensor images;  // (B, bands, H, W) float
  torch::Tensor labels;  // (B, H, W) long
  std::int64_t ignore_index = distill::kDefaultIgnoreIndex;
};

// Everything one distillation run owns. Single-threaded use only.
struct DistillationState {
  models::SegmentationNet teacher{nullptr};
  models::SegmentationNet student{nullptr};
  Discriminator discriminator{nullptr};      // may be null when adversarial training is off
  distill::DualRelationLoss relation{nullptr};
  std::unique_ptr<torch::optim::Optimizer> student_optimizer;        // student + projection
  std::unique_ptr<torch::optim::Optimizer> discriminator_optimizer;  // may be null with the critic
  torch::Generator penalty_generator;  // interpolation weights only; never touches the global stream
};

struct StepResult {
  distill::LossBreakdown losses;
  double l_d = 0.0;              // critic loss without the penalty
  double penalty = 0.0;
  double interp_grad_norm = 0.0;
};

// One plain supervised update (cross-entropy only). Shared with teacher
// training so that an all-off distillation run is the same computation.
distill::LossBreakdown supervised_step(models::SegmentationNet& network, torch::optim::Optimizer& optimizer,
                                       const Batch& batch);

// One critic update then one student update. The teacher is run in eval mode
// under no-grad and must not change; NaN in any loss throws with the full
// breakdown. Terms whose toggle is off are neither computed nor logged
// (they read 0).
StepResult alternating_step(DistillationState& state, const Batch& batch, const distill::LossWeights& weights,
                            const StepToggles& toggles, const AdversarialOptions& options = {});

}  // namespace drd::adversarial
