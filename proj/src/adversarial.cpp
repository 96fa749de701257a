#include "drd/adversarial.hpp"

#include <cmath>

#include <fmt/format.h>

#include "drd/error.hpp"
#include "drd/tensor_util.hpp"

namespace drd::adversarial {
namespace {

void check_finite_losses(const distill::LossBreakdown& b, double l_d, std::int64_t where) {
  const double values[] = {b.l_ce, b.l_p, b.l_adv, b.l_s, b.l_c, b.total, l_d};
  for (const double v : values) {
    if (!std::isfinite(v)) {
      throw Error(fmt::format(
          "non-finite loss in {} update: l_ce={} l_p={} l_adv={} l_s={} l_c={} total={} l_d={}",
          where == 0 ? "critic" : "student", b.l_ce, b.l_p, b.l_adv, b.l_s, b.l_c, b.total, l_d));
    }
  }
}

double value_of(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

class RequiresGradScope {
 public:
  RequiresGradScope(torch::nn::Module& m, bool flag) : module_(m) {
    for (auto& p : module_.parameters()) p.set_requires_grad(flag);
  }
  ~RequiresGradScope() {
    for (auto& p : module_.parameters()) p.set_requires_grad(true);
  }

 private:
  torch::nn::Module& module_;
};

}  // namespace

void DiscriminatorSpec::validate() const {
  if (conv_widths.size() < 2) {
    throw ValueError(fmt::format("discriminator needs at least 2 conv stages, got {}", conv_widths.size()));
  }
  for (const auto w : conv_widths) {
    if (w < 1) throw ValueError("discriminator widths must be positive");
  }
  if (downsample_stride < 1) throw ValueError("discriminator stride must be >= 1");
}

DiscriminatorImpl::DiscriminatorImpl(std::int64_t image_channels, std::int64_t num_classes, DiscriminatorSpec spec)
    : spec_(std::move(spec)), image_channels_(image_channels), num_classes_(num_classes) {
  spec_.validate();
  const auto stride = spec_.downsample_stride;
  const auto kernel = stride == 1 ? 3 : 2 * stride;
  const auto padding = stride == 1 ? 1 : stride / 2;
  auto in = image_channels + num_classes;
  for (std::size_t i = 0; i < spec_.conv_widths.size(); ++i) {
    const auto out = spec_.conv_widths[i];
    convs_.push_back(register_module(
        fmt::format("conv{}", i),
        layers::CountedConv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding))));
    in = out;
  }
  head_ = register_module("head", layers::CountedLinear(in, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& image, const torch::Tensor& score_map) {
  if (image.dim() != 4 || score_map.dim() != 4 || image.size(0) != score_map.size(0) ||
      image.size(2) != score_map.size(2) || image.size(3) != score_map.size(3)) {
    throw ShapeError(fmt::format("discriminator input mismatch: image {} vs score map {}", shape_str(image),
                                 shape_str(score_map)));
  }
  if (image.size(1) != image_channels_ || score_map.size(1) != num_classes_) {
    throw ShapeError(fmt::format("discriminator expects {} image bands and {} classes, got image {} and scores {}",
                                 image_channels_, num_classes_, shape_str(image), shape_str(score_map)));
  }
  auto x = torch::cat({image, score_map}, 1);
  for (auto& conv : convs_) x = torch::leaky_relu(conv->forward(x), spec_.leaky_slope);
  // Root-area pooling keeps the input-gradient norm independent of resolution.
  x = x.sum({2, 3}) / std::sqrt(static_cast<double>(x.size(2) * x.size(3)));
  return head_->forward(x).squeeze(1);
}

void DiscriminatorImpl::zero_head() {
  torch::NoGradGuard no_grad;
  head_->linear->weight.zero_();
  head_->linear->bias.zero_();
}

torch::Tensor discriminator_loss(const torch::Tensor& score_student, const torch::Tensor& score_teacher) {
  return score_student.mean() - score_teacher.mean();
}

torch::Tensor adversarial_term(const torch::Tensor& score_student) { return score_student.mean(); }

PenaltyResult gradient_penalty(Discriminator& critic, const torch::Tensor& image, const torch::Tensor& teacher_probs,
                               const torch::Tensor& student_probs, torch::Generator& generator) {
  const auto b = teacher_probs.size(0);
  const auto alpha = torch::rand({b, 1, 1, 1}, generator, teacher_probs.options());
  auto mixed = (alpha * teacher_probs.detach() + (1.0 - alpha) * student_probs.detach()).requires_grad_(true);
  const auto scores = critic->forward(image.detach(), mixed);
  const auto grads = torch::autograd::grad({scores.sum()}, {mixed}, /*grad_outputs=*/{}, /*retain_graph=*/true,
                                           /*create_graph=*/true)[0];
  const auto norms = grads.flatten(1).norm(2, 1);
  return {(norms - 1.0).square().mean(), norms.mean().item<double>()};
}

distill::LossBreakdown supervised_step(models::SegmentationNet& network, torch::optim::Optimizer& optimizer,
                                       const Batch& batch) {
  network->train();
  optimizer.zero_grad();
  const auto out = network->forward(batch.images);
  const auto l_ce = distill::masked_cross_entropy(out.logits, batch.labels, batch.ignore_index);
  distill::LossBreakdown b;
  b.l_ce = l_ce.item<double>();
  b.total = b.l_ce;
  check_finite_losses(b, 0.0, 1);
  l_ce.backward();
  optimizer.step();
  return b;
}

StepResult alternating_step(DistillationState& state, const Batch& batch, const distill::LossWeights& weights,
                            const StepToggles& toggles, const AdversarialOptions& options) {
  weights.validate();
  StepResult result;
  if (!toggles.any()) {
    result.losses = supervised_step(state.student, *state.student_optimizer, batch);
    return result;
  }
  if (toggles.use_adv && (state.discriminator.is_empty() || !state.discriminator_optimizer)) {
    throw Error("adversarial term enabled but no discriminator was set up");
  }
  if ((toggles.use_ls || toggles.use_lc) && state.relation.is_empty()) {
    throw Error("relation terms enabled but no relation loss was set up");
  }

  const auto checksum_before = options.verify_teacher_frozen ? parameter_checksum(*state.teacher) : 0;

  state.teacher->eval();
  models::SegOutput teacher_out;
  torch::Tensor teacher_probs;
  {
    torch::NoGradGuard no_grad;
    teacher_out = state.teacher->forward(batch.images);
    teacher_probs = distill::softmax_scores(teacher_out.logits);
  }

  state.student->train();
  const auto student_out = state.student->forward(batch.images);
  const auto student_probs = distill::softmax_scores(student_out.logits);

  if (toggles.use_adv) {
    auto& critic = state.discriminator;
    critic->train();
    state.discriminator_optimizer->zero_grad();
    const auto s_score = critic->forward(batch.images, student_probs.detach());
    const auto t_score = critic->forward(batch.images, teacher_probs);
    const auto l_d = discriminator_loss(s_score, t_score);
    const auto gp = gradient_penalty(critic, batch.images, teacher_probs, student_probs, state.penalty_generator);
    const auto critic_total = l_d + options.gp_weight * gp.penalty;
    result.l_d = l_d.item<double>();
    result.penalty = gp.penalty.item<double>();
    result.interp_grad_norm = gp.mean_grad_norm;
    check_finite_losses({}, result.l_d + result.penalty, 0);
    critic_total.backward();
    state.discriminator_optimizer->step();
  }

  state.student_optimizer->zero_grad();
  const auto l_ce = distill::masked_cross_entropy(student_out.logits, batch.labels, batch.ignore_index);
  torch::Tensor l_p, l_adv, l_s, l_c;
  if (toggles.use_lp) l_p = distill::pixel_kl_loss(teacher_probs, student_probs);
  if (toggles.use_adv) {
    RequiresGradScope frozen(*state.discriminator, false);
    l_adv = adversarial_term(state.discriminator->forward(batch.images, student_probs));
  }
  if (toggles.use_ls) l_s = state.relation->spatial(teacher_out.features, student_out.features);
  if (toggles.use_lc) l_c = state.relation->channel(teacher_out.features, student_out.features);
  const auto total = distill::total_objective(l_ce, l_p, l_adv, l_s, l_c, weights);

  auto& b = result.losses;
  b.l_ce = value_of(l_ce);
  b.l_p = value_of(l_p);
  b.l_adv = value_of(l_adv);
  b.l_s = value_of(l_s);
  b.l_c = value_of(l_c);
  b.total = value_of(total);
  check_finite_losses(b, result.l_d, 1);
  total.backward();
  state.student_optimizer->step();

  if (options.verify_teacher_frozen && parameter_checksum(*state.teacher) != checksum_before) {
    throw Error("teacher parameters changed during a distillation step");
  }
  return result;
}

}  // namespace drd::adversarial
