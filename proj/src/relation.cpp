#include "drd/relation.hpp"

#include <fmt/format.h>

#include "drd/error.hpp"
#include "drd/tensor_util.hpp"

namespace drd::relation {
namespace {

// Reshapes to (B, C, N) and remembers whether the input carried a batch axis.
std::pair<torch::Tensor, bool> as_rows(const torch::Tensor& features) {
  const bool batched = features.dim() == 4;
  auto f = batched ? features : features.unsqueeze(0);
  return {f.flatten(2), batched};
}

void check_budget(std::int64_t side, const RelationOptions& options, const char* kind) {
  if (side * side > options.max_elements) {
    throw ShapeError(fmt::format(
        "{} relation map would hold {}x{} = {} entries, above the budget of {}; "
        "pool the features with adapt_resolution first",
        kind, side, side, side * side, options.max_elements));
  }
}

torch::Tensor relation_loss(const torch::Tensor& teacher, const torch::Tensor& student, const char* kind) {
  if (teacher.sizes() != student.sizes()) {
    throw ShapeError(fmt::format("{} relation maps differ in shape: teacher {} vs student {}", kind,
                                 shape_str(teacher), shape_str(student)));
  }
  if (teacher.dim() < 2 || teacher.size(-1) != teacher.size(-2)) {
    throw ShapeError(fmt::format("{} relation map must be square, got {}", kind, shape_str(teacher)));
  }
  return (student - teacher).square().mean();
}

}  // namespace

void check_feature_map(const torch::Tensor& features) {
  if (!features.defined() || (features.dim() != 3 && features.dim() != 4)) {
    throw ShapeError(fmt::format("feature map must be (C,H,W) or (B,C,H,W), got {}", shape_str(features)));
  }
  for (const auto s : features.sizes()) {
    if (s < 1) throw ShapeError(fmt::format("feature map has an empty axis: {}", shape_str(features)));
  }
  require_finite(features, "feature map");
}

torch::Tensor stable_row_softmax(const torch::Tensor& affinity) {
  const auto row_max = std::get<0>(affinity.max(-1, /*keepdim=*/true));
  const auto e = (affinity - row_max).exp();
  return e / e.sum(-1, /*keepdim=*/true);
}

torch::Tensor spatial_relation(const torch::Tensor& features, const RelationOptions& options) {
  check_feature_map(features);
  auto [f, batched] = as_rows(features);
  check_budget(f.size(2), options, "spatial");
  // (B, N, C) x (B, C, N): entry (i, j) is F_i . F_j.
  auto s = stable_row_softmax(torch::bmm(f.transpose(1, 2), f));
  return batched ? s : s.squeeze(0);
}

torch::Tensor channel_relation(const torch::Tensor& features, const RelationOptions& options) {
  check_feature_map(features);
  auto [f, batched] = as_rows(features);
  check_budget(f.size(1), options, "channel");
  auto c = stable_row_softmax(torch::bmm(f, f.transpose(1, 2)));
  return batched ? c : c.squeeze(0);
}

torch::Tensor spatial_relation_loss(const torch::Tensor& teacher, const torch::Tensor& student) {
  return relation_loss(teacher, student, "spatial");
}

torch::Tensor channel_relation_loss(const torch::Tensor& teacher, const torch::Tensor& student) {
  return relation_loss(teacher, student, "channel");
}

torch::Tensor adapt_resolution(const torch::Tensor& features, std::int64_t target_h, std::int64_t target_w) {
  if (target_h <= 0 || target_w <= 0) {
    throw ShapeError(fmt::format("target resolution must be positive, got {}x{}", target_h, target_w));
  }
  if (features.dim() != 3 && features.dim() != 4) {
    throw ShapeError(fmt::format("feature map must be (C,H,W) or (B,C,H,W), got {}", shape_str(features)));
  }
  const auto h = features.size(-2);
  const auto w = features.size(-1);
  if (target_h > h || target_w > w) {
    throw ShapeError(fmt::format("cannot pool {}x{} features up to {}x{}", h, w, target_h, target_w));
  }
  if (target_h == h && target_w == w) return features;
  return torch::adaptive_avg_pool2d(features, {target_h, target_w});
}

}  // namespace drd::relation
