#pragma once

// Teacher/student segmentation networks and their size accounting.
//
// The ResNet family follows the dilated PSPNet layout used by the common
// segmentation-distillation benchmarks: a three-conv deep stem, output stride
// 8 (layer3/layer4 dilated by 2/4), a pyramid pooling head with bins
// (1, 2, 3, 6) reducing to a quarter of the backbone width, and an auxiliary
// 3x3 head on layer3. tiny_cnn is a desk-scale stand-in under 100k params.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "drd/layers.hpp"

namespace drd::models {

enum class Backbone { resnet101, resnet18, resnet18_half, tiny_cnn };
enum class Head { ppm, none };

std::string_view to_string(Backbone b);
std::string_view to_string(Head h);
Backbone backbone_from_string(std::string_view name);
Head head_from_string(std::string_view name);

struct ModelSpec {
  Backbone backbone = Backbone::tiny_cnn;
  Head head = Head::ppm;
  std::int64_t num_classes = 6;
  double width_multiplier = 1.0;
  std::int64_t in_channels = 3;
  std::optional<std::filesystem::path> pretrained_path;

  void validate() const;
  // resnet18_half folds its implicit 0.5 into this.
  double effective_width() const;

  // "resnet101", "resnet18", "resnet18_half" / "resnet18(0.5)", "tiny_cnn",
  // optionally suffixed with "@<classes>".
  static ModelSpec named(std::string_view name, std::int64_t num_classes = 19);
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

struct SegOutput {
  torch::Tensor features;  // (B, C, h, w) encoder tap, after the pyramid head
  torch::Tensor logits;    // (B, classes, H, W) at input resolution
  torch::Tensor aux_logits;  // only from forward_with_aux on models with an auxiliary head
};

class SegmentationNetImpl : public torch::nn::Module {
 public:
  explicit SegmentationNetImpl(ModelSpec spec);

  SegOutput forward(const torch::Tensor& images);
  // Also evaluates the auxiliary head. Training never uses it; it exists so
  // model size and cost match the reference PSPNet layout.
  SegOutput forward_with_aux(const torch::Tensor& images);

  const ModelSpec& spec() const { return spec_; }
  std::int64_t tap_channels() const { return tap_channels_; }
  // Channel widths of the backbone stages, stem first.
  const std::vector<std::int64_t>& stage_widths() const { return stage_widths_; }
  bool has_aux_head() const { return !aux_.is_empty(); }

 private:
  struct Encoded {
    torch::Tensor mid;   // input to the auxiliary head
    torch::Tensor deep;  // input to the main head
  };
  Encoded encode(const torch::Tensor& images);

  ModelSpec spec_;
  std::int64_t tap_channels_ = 0;
  std::vector<std::int64_t> stage_widths_;
  torch::nn::Sequential stem_{nullptr};
  torch::nn::Sequential stages_early_{nullptr};  // up to the auxiliary tap
  torch::nn::Sequential stages_late_{nullptr};
  torch::nn::AnyModule head_;                    // pyramid pooling or identity
  layers::CountedConv2d classifier_{nullptr};
  torch::nn::Sequential aux_{nullptr};
};
TORCH_MODULE(SegmentationNet);

// Seeds the global generator with `seed` and builds the network. Loads
// spec.pretrained_path when set.
SegmentationNet build_model(const ModelSpec& spec, std::uint64_t seed = 0);

// Trainable parameters, in millions.
double count_params(const torch::nn::Module& network);

// FLOPs of one forward pass over a 1 x in_channels x h x w input, counting
// convolution and linear layers of every head (auxiliary included), in
// giga-FLOPs.
double count_flops(SegmentationNet& network, std::int64_t h, std::int64_t w,
                   layers::FlopConvention convention = layers::FlopConvention::multiply_accumulate);

struct ModelReport {
  std::string name;
  double params_millions = 0.0;
  double flops_giga = 0.0;
  std::int64_t input_h = 0;
  std::int64_t input_w = 0;
  std::array<std::int64_t, 3> tap_shape{};
  std::string flop_convention;
};

void to_json(nlohmann::json& j, const ModelReport& r);

ModelReport model_report(SegmentationNet& network, std::int64_t h, std::int64_t w,
                         layers::FlopConvention convention = layers::FlopConvention::multiply_accumulate);

}  // namespace drd::models
