#include "drd/models.hpp"

#include <cmath>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "drd/checkpoint.hpp"
#include "drd/error.hpp"

namespace drd::models {
namespace {

using layers::ConvBnRelu;
using layers::CountedConv2d;

constexpr std::array<std::int64_t, 4> kPyramidBins{1, 2, 3, 6};

std::int64_t scaled(std::int64_t channels, double width) {
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(channels * width + 1e-9)));
}

torch::Tensor upsample_to(const torch::Tensor& x, std::int64_t h, std::int64_t w, bool align_corners) {
  if (x.size(-2) == h && x.size(-1) == w) return x;
  return torch::nn::functional::interpolate(x, torch::nn::functional::InterpolateFuncOptions()
                                                   .size(std::vector<std::int64_t>{h, w})
                                                   .mode(torch::kBilinear)
                                                   .align_corners(align_corners));
}

class BasicBlockImpl : public torch::nn::Module {
 public:
  static constexpr std::int64_t kExpansion = 1;

  BasicBlockImpl(std::int64_t in, std::int64_t planes, std::int64_t stride, std::int64_t dilation) {
    conv1_ = register_module("conv1", ConvBnRelu(in, planes, 3, stride, dilation));
    conv2_ = register_module("conv2", ConvBnRelu(planes, planes, 3, 1, dilation, /*relu=*/false));
    if (stride != 1 || in != planes * kExpansion) {
      down_ = register_module("downsample", ConvBnRelu(in, planes * kExpansion, 1, stride, 1, false));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto identity = down_.is_empty() ? x : down_->forward(x);
    return torch::relu(conv2_->forward(conv1_->forward(x)) + identity);
  }

 private:
  ConvBnRelu conv1_{nullptr}, conv2_{nullptr}, down_{nullptr};
};
TORCH_MODULE(BasicBlock);

class BottleneckImpl : public torch::nn::Module {
 public:
  static constexpr std::int64_t kExpansion = 4;

  BottleneckImpl(std::int64_t in, std::int64_t planes, std::int64_t stride, std::int64_t dilation) {
    conv1_ = register_module("conv1", ConvBnRelu(in, planes, 1));
    conv2_ = register_module("conv2", ConvBnRelu(planes, planes, 3, stride, dilation));
    conv3_ = register_module("conv3", ConvBnRelu(planes, planes * kExpansion, 1, 1, 1, false));
    if (stride != 1 || in != planes * kExpansion) {
      down_ = register_module("downsample", ConvBnRelu(in, planes * kExpansion, 1, stride, 1, false));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto identity = down_.is_empty() ? x : down_->forward(x);
    return torch::relu(conv3_->forward(conv2_->forward(conv1_->forward(x))) + identity);
  }

 private:
  ConvBnRelu conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr}, down_{nullptr};
};
TORCH_MODULE(Bottleneck);

class PyramidPoolingImpl : public torch::nn::Module {
 public:
  PyramidPoolingImpl(std::int64_t in, std::int64_t reduced) {
    for (std::size_t i = 0; i < kPyramidBins.size(); ++i) {
      stages_.push_back(register_module(fmt::format("stage{}", i), ConvBnRelu(in, reduced, 1)));
    }
    bottleneck_ = register_module(
        "bottleneck", ConvBnRelu(in + static_cast<std::int64_t>(kPyramidBins.size()) * reduced, reduced, 3));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    const auto h = x.size(-2);
    const auto w = x.size(-1);
    std::vector<torch::Tensor> parts{x};
    for (std::size_t i = 0; i < kPyramidBins.size(); ++i) {
      auto pooled = torch::adaptive_avg_pool2d(x, {kPyramidBins[i], kPyramidBins[i]});
      parts.push_back(upsample_to(stages_[i]->forward(pooled), h, w, /*align_corners=*/true));
    }
    return bottleneck_->forward(torch::cat(parts, 1));
  }

 private:
  std::vector<ConvBnRelu> stages_;
  ConvBnRelu bottleneck_{nullptr};
};
TORCH_MODULE(PyramidPooling);

struct ResNetLayout {
  bool bottleneck;
  std::array<std::int64_t, 4> blocks;
};

ResNetLayout layout_of(Backbone b) {
  switch (b) {
    case Backbone::resnet101:
      return {true, {3, 4, 23, 3}};
    case Backbone::resnet18:
    case Backbone::resnet18_half:
      return {false, {2, 2, 2, 2}};
    case Backbone::tiny_cnn:
      break;
  }
  throw ValueError("tiny_cnn has no ResNet layout");
}

// Appends one residual layer's blocks to `seq`.
template <typename Block>
void append_layer(torch::nn::Sequential& seq, std::int64_t& in, std::int64_t planes, std::int64_t blocks,
                  std::int64_t stride, std::int64_t dilation) {
  seq->push_back(Block(in, planes, stride, dilation));
  in = planes * Block::Impl::kExpansion;
  for (std::int64_t i = 1; i < blocks; ++i) seq->push_back(Block(in, planes, 1, dilation));
}

// tiny_cnn base widths at width 1.0: stem, downsample, two dilated convs.
constexpr std::array<std::int64_t, 4> kTinyWidths{24, 48, 48, 48};

}  // namespace

std::string_view to_string(Backbone b) {
  switch (b) {
    case Backbone::resnet101: return "resnet101";
    case Backbone::resnet18: return "resnet18";
    case Backbone::resnet18_half: return "resnet18_half";
    case Backbone::tiny_cnn: return "tiny_cnn";
  }
  return "?";
}

std::string_view to_string(Head h) { return h == Head::ppm ? "ppm" : "none"; }

Backbone backbone_from_string(std::string_view name) {
  if (name == "resnet101") return Backbone::resnet101;
  if (name == "resnet18") return Backbone::resnet18;
  if (name == "resnet18_half" || name == "resnet18(0.5)") return Backbone::resnet18_half;
  if (name == "tiny_cnn") return Backbone::tiny_cnn;
  throw ValueError(fmt::format("unknown backbone '{}'", name));
}

Head head_from_string(std::string_view name) {
  if (name == "ppm") return Head::ppm;
  if (name == "none") return Head::none;
  throw ValueError(fmt::format("unknown head '{}'", name));
}

void ModelSpec::validate() const {
  if (!(width_multiplier > 0.0 && width_multiplier <= 1.0)) {
    throw ValueError(fmt::format("width_multiplier must lie in (0, 1], got {}", width_multiplier));
  }
  if (num_classes < 2) throw ValueError(fmt::format("num_classes must be >= 2, got {}", num_classes));
  if (in_channels < 1 || in_channels > 4) {
    throw ValueError(fmt::format("in_channels must be 1..4, got {}", in_channels));
  }
  if (pretrained_path && !std::filesystem::exists(*pretrained_path)) {
    throw IoError(fmt::format("pretrained checkpoint '{}' does not exist", pretrained_path->string()));
  }
}

double ModelSpec::effective_width() const {
  return backbone == Backbone::resnet18_half ? 0.5 * width_multiplier : width_multiplier;
}

ModelSpec ModelSpec::named(std::string_view name, std::int64_t num_classes) {
  ModelSpec s;
  if (const auto at = name.find('@'); at != std::string_view::npos) {
    num_classes = std::stoll(std::string(name.substr(at + 1)));
    name = name.substr(0, at);
  }
  s.backbone = backbone_from_string(name);
  s.num_classes = num_classes;
  return s;
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"backbone", to_string(s.backbone)},
                     {"head", to_string(s.head)},
                     {"num_classes", s.num_classes},
                     {"width_multiplier", s.width_multiplier},
                     {"in_channels", s.in_channels}};
  if (s.pretrained_path) j["pretrained_path"] = s.pretrained_path->string();
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  s = ModelSpec{};
  s.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  s.head = head_from_string(j.value("head", std::string("ppm")));
  s.num_classes = j.at("num_classes").get<std::int64_t>();
  s.width_multiplier = j.value("width_multiplier", 1.0);
  s.in_channels = j.value("in_channels", std::int64_t{3});
  if (j.contains("pretrained_path") && !j.at("pretrained_path").is_null()) {
    s.pretrained_path = j.at("pretrained_path").get<std::string>();
  }
}

SegmentationNetImpl::SegmentationNetImpl(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const double width = spec_.effective_width();
  stem_ = torch::nn::Sequential();
  stages_early_ = torch::nn::Sequential();
  stages_late_ = torch::nn::Sequential();
  std::int64_t deep_channels = 0;
  std::int64_t mid_channels = 0;

  if (spec_.backbone == Backbone::tiny_cnn) {
    std::array<std::int64_t, 4> c{};
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = scaled(kTinyWidths[i], width);
    stem_->push_back(ConvBnRelu(spec_.in_channels, c[0], 3, 2));
    stem_->push_back(ConvBnRelu(c[0], c[1], 3, 1));
    stages_late_->push_back(ConvBnRelu(c[1], c[2], 3, 1, 2));
    stages_late_->push_back(ConvBnRelu(c[2], c[3], 3, 1, 4));
    stage_widths_ = {c[0], c[1], c[2], c[3]};
    deep_channels = c[3];
  } else {
    const auto layout = layout_of(spec_.backbone);
    const auto w64 = scaled(64, width);
    const auto w128 = scaled(128, width);
    stem_->push_back(ConvBnRelu(spec_.in_channels, w64, 3, 2));
    stem_->push_back(ConvBnRelu(w64, w64, 3));
    stem_->push_back(ConvBnRelu(w64, w128, 3));
    stem_->push_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(3).stride(2).padding(1)));
    std::int64_t in = w128;
    stage_widths_.push_back(w128);
    const std::array<std::int64_t, 4> planes{scaled(64, width), scaled(128, width), scaled(256, width),
                                             scaled(512, width)};
    const std::array<std::int64_t, 4> strides{1, 2, 1, 1};
    const std::array<std::int64_t, 4> dilations{1, 1, 2, 4};
    for (std::size_t i = 0; i < 4; ++i) {
      auto& stage = i < 3 ? stages_early_ : stages_late_;
      if (layout.bottleneck) {
        append_layer<Bottleneck>(stage, in, planes[i], layout.blocks[i], strides[i], dilations[i]);
      } else {
        append_layer<BasicBlock>(stage, in, planes[i], layout.blocks[i], strides[i], dilations[i]);
      }
      stage_widths_.push_back(in);
      if (i == 2) mid_channels = in;
    }
    deep_channels = in;
  }
  register_module("stem", stem_);
  register_module("stages_early", stages_early_);
  register_module("stages_late", stages_late_);

  if (spec_.head == Head::ppm) {
    tap_channels_ = std::max<std::int64_t>(1, deep_channels / 4);
    head_ = torch::nn::AnyModule(PyramidPooling(deep_channels, tap_channels_));
  } else {
    tap_channels_ = deep_channels;
    head_ = torch::nn::AnyModule(torch::nn::Identity());
  }
  register_module("head", head_.ptr());
  classifier_ = register_module(
      "classifier", CountedConv2d(torch::nn::Conv2dOptions(tap_channels_, spec_.num_classes, 1).bias(true)));

  if (mid_channels > 0) {
    const auto aux_width = std::max<std::int64_t>(1, deep_channels / 4);
    aux_ = torch::nn::Sequential(
        ConvBnRelu(mid_channels, aux_width, 3),
        CountedConv2d(torch::nn::Conv2dOptions(aux_width, spec_.num_classes, 1).bias(true)));
    register_module("aux", aux_);
  }
  layers::init_weights(*this);
}

SegmentationNetImpl::Encoded SegmentationNetImpl::encode(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != spec_.in_channels) {
    throw ShapeError(fmt::format("expected images (B, {}, H, W), got [{}]", spec_.in_channels,
                                 fmt::join(images.sizes(), ", ")));
  }
  auto x = stem_->forward(images);
  Encoded e;
  e.mid = stages_early_->is_empty() ? x : stages_early_->forward(x);
  e.deep = stages_late_->is_empty() ? e.mid : stages_late_->forward(e.mid);
  return e;
}

SegOutput SegmentationNetImpl::forward(const torch::Tensor& images) {
  const auto e = encode(images);
  SegOutput out;
  out.features = head_.forward(e.deep);
  out.logits = upsample_to(classifier_->forward(out.features), images.size(2), images.size(3), false);
  return out;
}

SegOutput SegmentationNetImpl::forward_with_aux(const torch::Tensor& images) {
  const auto e = encode(images);
  SegOutput out;
  out.features = head_.forward(e.deep);
  out.logits = upsample_to(classifier_->forward(out.features), images.size(2), images.size(3), false);
  if (!aux_.is_empty()) {
    out.aux_logits = upsample_to(aux_->forward(e.mid), images.size(2), images.size(3), false);
  }
  return out;
}

SegmentationNet build_model(const ModelSpec& spec, std::uint64_t seed) {
  torch::manual_seed(seed);
  SegmentationNet net(spec);
  if (spec.pretrained_path) checkpoint::load_weights(*net, *spec.pretrained_path);
  return net;
}

double count_params(const torch::nn::Module& network) {
  std::int64_t n = 0;
  for (const auto& p : network.parameters()) {
    if (p.requires_grad()) n += p.numel();
  }
  return static_cast<double>(n) / 1e6;
}

namespace {

struct TracedForward {
  double flops = 0.0;
  std::array<std::int64_t, 3> tap{};
};

TracedForward trace(SegmentationNet& network, std::int64_t h, std::int64_t w, layers::FlopConvention convention) {
  if (h <= 0 || w <= 0) throw ShapeError(fmt::format("input resolution must be positive, got {}x{}", h, w));
  const bool was_training = network->is_training();
  network->eval();
  torch::NoGradGuard no_grad;
  const auto input = torch::zeros({1, network->spec().in_channels, h, w});
  TracedForward t;
  {
    layers::FlopCounter counter(convention);
    const auto out = network->forward_with_aux(input);
    t.flops = counter.flops();
    t.tap = {out.features.size(1), out.features.size(2), out.features.size(3)};
  }
  network->train(was_training);
  return t;
}

}  // namespace

double count_flops(SegmentationNet& network, std::int64_t h, std::int64_t w, layers::FlopConvention convention) {
  return trace(network, h, w, convention).flops / 1e9;
}

void to_json(nlohmann::json& j, const ModelReport& r) {
  j = nlohmann::json{{"name", r.name},
                     {"params_millions", r.params_millions},
                     {"flops_giga", r.flops_giga},
                     {"input_hw", {r.input_h, r.input_w}},
                     {"tap_shape", r.tap_shape},
                     {"flop_convention", r.flop_convention}};
}

ModelReport model_report(SegmentationNet& network, std::int64_t h, std::int64_t w,
                         layers::FlopConvention convention) {
  const auto t = trace(network, h, w, convention);
  ModelReport r;
  r.name = std::string(to_string(network->spec().backbone));
  r.params_millions = count_params(*network);
  r.flops_giga = t.flops / 1e9;
  r.input_h = h;
  r.input_w = w;
  r.tap_shape = t.tap;
  r.flop_convention = convention == layers::FlopConvention::two_per_mac ? "two_per_mac" : "multiply_accumulate";
  return r;
}

}  // namespace drd::models
