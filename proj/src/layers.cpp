#include "drd/layers.hpp"

namespace drd::layers {
namespace {

thread_local FlopCounter* g_active = nullptr;

}  // namespace

FlopCounter::FlopCounter(FlopConvention convention) : convention_(convention), previous_(g_active) {
  g_active = this;
}

FlopCounter::~FlopCounter() { g_active = previous_; }

void FlopCounter::record(double macs, double bias_adds) {
  macs_ += macs;
  bias_adds_ += bias_adds;
}

double FlopCounter::flops() const {
  const double per_mac = convention_ == FlopConvention::two_per_mac ? 2.0 : 1.0;
  return per_mac * macs_ + bias_adds_;
}

FlopCounter* FlopCounter::active() { return g_active; }

CountedConv2dImpl::CountedConv2dImpl(const torch::nn::Conv2dOptions& options) {
  conv = register_module("conv", torch::nn::Conv2d(options));
}

torch::Tensor CountedConv2dImpl::forward(const torch::Tensor& x) {
  auto y = conv->forward(x);
  if (auto* counter = FlopCounter::active()) {
    const auto& o = conv->options;
    const auto per_output = static_cast<double>(o.in_channels() / o.groups()) * (*o.kernel_size())[0] *
                            (*o.kernel_size())[1];
    const auto outputs = static_cast<double>(y.numel());
    counter->record(outputs * per_output, o.bias() ? outputs : 0.0);
  }
  return y;
}

CountedLinearImpl::CountedLinearImpl(std::int64_t in_features, std::int64_t out_features, bool bias) {
  linear = register_module("linear",
                           torch::nn::Linear(torch::nn::LinearOptions(in_features, out_features).bias(bias)));
}

torch::Tensor CountedLinearImpl::forward(const torch::Tensor& x) {
  auto y = linear->forward(x);
  if (auto* counter = FlopCounter::active()) {
    const auto outputs = static_cast<double>(y.numel());
    counter->record(outputs * linear->options.in_features(), linear->options.bias() ? outputs : 0.0);
  }
  return y;
}

ConvBnReluImpl::ConvBnReluImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                               std::int64_t dilation, bool relu)
    : relu_(relu) {
  const auto padding = dilation * (kernel - 1) / 2;
  conv_ = register_module("conv", CountedConv2d(torch::nn::Conv2dOptions(in, out, kernel)
                                                    .stride(stride)
                                                    .padding(padding)
                                                    .dilation(dilation)
                                                    .bias(false)));
  bn_ = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBnReluImpl::forward(const torch::Tensor& x) {
  auto y = bn_->forward(conv_->forward(x));
  return relu_ ? torch::relu(y) : y;
}

void init_weights(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& m : module.modules(/*include_self=*/false)) {
    if (auto* conv = m->as<torch::nn::Conv2d>()) {
      torch::nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut, torch::kReLU);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* bn = m->as<torch::nn::BatchNorm2d>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
    }
  }
}

}  // namespace drd::layers
