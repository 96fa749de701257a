#pragma once

// Convolution and linear layers that report their arithmetic to an active
// FlopCounter. Everything built by `models` and `adversarial` goes through
// these so accounting never needs to know a network's topology.

#include <cstdint>

#include <torch/torch.h>

namespace drd::layers {

enum class FlopConvention {
  // One FLOP per multiply-accumulate plus one per bias add. This is what the
  // widely used PyTorch flops_benchmark hook reports and what published
  // segmentation model-size tables quote as "FLOPs".
  multiply_accumulate,
  // Two FLOPs per multiply-accumulate plus one per bias add.
  two_per_mac,
};

// While alive, accumulates the cost of every counted layer executed on this
// thread. Counters nest; only the innermost one records.
class FlopCounter {
 public:
  explicit FlopCounter(FlopConvention convention = FlopConvention::multiply_accumulate);
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  void record(double macs, double bias_adds);
  double flops() const;
  double macs() const { return macs_; }

  static FlopCounter* active();

 private:
  FlopConvention convention_;
  double macs_ = 0.0;
  double bias_adds_ = 0.0;
  FlopCounter* previous_;
};

class CountedConv2dImpl : public torch::nn::Module {
 public:
  explicit CountedConv2dImpl(const torch::nn::Conv2dOptions& options);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(CountedConv2d);

class CountedLinearImpl : public torch::nn::Module {
 public:
  CountedLinearImpl(std::int64_t in_features, std::int64_t out_features, bool bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear linear{nullptr};
};
TORCH_MODULE(CountedLinear);

// conv -> batch norm -> relu, the workhorse of every backbone here.
class ConvBnReluImpl : public torch::nn::Module {
 public:
  ConvBnReluImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1,
                 std::int64_t dilation = 1, bool relu = true);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  CountedConv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
  bool relu_;
};
TORCH_MODULE(ConvBnRelu);

// Kaiming-normal (fan_out, relu) for convolutions, unit/zero batch norm.
void init_weights(torch::nn::Module& module);

}  // namespace drd::layers
