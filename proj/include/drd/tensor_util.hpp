#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace drd {

// "[2, 3, 4]" style rendering used in error messages.
std::string shape_str(const torch::Tensor& t);

// Throws ValueError naming `what` if `t` holds a NaN or infinity.
void require_finite(const torch::Tensor& t, std::string_view what);

// FNV-1a over the raw bytes of every parameter and buffer, in registration
// order. Used to prove that frozen networks stay frozen.
std::uint64_t parameter_checksum(const torch::nn::Module& module);

// Copies of all parameters and buffers, keyed by name.
torch::OrderedDict<std::string, torch::Tensor> snapshot_state(const torch::nn::Module& module);

// True when both modules hold bit-identical parameters and buffers.
bool same_state(const torch::nn::Module& a, const torch::nn::Module& b);

}  // namespace drd
