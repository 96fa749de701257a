#include "drd/tensor_util.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "drd/error.hpp"

namespace drd {
namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(std::uint64_t& h, const torch::Tensor& t) {
  const auto c = t.detach().contiguous().cpu();
  const auto* bytes = static_cast<const unsigned char*>(c.data_ptr());
  const auto n = static_cast<std::size_t>(c.numel()) * c.element_size();
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= kFnvPrime;
  }
}

}  // namespace

std::string shape_str(const torch::Tensor& t) {
  if (!t.defined()) return "[undefined]";
  return fmt::format("[{}]", fmt::join(t.sizes(), ", "));
}

void require_finite(const torch::Tensor& t, std::string_view what) {
  if (!torch::isfinite(t.detach()).all().item<bool>()) {
    throw ValueError(fmt::format("{} contains non-finite values (shape {})", what, shape_str(t)));
  }
}

std::uint64_t parameter_checksum(const torch::nn::Module& module) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : module.named_parameters()) fnv_mix(h, p.value());
  for (const auto& b : module.named_buffers()) fnv_mix(h, b.value());
  return h;
}

torch::OrderedDict<std::string, torch::Tensor> snapshot_state(const torch::nn::Module& module) {
  torch::OrderedDict<std::string, torch::Tensor> out;
  for (const auto& p : module.named_parameters()) out.insert(p.key(), p.value().detach().clone());
  for (const auto& b : module.named_buffers()) out.insert(b.key(), b.value().detach().clone());
  return out;
}

bool same_state(const torch::nn::Module& a, const torch::nn::Module& b) {
  const auto sa = snapshot_state(a);
  const auto sb = snapshot_state(b);
  if (sa.size() != sb.size()) return false;
  for (const auto& item : sa) {
    const auto* other = sb.find(item.key());
    if (other == nullptr || !torch::equal(item.value(), *other)) return false;
  }
  return true;
}

}  // namespace drd
