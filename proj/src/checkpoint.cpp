#include "drd/checkpoint.hpp"

#include <fstream>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "drd/error.hpp"
#include "drd/tensor_util.hpp"

#ifndef DRD_GIT_HASH
#define DRD_GIT_HASH "unknown"
#endif

namespace drd::checkpoint {
namespace {

std::filesystem::path strip(const std::filesystem::path& p) {
  const auto ext = p.extension();
  if (ext == ".pt" || ext == ".json") return p.parent_path() / p.stem();
  return p;
}

}  // namespace

std::string git_hash() { return DRD_GIT_HASH; }

std::filesystem::path weights_path(const std::filesystem::path& stem) {
  auto p = stem;
  p += ".pt";
  return p;
}

std::filesystem::path sidecar_path(const std::filesystem::path& stem) {
  auto p = stem;
  p += ".json";
  return p;
}

void save_weights(const torch::nn::Module& module, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  torch::serialize::OutputArchive archive;
  for (const auto& p : module.named_parameters()) archive.write(p.key(), p.value().detach());
  for (const auto& b : module.named_buffers()) archive.write(b.key(), b.value().detach(), /*is_buffer=*/true);
  archive.save_to(file.string());
}

void load_weights(torch::nn::Module& module, const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw IoError(fmt::format("checkpoint '{}' does not exist", file.string()));
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(file.string());
  } catch (const c10::Error& e) {
    throw IoError(fmt::format("cannot read checkpoint '{}': {}", file.string(), e.what_without_backtrace()));
  }
  std::vector<std::string> problems;
  std::vector<std::pair<torch::Tensor, torch::Tensor>> copies;
  auto visit = [&](const std::string& name, torch::Tensor& target, bool is_buffer) {
    torch::Tensor stored;
    if (!archive.try_read(name, stored, is_buffer)) {
      problems.push_back(fmt::format("{}: missing", name));
    } else if (stored.sizes() != target.sizes()) {
      problems.push_back(fmt::format("{}: checkpoint {} vs model {}", name, shape_str(stored), shape_str(target)));
    } else {
      copies.emplace_back(target, stored);
    }
  };
  for (auto& p : module.named_parameters()) visit(p.key(), p.value(), false);
  for (auto& b : module.named_buffers()) visit(b.key(), b.value(), true);
  if (!problems.empty()) {
    throw ShapeError(fmt::format("checkpoint '{}' does not fit the model:\n  {}", file.string(),
                                 fmt::join(problems, "\n  ")));
  }
  torch::NoGradGuard no_grad;
  for (auto& [target, stored] : copies) target.copy_(stored);
}

void to_json(nlohmann::json& j, const Sidecar& s) {
  j = nlohmann::json{{"spec", s.spec},         {"seed", s.seed},   {"git_hash", s.git_hash},
                     {"metrics", s.metrics}, {"extra", s.extra}};
}

void from_json(const nlohmann::json& j, Sidecar& s) {
  s.spec = j.at("spec").get<models::ModelSpec>();
  s.seed = j.value("seed", std::uint64_t{0});
  s.git_hash = j.value("git_hash", std::string("unknown"));
  s.metrics = j.value("metrics", nlohmann::json::object());
  s.extra = j.value("extra", nlohmann::json::object());
}

void save_checkpoint(models::SegmentationNet& network, const Sidecar& sidecar, const std::filesystem::path& stem) {
  save_weights(*network, weights_path(stem));
  std::ofstream out(sidecar_path(stem));
  if (!out) throw IoError(fmt::format("cannot write '{}'", sidecar_path(stem).string()));
  out << nlohmann::json(sidecar).dump(2) << '\n';
}

Loaded load_checkpoint(const std::filesystem::path& path) {
  const auto stem = strip(path);
  std::ifstream in(sidecar_path(stem));
  if (!in) throw IoError(fmt::format("checkpoint sidecar '{}' not found", sidecar_path(stem).string()));
  Loaded loaded;
  try {
    loaded.sidecar = nlohmann::json::parse(in).get<Sidecar>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("malformed sidecar '{}': {}", sidecar_path(stem).string(), e.what()));
  }
  auto spec = loaded.sidecar.spec;
  spec.pretrained_path.reset();
  loaded.network = models::build_model(spec, loaded.sidecar.seed);
  load_weights(*loaded.network, weights_path(stem));
  return loaded;
}

}  // namespace drd::checkpoint
