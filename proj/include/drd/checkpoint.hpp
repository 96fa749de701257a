#pragma once

// Checkpoints are a libtorch archive of named parameters and buffers
// ("<stem>.pt") plus a JSON sidecar ("<stem>.json") describing how to rebuild
// the network and where it came from.

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "drd/models.hpp"

namespace drd::checkpoint {

// Short commit hash of the source tree the binary was built from.
std::string git_hash();

void save_weights(const torch::nn::Module& module, const std::filesystem::path& file);

// Copies archived tensors into `module`. Every parameter and buffer must be
// present with a matching shape; otherwise throws listing each offending
// entry.
void load_weights(torch::nn::Module& module, const std::filesystem::path& file);

struct Sidecar {
  models::ModelSpec spec;
  std::uint64_t seed = 0;
  std::string git_hash;
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const Sidecar& s);
void from_json(const nlohmann::json& j, Sidecar& s);

// `stem` is the path without extension.
void save_checkpoint(models::SegmentationNet& network, const Sidecar& sidecar, const std::filesystem::path& stem);

struct Loaded {
  models::SegmentationNet network{nullptr};
  Sidecar sidecar;
};

// Accepts the stem, the .pt file or the .json file.
Loaded load_checkpoint(const std::filesystem::path& path);

std::filesystem::path weights_path(const std::filesystem::path& stem);
std::filesystem::path sidecar_path(const std::filesystem::path& stem);

}  // namespace drd::checkpoint
