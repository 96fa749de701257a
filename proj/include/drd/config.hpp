#pragma once

// Experiment configuration, read from and written to JSON. See
// configs/README.md for the schema. Apart from "teacher" and "student" every
// field has a default, so a config only needs to state what it changes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "drd/adversarial.hpp"
#include "drd/data.hpp"
#include "drd/distill.hpp"
#include "drd/models.hpp"

namespace drd::harness {

struct OptimizerConfig {
  std::string kind = "sgd";
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct ScheduleConfig {
  std::int64_t teacher_iters = 500;
  std::int64_t student_iters = 1000;
  double poly_power = 0.9;
  std::int64_t batch_size = 8;
  std::int64_t eval_every = 100;  // 0 disables intermediate snapshots
};

struct DiscriminatorConfig {
  adversarial::DiscriminatorSpec spec;
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double gp_weight = 10.0;
  std::optional<std::uint64_t> seed;  // defaults to experiment seed + 1
};

struct DatasetConfig {
  std::optional<data::SyntheticSpec> synthetic;
  std::optional<std::filesystem::path> train_path;
  std::optional<std::filesystem::path> val_path;
  std::int64_t num_classes = 6;
  std::int64_t ignore_index = data::kIgnoreIndex;
};

struct ExperimentConfig {
  std::string name = "experiment";
  models::ModelSpec teacher;
  models::ModelSpec student;
  distill::LossWeights weights;
  adversarial::StepToggles toggles;
  DatasetConfig dataset;
  data::TileSpec train_tile = data::TileSpec::square(600, 600);
  data::TileSpec eval_tile = data::TileSpec::square(600, 500);
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  DiscriminatorConfig discriminator;
  distill::RelationLossOptions relation;
  std::uint64_t seed = 0;
  std::filesystem::path runs_dir = "runs";

  void validate() const;
  std::uint64_t discriminator_seed() const { return discriminator.seed.value_or(seed + 1); }
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& file);

}  // namespace drd::harness
