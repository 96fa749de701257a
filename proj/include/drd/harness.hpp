#pragma once

// Teacher training, student distillation, tiled evaluation and reporting.
// Every run writes runs/<timestamp>-<name>-<kind>/ containing the
// checkpoint (+ sidecar), losses.csv, metrics.csv and record.json.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "drd/config.hpp"
#include "drd/data.hpp"
#include "drd/distill.hpp"
#include "drd/models.hpp"

namespace drd::harness {

struct MetricSnapshot {
  std::int64_t step = 0;
  double miou = 0.0;
  double mean_f1 = 0.0;
  double oa = 0.0;
  std::vector<double> per_class_f1;
};

struct RunRecord {
  std::string name;
  std::string kind;  // "teacher", "student" or "distill"
  nlohmann::json config;
  std::vector<distill::LossBreakdown> losses;  // one per step
  std::vector<double> critic_losses;           // one per step, 0 without the critic
  std::vector<MetricSnapshot> snapshots;
  models::ModelReport report;
  double wall_seconds = 0.0;
  std::filesystem::path run_dir;
  std::filesystem::path checkpoint;  // stem
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);
RunRecord load_run_record(const std::filesystem::path& run_dir);

struct RunOptions {
  // Overrides runs/<timestamp>-<name>-<kind>.
  std::optional<std::filesystem::path> run_dir;
  // Print a progress line every this many steps (0 = quiet).
  std::int64_t log_every = 0;
};

// Single-threaded, deterministic kernels. Called by every run entry point.
void set_deterministic();

// Poly decay: base * (1 - step / total)^power.
double poly_lr(double base, std::int64_t step, std::int64_t total, double power);
void set_learning_rate(torch::optim::Optimizer& optimizer, double lr);

// Training/validation splits for a config (synthetic or on disk). On-disk
// training rasters are cut with the training tile spec.
data::SplitDataset resolve_datasets(const ExperimentConfig& cfg);

// Cross-entropy training of `spec` for `iters` steps; the teacher path and
// the CE-only student baseline both run through here.
RunRecord train_cross_entropy(const ExperimentConfig& cfg, const models::ModelSpec& spec, std::int64_t iters,
                              const std::string& kind, const RunOptions& options = {});

RunRecord train_teacher(const ExperimentConfig& cfg, const RunOptions& options = {});

// Distils cfg.student from the teacher checkpoint with the configured
// toggles and weights, for schedule.student_iters alternating steps.
RunRecord distill(const ExperimentConfig& cfg, const std::filesystem::path& teacher_checkpoint,
                  const RunOptions& options = {});

struct EvalOptions {
  // Replace predictions by the ground truth; every metric must then be 1.
  bool oracle = false;
  std::int64_t tile_batch = 8;
};

// Tiles each image, predicts, stitches the probabilities and accumulates one
// confusion matrix over the whole dataset.
nlohmann::json evaluate_network(models::SegmentationNet& network, const data::Dataset& dataset,
                                const data::TileSpec& tile, const EvalOptions& options = {});

nlohmann::json evaluate(const std::filesystem::path& checkpoint, const data::Dataset& dataset,
                        const data::TileSpec& tile, const EvalOptions& options = {});

// Loss curves, mIoU-vs-params scatter and per-class F1 bars as PNG, plus
// snapshots.csv (one row per metric snapshot) and summary.csv (one row per
// record). Returns the written paths.
std::vector<std::filesystem::path> plot_report(const std::vector<RunRecord>& records,
                                               const std::filesystem::path& out_dir);

}  // namespace drd::harness
