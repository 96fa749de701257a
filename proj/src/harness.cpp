#include "drd/harness.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "drd/adversarial.hpp"
#include "drd/checkpoint.hpp"
#include "drd/error.hpp"
#include "drd/metrics.hpp"

namespace drd::harness {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

fs::path make_run_dir(const ExperimentConfig& cfg, const std::string& kind, const RunOptions& options) {
  fs::path dir;
  if (options.run_dir) {
    dir = *options.run_dir;
  } else {
    const auto now = std::chrono::system_clock::now();
    const auto base = cfg.runs_dir / fmt::format("{:%Y%m%d-%H%M%S}-{}-{}",
                                                 std::chrono::floor<std::chrono::seconds>(now), cfg.name, kind);
    dir = base;
    for (int i = 1; fs::exists(dir); ++i) dir = fs::path(base.string() + fmt::format("-{}", i));
  }
  fs::create_directories(dir);
  return dir;
}

MetricSnapshot snapshot_from(const nlohmann::json& m, std::int64_t step) {
  MetricSnapshot s;
  s.step = step;
  s.miou = m.at("miou").get<double>();
  s.mean_f1 = m.at("mean_f1").get<double>();
  s.oa = m.at("oa").get<double>();
  for (const auto& c : m.at("per_class")) s.per_class_f1.push_back(c.at("f1").get<double>());
  return s;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file);
  if (!out) throw IoError(fmt::format("cannot write '{}'", file.string()));
  out << text;
}

void write_artifacts(const RunRecord& rec) {
  std::string losses = distill::LossBreakdown::csv_header() + ",l_d\n";
  for (std::size_t i = 0; i < rec.losses.size(); ++i) {
    losses += rec.losses[i].csv_row(static_cast<std::int64_t>(i)) +
              fmt::format(",{:.17g}\n", i < rec.critic_losses.size() ? rec.critic_losses[i] : 0.0);
  }
  write_text(rec.run_dir / "losses.csv", losses);
  std::string metrics = "step,miou,mean_f1,oa\n";
  for (const auto& s : rec.snapshots) metrics += fmt::format("{},{:.10g},{:.10g},{:.10g}\n", s.step, s.miou, s.mean_f1, s.oa);
  write_text(rec.run_dir / "metrics.csv", metrics);
  write_text(rec.run_dir / "record.json", nlohmann::json(rec).dump(2) + "\n");
}

adversarial::Batch to_step_batch(const data::Batch& b, std::int64_t ignore_index) {
  return {b.images, b.labels, ignore_index};
}

void maybe_log(const RunOptions& options, const RunRecord& rec, std::int64_t step, std::int64_t iters) {
  if (options.log_every <= 0 || (step + 1) % options.log_every != 0) return;
  const auto& b = rec.losses.back();
  std::cout << fmt::format("[{}] step {}/{} total={:.4f} ce={:.4f} p={:.4f} adv={:.4f} s={:.3g} c={:.3g} d={:.4f}\n",
                           rec.kind, step + 1, iters, b.total, b.l_ce, b.l_p, b.l_adv, b.l_s, b.l_c,
                           rec.critic_losses.back())
            << std::flush;
}

bool snapshot_due(const ExperimentConfig& cfg, std::int64_t step, std::int64_t iters) {
  return cfg.schedule.eval_every > 0 && (step + 1) % cfg.schedule.eval_every == 0 && step + 1 < iters;
}

}  // namespace

void to_json(nlohmann::json& j, const RunRecord& r) {
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& b : r.losses) losses.push_back({b.l_ce, b.l_p, b.l_adv, b.l_s, b.l_c, b.total});
  nlohmann::json snaps = nlohmann::json::array();
  for (const auto& s : r.snapshots) {
    snaps.push_back({{"step", s.step}, {"miou", s.miou}, {"mean_f1", s.mean_f1}, {"oa", s.oa},
                     {"per_class_f1", s.per_class_f1}});
  }
  j = nlohmann::json{{"name", r.name},
                     {"kind", r.kind},
                     {"config", r.config},
                     {"losses", losses},
                     {"critic_losses", r.critic_losses},
                     {"snapshots", snaps},
                     {"report", r.report},
                     {"wall_seconds", r.wall_seconds},
                     {"run_dir", r.run_dir.string()},
                     {"checkpoint", r.checkpoint.string()}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  r = RunRecord{};
  r.name = j.value("name", std::string());
  r.kind = j.value("kind", std::string());
  r.config = j.value("config", nlohmann::json::object());
  for (const auto& l : j.at("losses")) {
    r.losses.push_back({l[0].get<double>(), l[1].get<double>(), l[2].get<double>(), l[3].get<double>(),
                        l[4].get<double>(), l[5].get<double>()});
  }
  r.critic_losses = j.value("critic_losses", std::vector<double>{});
  for (const auto& s : j.at("snapshots")) {
    r.snapshots.push_back({s.at("step").get<std::int64_t>(), s.at("miou").get<double>(), s.at("mean_f1").get<double>(),
                           s.at("oa").get<double>(), s.at("per_class_f1").get<std::vector<double>>()});
  }
  const auto& rep = j.at("report");
  r.report.name = rep.value("name", std::string());
  r.report.params_millions = rep.at("params_millions").get<double>();
  r.report.flops_giga = rep.at("flops_giga").get<double>();
  r.report.input_h = rep.at("input_hw")[0].get<std::int64_t>();
  r.report.input_w = rep.at("input_hw")[1].get<std::int64_t>();
  r.report.tap_shape = rep.at("tap_shape").get<std::array<std::int64_t, 3>>();
  r.report.flop_convention = rep.value("flop_convention", std::string());
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.run_dir = j.value("run_dir", std::string());
  r.checkpoint = j.value("checkpoint", std::string());
}

RunRecord load_run_record(const fs::path& run_dir) {
  std::ifstream in(run_dir / "record.json");
  if (!in) throw IoError(fmt::format("no record.json in '{}'", run_dir.string()));
  try {
    return nlohmann::json::parse(in).get<RunRecord>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("malformed record in '{}': {}", run_dir.string(), e.what()));
  }
}

void set_deterministic() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

double poly_lr(double base, std::int64_t step, std::int64_t total, double power) {
  if (total <= 0) return base;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total);
  return base * std::pow(std::max(frac, 0.0), power);
}

void set_learning_rate(torch::optim::Optimizer& optimizer, double lr) {
  for (auto& group : optimizer.param_groups()) group.options().set_lr(lr);
}

data::SplitDataset resolve_datasets(const ExperimentConfig& cfg) {
  if (cfg.dataset.synthetic) return data::generate_synthetic(*cfg.dataset.synthetic);
  data::SplitDataset out;
  const auto train = data::load_dataset(*cfg.dataset.train_path, cfg.dataset.num_classes, cfg.dataset.ignore_index);
  out.train = data::tile_dataset(train, cfg.train_tile);
  out.val = cfg.dataset.val_path
                ? data::load_dataset(*cfg.dataset.val_path, cfg.dataset.num_classes, cfg.dataset.ignore_index)
                : train;
  return out;
}

RunRecord train_cross_entropy(const ExperimentConfig& cfg, const models::ModelSpec& spec, std::int64_t iters,
                              const std::string& kind, const RunOptions& options) {
  cfg.validate();
  set_deterministic();
  const auto start = Clock::now();
  const auto splits = resolve_datasets(cfg);
  auto net = models::build_model(spec, cfg.seed);
  torch::optim::SGD optimizer(net->parameters(), torch::optim::SGDOptions(cfg.optimizer.lr)
                                                     .momentum(cfg.optimizer.momentum)
                                                     .weight_decay(cfg.optimizer.weight_decay));
  data::BatchSampler sampler(splits.train, cfg.schedule.batch_size, cfg.seed);

  RunRecord rec;
  rec.name = cfg.name;
  rec.kind = kind;
  rec.config = cfg;
  rec.run_dir = make_run_dir(cfg, kind, options);
  rec.checkpoint = rec.run_dir / "model";
  checkpoint::Sidecar sidecar{spec, cfg.seed, checkpoint::git_hash(), {}, {{"kind", kind}}};

  for (std::int64_t step = 0; step < iters; ++step) {
    set_learning_rate(optimizer, poly_lr(cfg.optimizer.lr, step, iters, cfg.schedule.poly_power));
    const auto batch = to_step_batch(sampler.next(), splits.train.ignore_index);
    try {
      rec.losses.push_back(adversarial::supervised_step(net, optimizer, batch));
    } catch (const Error&) {
      sidecar.extra["aborted_at_step"] = step;
      checkpoint::save_checkpoint(net, sidecar, rec.checkpoint);
      write_artifacts(rec);
      throw;
    }
    rec.critic_losses.push_back(0.0);
    maybe_log(options, rec, step, iters);
    if (snapshot_due(cfg, step, iters)) {
      rec.snapshots.push_back(snapshot_from(evaluate_network(net, splits.val, cfg.eval_tile), step + 1));
    }
  }
  const auto final_metrics = evaluate_network(net, splits.val, cfg.eval_tile);
  rec.snapshots.push_back(snapshot_from(final_metrics, iters));
  const auto& first = splits.train.samples.front().image;
  rec.report = models::model_report(net, first.size(1), first.size(2));
  sidecar.metrics = final_metrics;
  checkpoint::save_checkpoint(net, sidecar, rec.checkpoint);
  rec.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  write_artifacts(rec);
  return rec;
}

RunRecord train_teacher(const ExperimentConfig& cfg, const RunOptions& options) {
  return train_cross_entropy(cfg, cfg.teacher, cfg.schedule.teacher_iters, "teacher", options);
}

RunRecord distill(const ExperimentConfig& cfg, const fs::path& teacher_checkpoint, const RunOptions& options) {
  cfg.validate();
  set_deterministic();
  const auto start = Clock::now();
  const auto splits = resolve_datasets(cfg);
  const auto iters = cfg.schedule.student_iters;

  adversarial::DistillationState state;
  state.teacher = checkpoint::load_checkpoint(teacher_checkpoint).network;
  if (state.teacher->spec().num_classes != cfg.dataset.num_classes) {
    throw ValueError(fmt::format("teacher predicts {} classes but the dataset has {}",
                                 state.teacher->spec().num_classes, cfg.dataset.num_classes));
  }
  for (auto& p : state.teacher->parameters()) p.set_requires_grad(false);
  state.student = models::build_model(cfg.student, cfg.seed);

  std::vector<torch::Tensor> student_params = state.student->parameters();
  if (cfg.toggles.use_ls || cfg.toggles.use_lc) {
    torch::manual_seed(cfg.seed + 2);
    state.relation = distill::DualRelationLoss(state.student->tap_channels(), state.teacher->tap_channels(),
                                               cfg.relation);
    if (cfg.toggles.use_lc) {
      for (auto& p : state.relation->parameters()) student_params.push_back(p);
    }
  }
  const auto critic_seed = cfg.discriminator_seed();
  if (cfg.toggles.use_adv) {
    torch::manual_seed(critic_seed);
    state.discriminator = adversarial::Discriminator(splits.train.bands(), cfg.dataset.num_classes,
                                                     cfg.discriminator.spec);
    state.discriminator_optimizer = std::make_unique<torch::optim::Adam>(
        state.discriminator->parameters(),
        torch::optim::AdamOptions(cfg.discriminator.lr).betas({cfg.discriminator.beta1, cfg.discriminator.beta2}));
    state.penalty_generator = at::make_generator<at::CPUGeneratorImpl>(critic_seed);
  }
  state.student_optimizer = std::make_unique<torch::optim::SGD>(
      student_params, torch::optim::SGDOptions(cfg.optimizer.lr)
                          .momentum(cfg.optimizer.momentum)
                          .weight_decay(cfg.optimizer.weight_decay));
  data::BatchSampler sampler(splits.train, cfg.schedule.batch_size, cfg.seed);

  RunRecord rec;
  rec.name = cfg.name;
  rec.kind = "distill";
  rec.config = cfg;
  rec.run_dir = make_run_dir(cfg, "distill", options);
  rec.checkpoint = rec.run_dir / "model";
  checkpoint::Sidecar sidecar{cfg.student, cfg.seed, checkpoint::git_hash(), {},
                              {{"kind", "distill"}, {"teacher", fs::absolute(teacher_checkpoint).string()}}};
  const adversarial::AdversarialOptions adv_options{cfg.discriminator.gp_weight, true};

  for (std::int64_t step = 0; step < iters; ++step) {
    set_learning_rate(*state.student_optimizer, poly_lr(cfg.optimizer.lr, step, iters, cfg.schedule.poly_power));
    const auto batch = to_step_batch(sampler.next(), splits.train.ignore_index);
    adversarial::StepResult r;
    try {
      r = adversarial::alternating_step(state, batch, cfg.weights, cfg.toggles, adv_options);
    } catch (const Error&) {
      sidecar.extra["aborted_at_step"] = step;
      checkpoint::save_checkpoint(state.student, sidecar, rec.checkpoint);
      write_artifacts(rec);
      throw;
    }
    rec.losses.push_back(r.losses);
    rec.critic_losses.push_back(r.l_d);
    maybe_log(options, rec, step, iters);
    if (snapshot_due(cfg, step, iters)) {
      rec.snapshots.push_back(snapshot_from(evaluate_network(state.student, splits.val, cfg.eval_tile), step + 1));
    }
  }
  const auto final_metrics = evaluate_network(state.student, splits.val, cfg.eval_tile);
  rec.snapshots.push_back(snapshot_from(final_metrics, iters));
  const auto& first = splits.train.samples.front().image;
  rec.report = models::model_report(state.student, first.size(1), first.size(2));
  sidecar.metrics = final_metrics;
  checkpoint::save_checkpoint(state.student, sidecar, rec.checkpoint);
  if (!state.discriminator.is_empty()) checkpoint::save_weights(*state.discriminator, rec.run_dir / "discriminator.pt");
  if (!state.relation.is_empty() && state.relation->has_projection()) {
    checkpoint::save_weights(*state.relation, rec.run_dir / "relation_projection.pt");
  }
  rec.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
  write_artifacts(rec);
  return rec;
}

nlohmann::json evaluate_network(models::SegmentationNet& network, const data::Dataset& dataset,
                                const data::TileSpec& tile, const EvalOptions& options) {
  if (network->spec().num_classes != dataset.num_classes) {
    throw ValueError(fmt::format("network predicts {} classes but the dataset has {}", network->spec().num_classes,
                                 dataset.num_classes));
  }
  if (dataset.samples.empty()) throw ValueError("cannot evaluate on an empty dataset");
  const bool was_training = network->is_training();
  network->eval();
  torch::NoGradGuard no_grad;
  metrics::ConfusionMatrix cm(dataset.num_classes);
  for (const auto& sample : dataset.samples) {
    const auto& truth = sample.labels.data;
    torch::Tensor pred;
    if (options.oracle) {
      pred = truth.masked_fill(truth == dataset.ignore_index, 0);
    } else {
      const auto tiles = data::tile_raster(sample.image, sample.labels, tile);
      std::vector<data::PlacedScores> placed;
      for (std::size_t i = 0; i < tiles.size(); i += static_cast<std::size_t>(options.tile_batch)) {
        const auto end = std::min(tiles.size(), i + static_cast<std::size_t>(options.tile_batch));
        std::vector<torch::Tensor> images;
        for (auto k = i; k < end; ++k) images.push_back(tiles[k].image);
        const auto probs = distill::softmax_scores(network->forward(torch::stack(images)).logits);
        for (auto k = i; k < end; ++k) {
          placed.push_back({probs[static_cast<std::int64_t>(k - i)], tiles[k].y, tiles[k].x});
        }
      }
      pred = data::stitch_predictions(placed, truth.size(0), truth.size(1)).argmax(0);
    }
    cm.accumulate(pred, truth, dataset.ignore_index);
  }
  network->train(was_training);
  auto out = metrics::metrics_json(cm);
  out["images"] = dataset.samples.size();
  return out;
}

nlohmann::json evaluate(const fs::path& checkpoint_path, const data::Dataset& dataset, const data::TileSpec& tile,
                        const EvalOptions& options) {
  set_deterministic();
  auto loaded = checkpoint::load_checkpoint(checkpoint_path);
  auto out = evaluate_network(loaded.network, dataset, tile, options);
  out["checkpoint"] = checkpoint_path.string();
  out["tile"] = tile;
  out["oracle"] = options.oracle;
  return out;
}

}  // namespace drd::harness
