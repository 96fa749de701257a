// drd: teacher training, distillation, evaluation, model accounting,
// synthetic data and plots from the command line.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "drd/checkpoint.hpp"
#include "drd/config.hpp"
#include "drd/data.hpp"
#include "drd/error.hpp"
#include "drd/harness.hpp"
#include "drd/models.hpp"

namespace fs = std::filesystem;
using namespace drd;

namespace {

struct TrainArgs {
  fs::path config;
  fs::path teacher;
  std::optional<fs::path> run_dir;
  std::optional<std::uint64_t> seed;
  std::int64_t log_every = 50;
};

harness::ExperimentConfig read_config(const TrainArgs& a) {
  auto cfg = harness::load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  return cfg;
}

void print_summary(const harness::RunRecord& rec) {
  const auto& last = rec.snapshots.back();
  std::cout << fmt::format("{} run written to {}\n  checkpoint {}\n  val mIoU {:.4f}  mean F1 {:.4f}  OA {:.4f}  ({:.1f} s)\n",
                           rec.kind, rec.run_dir.string(), checkpoint::weights_path(rec.checkpoint).string(), last.miou,
                           last.mean_f1, last.oa, rec.wall_seconds);
}

void add_train_options(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--run-dir", a.run_dir, "write artifacts here instead of runs/<timestamp>-<name>-<kind>");
  cmd->add_option("--seed", a.seed, "override the config seed");
  cmd->add_option("--log-every", a.log_every, "progress line interval in steps (0 = quiet)");
}

harness::RunOptions run_options(const TrainArgs& a) { return {a.run_dir, a.log_every}; }

// The loss-toggle grid: CE only, each single term, and everything on.
std::vector<std::pair<std::string, adversarial::StepToggles>> ablation_grid() {
  return {{"ce", {false, false, false, false}},   {"lp", {true, false, false, false}},
          {"adv", {false, true, false, false}},   {"ls", {false, false, true, false}},
          {"lc", {false, false, false, true}},    {"full", {true, true, true, true}}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual relation distillation for semantic segmentation"};
  app.require_subcommand(1);

  TrainArgs teacher_args;
  auto* teacher_cmd = app.add_subcommand("train-teacher", "train the teacher with cross-entropy");
  add_train_options(teacher_cmd, teacher_args);

  TrainArgs distill_args;
  auto* distill_cmd = app.add_subcommand("distill", "distil the student from a teacher checkpoint");
  add_train_options(distill_cmd, distill_args);
  distill_cmd->add_option("--teacher", distill_args.teacher, "teacher checkpoint (stem, .pt or .json)")->required();

  TrainArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "distil once per loss-toggle combination from one teacher");
  add_train_options(ablate_cmd, ablate_args);
  ablate_cmd->add_option("--teacher", ablate_args.teacher, "teacher checkpoint")->required();

  fs::path eval_ckpt, eval_data;
  std::optional<std::int64_t> eval_classes;
  std::int64_t eval_tile = 600, eval_stride = 500, eval_ignore = data::kIgnoreIndex;
  bool eval_oracle = false;
  std::optional<fs::path> eval_csv;
  auto* eval_cmd = app.add_subcommand("evaluate", "tiled evaluation of a checkpoint; prints metric JSON");
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "dataset root with images/ and labels/")->required();
  eval_cmd->add_option("--classes", eval_classes, "number of classes (default: from the checkpoint)");
  eval_cmd->add_option("--ignore-index", eval_ignore, "label value excluded from metrics");
  eval_cmd->add_option("--tile", eval_tile, "square tile size");
  eval_cmd->add_option("--stride", eval_stride, "tile stride");
  eval_cmd->add_flag("--oracle", eval_oracle, "score the ground truth against itself");
  eval_cmd->add_option("--csv", eval_csv, "append one summary row to this CSV");

  std::string report_spec = "resnet18";
  std::vector<std::int64_t> report_hw{512, 1024};
  std::int64_t report_classes = 19;
  std::string report_convention = "mac";
  auto* report_cmd = app.add_subcommand("model-report", "parameter and FLOP accounting; prints JSON");
  report_cmd->add_option("--spec", report_spec, "resnet101 | resnet18 | resnet18_half | tiny_cnn, optional @classes");
  report_cmd->add_option("--hw", report_hw, "input height and width")->expected(2);
  report_cmd->add_option("--classes", report_classes, "number of classes");
  report_cmd->add_option("--convention", report_convention, "mac (one per multiply-accumulate) or 2mac")
      ->check(CLI::IsMember({"mac", "2mac"}));

  data::SyntheticSpec synth;
  std::int64_t synth_size = 64;
  std::string synth_family = "blobs";
  fs::path synth_out;
  auto* synth_cmd = app.add_subcommand("gen-synthetic", "write a synthetic dataset as out/train and out/val");
  synth_cmd->add_option("--seed", synth.seed, "generator seed");
  synth_cmd->add_option("--classes", synth.num_classes, "number of classes");
  synth_cmd->add_option("--size", synth_size, "square image size");
  synth_cmd->add_option("--count", synth.num_images, "number of images (80% train)");
  synth_cmd->add_option("--family", synth_family, "blobs | rects")->check(CLI::IsMember({"blobs", "rects"}));
  synth_cmd->add_option("--noise", synth.noise, "per-pixel noise level");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  fs::path plot_runs, plot_out;
  auto* plot_cmd = app.add_subcommand("plot", "plots and CSVs from every run under a directory");
  plot_cmd->add_option("--runs", plot_runs, "directory holding run directories")->required()->check(CLI::ExistingDirectory);
  plot_cmd->add_option("--out", plot_out, "output directory")->required();

  fs::path convert_in, convert_out;
  auto* convert_cmd = app.add_subcommand("convert-labels", "map ISPRS color label rasters to class indices");
  convert_cmd->add_option("--in", convert_in, "directory of color label images")->required()->check(CLI::ExistingDirectory);
  convert_cmd->add_option("--out", convert_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*teacher_cmd) {
      print_summary(harness::train_teacher(read_config(teacher_args), run_options(teacher_args)));
    } else if (*distill_cmd) {
      print_summary(harness::distill(read_config(distill_args), distill_args.teacher, run_options(distill_args)));
    } else if (*ablate_cmd) {
      const auto base = read_config(ablate_args);
      for (const auto& [tag, toggles] : ablation_grid()) {
        auto cfg = base;
        cfg.name = base.name + "-" + tag;
        cfg.toggles = toggles;
        auto options = run_options(ablate_args);
        if (ablate_args.run_dir) options.run_dir = *ablate_args.run_dir / tag;
        print_summary(harness::distill(cfg, ablate_args.teacher, options));
      }
    } else if (*eval_cmd) {
      const auto classes = eval_classes.value_or(checkpoint::load_checkpoint(eval_ckpt).sidecar.spec.num_classes);
      const auto dataset = data::load_dataset(eval_data, classes, eval_ignore);
      harness::EvalOptions options;
      options.oracle = eval_oracle;
      const auto result = harness::evaluate(eval_ckpt, dataset, data::TileSpec::square(eval_tile, eval_stride), options);
      std::cout << result.dump(2) << "\n";
      if (eval_csv) {
        const bool fresh = !fs::exists(*eval_csv) || fs::file_size(*eval_csv) == 0;
        std::ofstream out(*eval_csv, std::ios::app);
        if (!out) throw IoError(fmt::format("cannot append to '{}'", eval_csv->string()));
        if (fresh) out << "checkpoint,data,tile,stride,oracle,miou,mean_f1,oa,pixels\n";
        out << fmt::format("{},{},{},{},{},{:.10g},{:.10g},{:.10g},{}\n", eval_ckpt.string(), eval_data.string(),
                           eval_tile, eval_stride, eval_oracle, result["miou"].get<double>(),
                           result["mean_f1"].get<double>(), result["oa"].get<double>(),
                           result["pixels"].get<std::int64_t>());
      }
    } else if (*report_cmd) {
      torch::set_num_threads(1);
      const auto spec = models::ModelSpec::named(report_spec, report_classes);
      auto net = models::build_model(spec, 0);
      const auto convention = report_convention == "2mac" ? layers::FlopConvention::two_per_mac
                                                          : layers::FlopConvention::multiply_accumulate;
      const auto report = models::model_report(net, report_hw[0], report_hw[1], convention);
      std::cout << nlohmann::json(report).dump(2) << "\n";
    } else if (*synth_cmd) {
      synth.height = synth.width = synth_size;
      synth.shape_family = synth_family == "rects" ? data::ShapeFamily::rects : data::ShapeFamily::blobs;
      const auto split = data::generate_synthetic(synth);
      data::save_dataset(split.train, synth_out / "train");
      data::save_dataset(split.val, synth_out / "val");
      std::cout << fmt::format("wrote {} train and {} val images to {}\n", split.train.size(), split.val.size(),
                               synth_out.string());
    } else if (*plot_cmd) {
      std::vector<fs::path> dirs;
      for (const auto& entry : fs::recursive_directory_iterator(plot_runs)) {
        if (entry.is_regular_file() && entry.path().filename() == "record.json") dirs.push_back(entry.path().parent_path());
      }
      std::sort(dirs.begin(), dirs.end());
      std::vector<harness::RunRecord> records;
      for (const auto& d : dirs) records.push_back(harness::load_run_record(d));
      for (const auto& f : harness::plot_report(records, plot_out)) std::cout << f.string() << "\n";
    } else if (*convert_cmd) {
      const auto n = data::convert_isprs_labels(convert_in, convert_out);
      std::cout << fmt::format("converted {} label images\n", n);
    }
  } catch (const std::exception& e) {
    std::cerr << "drd: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
