#include "drd/config.hpp"

#include <fstream>

#include <fmt/format.h>

#include "drd/error.hpp"

namespace drd::harness {

void ExperimentConfig::validate() const {
  teacher.validate();
  student.validate();
  weights.validate();
  train_tile.validate();
  eval_tile.validate();
  discriminator.spec.validate();
  if (teacher.num_classes != student.num_classes || teacher.num_classes != dataset.num_classes) {
    throw ValueError(fmt::format("class counts disagree: teacher {}, student {}, dataset {}", teacher.num_classes,
                                 student.num_classes, dataset.num_classes));
  }
  if (teacher.in_channels != student.in_channels) throw ValueError("teacher and student take different input bands");
  if (!dataset.synthetic && !dataset.train_path) throw ValueError("dataset needs either 'synthetic' or 'train'");
  if (dataset.synthetic && dataset.synthetic->num_classes != dataset.num_classes) {
    throw ValueError("synthetic.num_classes must equal dataset.num_classes");
  }
  if (optimizer.kind != "sgd") throw ValueError(fmt::format("unsupported optimizer '{}'", optimizer.kind));
  if (optimizer.lr <= 0) throw ValueError("learning rate must be positive");
  if (schedule.batch_size < 1 || schedule.teacher_iters < 0 || schedule.student_iters < 0 || schedule.eval_every < 0) {
    throw ValueError("schedule values must be non-negative (batch size positive)");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json dataset{{"num_classes", c.dataset.num_classes}, {"ignore_index", c.dataset.ignore_index}};
  if (c.dataset.synthetic) dataset["synthetic"] = *c.dataset.synthetic;
  if (c.dataset.train_path) dataset["train"] = c.dataset.train_path->string();
  if (c.dataset.val_path) dataset["val"] = c.dataset.val_path->string();
  nlohmann::json disc{{"conv_widths", c.discriminator.spec.conv_widths},
                      {"downsample_stride", c.discriminator.spec.downsample_stride},
                      {"leaky_slope", c.discriminator.spec.leaky_slope},
                      {"lr", c.discriminator.lr},
                      {"beta1", c.discriminator.beta1},
                      {"beta2", c.discriminator.beta2},
                      {"gp_weight", c.discriminator.gp_weight}};
  if (c.discriminator.seed) disc["seed"] = *c.discriminator.seed;
  j = nlohmann::json{
      {"name", c.name},
      {"teacher", c.teacher},
      {"student", c.student},
      {"weights", {{"lambda1", c.weights.lambda1}, {"lambda2", c.weights.lambda2}, {"lambda3", c.weights.lambda3}}},
      {"toggles",
       {{"use_lp", c.toggles.use_lp},
        {"use_adv", c.toggles.use_adv},
        {"use_ls", c.toggles.use_ls},
        {"use_lc", c.toggles.use_lc}}},
      {"dataset", dataset},
      {"train_tile", c.train_tile},
      {"eval_tile", c.eval_tile},
      {"optimizer",
       {{"kind", c.optimizer.kind},
        {"lr", c.optimizer.lr},
        {"momentum", c.optimizer.momentum},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"schedule",
       {{"teacher_iters", c.schedule.teacher_iters},
        {"student_iters", c.schedule.student_iters},
        {"poly_power", c.schedule.poly_power},
        {"batch_size", c.schedule.batch_size},
        {"eval_every", c.schedule.eval_every}}},
      {"discriminator", disc},
      {"relation",
       {{"pool_h", c.relation.pool_h},
        {"pool_w", c.relation.pool_w},
        {"max_elements", c.relation.relation.max_elements}}},
      {"seed", c.seed},
      {"runs_dir", c.runs_dir.string()}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  c.name = j.value("name", c.name);
  c.seed = j.value("seed", c.seed);
  c.runs_dir = j.value("runs_dir", c.runs_dir.string());
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset.num_classes = d.value("num_classes", c.dataset.num_classes);
    c.dataset.ignore_index = d.value("ignore_index", c.dataset.ignore_index);
    if (d.contains("synthetic")) {
      auto synth = d.at("synthetic");
      if (!synth.contains("num_classes")) synth["num_classes"] = c.dataset.num_classes;
      c.dataset.synthetic = synth.get<data::SyntheticSpec>();
    }
    if (d.contains("train")) c.dataset.train_path = d.at("train").get<std::string>();
    if (d.contains("val")) c.dataset.val_path = d.at("val").get<std::string>();
  }
  auto model = [&](const char* key) {
    auto m = j.at(key);
    if (!m.contains("num_classes")) m["num_classes"] = c.dataset.num_classes;
    return m.get<models::ModelSpec>();
  };
  c.teacher = model("teacher");
  c.student = model("student");
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.lambda1 = w.value("lambda1", c.weights.lambda1);
    c.weights.lambda2 = w.value("lambda2", c.weights.lambda2);
    c.weights.lambda3 = w.value("lambda3", c.weights.lambda3);
  }
  if (j.contains("toggles")) {
    const auto& t = j.at("toggles");
    c.toggles.use_lp = t.value("use_lp", c.toggles.use_lp);
    c.toggles.use_adv = t.value("use_adv", c.toggles.use_adv);
    c.toggles.use_ls = t.value("use_ls", c.toggles.use_ls);
    c.toggles.use_lc = t.value("use_lc", c.toggles.use_lc);
  }
  if (j.contains("train_tile")) c.train_tile = j.at("train_tile").get<data::TileSpec>();
  if (j.contains("eval_tile")) c.eval_tile = j.at("eval_tile").get<data::TileSpec>();
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.kind = o.value("kind", c.optimizer.kind);
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.schedule.teacher_iters = s.value("teacher_iters", c.schedule.teacher_iters);
    c.schedule.student_iters = s.value("student_iters", c.schedule.student_iters);
    c.schedule.poly_power = s.value("poly_power", c.schedule.poly_power);
    c.schedule.batch_size = s.value("batch_size", c.schedule.batch_size);
    c.schedule.eval_every = s.value("eval_every", c.schedule.eval_every);
  }
  if (j.contains("discriminator")) {
    const auto& d = j.at("discriminator");
    c.discriminator.spec.conv_widths = d.value("conv_widths", c.discriminator.spec.conv_widths);
    c.discriminator.spec.downsample_stride = d.value("downsample_stride", c.discriminator.spec.downsample_stride);
    c.discriminator.spec.leaky_slope = d.value("leaky_slope", c.discriminator.spec.leaky_slope);
    c.discriminator.lr = d.value("lr", c.discriminator.lr);
    c.discriminator.beta1 = d.value("beta1", c.discriminator.beta1);
    c.discriminator.beta2 = d.value("beta2", c.discriminator.beta2);
    c.discriminator.gp_weight = d.value("gp_weight", c.discriminator.gp_weight);
    if (d.contains("seed")) c.discriminator.seed = d.at("seed").get<std::uint64_t>();
  }
  if (j.contains("relation")) {
    const auto& r = j.at("relation");
    c.relation.pool_h = r.value("pool_h", c.relation.pool_h);
    c.relation.pool_w = r.value("pool_w", c.relation.pool_w);
    c.relation.relation.max_elements = r.value("max_elements", c.relation.relation.max_elements);
  }
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError(fmt::format("cannot open config '{}'", file.string()));
  ExperimentConfig c;
  try {
    c = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("malformed config '{}': {}", file.string(), e.what()));
  }
  // Relative dataset paths are resolved against the config's directory.
  const auto base = file.parent_path();
  auto resolve = [&](std::optional<std::filesystem::path>& p) {
    if (p && p->is_relative() && !std::filesystem::exists(*p)) *p = base / *p;
  };
  resolve(c.dataset.train_path);
  resolve(c.dataset.val_path);
  c.validate();
  return c;
}

}  // namespace drd::harness
