#include "doctest_torch.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "drd/adversarial.hpp"
#include "drd/data.hpp"
#include "drd/error.hpp"
#include "drd/tensor_util.hpp"
#include "support.hpp"

using namespace drd;
using namespace drd::adversarial;
using drd::testing::Gen;

namespace {

constexpr std::int64_t kClasses = 3;

DiscriminatorSpec small_critic() {
  DiscriminatorSpec s;
  s.conv_widths = {8, 16};
  return s;
}

Batch fixed_batch() {
  data::SyntheticSpec spec;
  spec.num_images = 5;
  spec.height = spec.width = 32;
  spec.num_classes = kClasses;
  spec.seed = 3;
  const auto split = data::generate_synthetic(spec);
  const auto b = data::stack(split.train, 0, 4);
  return {b.images, b.labels, data::kIgnoreIndex};
}

models::SegmentationNet tiny(double width, std::uint64_t seed) {
  models::ModelSpec spec;
  spec.backbone = models::Backbone::tiny_cnn;
  spec.num_classes = kClasses;
  spec.width_multiplier = width;
  return models::build_model(spec, seed);
}

struct Setup {
  StepToggles toggles;
  std::uint64_t student_seed = 1;
  std::uint64_t critic_seed = 2;
};

DistillationState make_state(const Setup& setup) {
  DistillationState st;
  st.teacher = tiny(1.0, 100);
  for (auto& p : st.teacher->parameters()) p.set_requires_grad(false);
  st.student = tiny(1.0 / 3.0, setup.student_seed);
  auto params = st.student->parameters();
  torch::manual_seed(setup.student_seed + 2);
  distill::RelationLossOptions ropts;
  ropts.pool_h = ropts.pool_w = 8;
  st.relation = distill::DualRelationLoss(st.student->tap_channels(), st.teacher->tap_channels(), ropts);
  for (auto& p : st.relation->parameters()) params.push_back(p);
  if (setup.toggles.use_adv) {
    torch::manual_seed(setup.critic_seed);
    st.discriminator = Discriminator(3, kClasses, small_critic());
    st.discriminator_optimizer = std::make_unique<torch::optim::Adam>(
        st.discriminator->parameters(), torch::optim::AdamOptions(1e-4).betas({0.5, 0.9}));
    st.penalty_generator = at::make_generator<at::CPUGeneratorImpl>(setup.critic_seed);
  }
  st.student_optimizer =
      std::make_unique<torch::optim::SGD>(params, torch::optim::SGDOptions(0.01).momentum(0.9).weight_decay(1e-4));
  return st;
}

std::filesystem::path golden(const std::string& name) { return std::filesystem::path(DRD_GOLDEN_DIR) / name; }

// Compares against the stored reference or rewrites it when asked to.
void check_golden(const std::string& name, const std::vector<double>& values, double rel_tol) {
  const auto file = golden(name);
  if (testing::update_golden()) {
    std::filesystem::create_directories(file.parent_path());
    std::ofstream(file) << nlohmann::json(values).dump(2) << "\n";
    MESSAGE("rewrote " << file.string());
    return;
  }
  std::ifstream in(file);
  REQUIRE_MESSAGE(in.good(), "missing golden file " << file.string() << "; run with DRD_UPDATE_GOLDEN=1");
  const auto expected = nlohmann::json::parse(in).get<std::vector<double>>();
  REQUIRE(expected.size() == values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    CHECK(values[i] == doctest::Approx(expected[i]).epsilon(rel_tol));
  }
}

}  // namespace

TEST_SUITE("adversarial") {

TEST_CASE("critic losses") {
  CHECK(discriminator_loss(torch::tensor({0.7}), torch::tensor({0.7})).item<double>() == 0.0);
  CHECK(discriminator_loss(torch::tensor({2.0}), torch::tensor({0.5})).item<double>() == doctest::Approx(1.5));
  CHECK(discriminator_loss(torch::tensor({1.0, 0.0}), torch::tensor({0.0, 1.0})).item<double>() == 0.0);
  CHECK(adversarial_term(torch::tensor({0.0})).item<double>() == 0.0);
  CHECK(adversarial_term(torch::tensor({1.0, 3.0})).item<double>() == doctest::Approx(2.0));
  CHECK(adversarial_term(torch::tensor({-4.25})).item<double>() == -4.25);
}

TEST_CASE("discriminator forward") {
  torch::manual_seed(0);
  Discriminator d(3, kClasses, small_critic());
  Gen gen(41);
  const auto image = gen.normal({2, 3, 16, 16}, 1.0, torch::kFloat);
  const auto probs = torch::softmax(gen.normal({2, kClasses, 16, 16}, 1.0, torch::kFloat), 1);
  const auto s = d->forward(image, probs);
  CHECK(s.sizes() == torch::IntArrayRef{2});
  CHECK(torch::isfinite(s).all().item<bool>());
  d->eval();
  CHECK(torch::equal(d->forward(image, probs), d->forward(image, probs)));

  // Identical samples score identically.
  const auto twin = d->forward(torch::stack({image[0], image[0]}), torch::stack({probs[0], probs[0]}));
  CHECK(twin[0].item<float>() == twin[1].item<float>());

  d->zero_head();
  CHECK(d->forward(image, probs).abs().max().item<double>() == 0.0);

  CHECK_THROWS_AS(d->forward(image, probs.narrow(2, 0, 8)), ShapeError);
  CHECK_THROWS_AS(d->forward(image.narrow(1, 0, 2), probs), ShapeError);
  CHECK_THROWS_AS((DiscriminatorSpec{{8}, 2, 0.2}.validate()), ValueError);
}

TEST_CASE("discriminator golden score") {
  torch::manual_seed(1234);
  Discriminator d(3, kClasses, DiscriminatorSpec{});
  d->eval();
  Gen gen(42);
  const auto image = gen.normal({2, 3, 32, 32}, 1.0, torch::kFloat);
  const auto probs = torch::softmax(gen.normal({2, kClasses, 32, 32}, 1.0, torch::kFloat), 1);
  const auto s = d->forward(image, probs);
  check_golden("discriminator_score.json", {s[0].item<double>(), s[1].item<double>()}, 1e-4);
}

TEST_CASE("gradient penalty draws only from its own generator") {
  torch::manual_seed(5);
  Discriminator d(3, kClasses, small_critic());
  Gen gen(43);
  const auto image = gen.normal({2, 3, 16, 16}, 1.0, torch::kFloat);
  const auto t = torch::softmax(gen.normal({2, kClasses, 16, 16}, 1.0, torch::kFloat), 1);
  const auto s = torch::softmax(gen.normal({2, kClasses, 16, 16}, 1.0, torch::kFloat), 1);
  auto g1 = at::make_generator<at::CPUGeneratorImpl>(9);
  auto g2 = at::make_generator<at::CPUGeneratorImpl>(9);
  torch::manual_seed(77);
  const auto before = torch::rand({4});
  torch::manual_seed(77);
  const auto a = gradient_penalty(d, image, t, s, g1);
  const auto after = torch::rand({4});
  CHECK(torch::equal(before, after));
  const auto b = gradient_penalty(d, image, t, s, g2);
  CHECK(a.penalty.item<double>() == b.penalty.item<double>());
  CHECK(a.penalty.item<double>() >= 0.0);
  CHECK(a.mean_grad_norm > 0.0);
}

TEST_CASE("all toggles off is plain cross-entropy training") {
  const auto batch = fixed_batch();
  Setup off;
  off.toggles = {false, false, false, false};
  auto st = make_state(off);

  auto plain = tiny(1.0 / 3.0, off.student_seed);
  torch::optim::SGD opt(plain->parameters(), torch::optim::SGDOptions(0.01).momentum(0.9).weight_decay(1e-4));
  for (int i = 0; i < 3; ++i) {
    const auto r = alternating_step(st, batch, {}, off.toggles);
    const auto b = supervised_step(plain, opt, batch);
    CHECK(r.losses.total == b.total);
    CHECK(r.losses.l_p == 0.0);
    CHECK(r.l_d == 0.0);
  }
  CHECK(same_state(*st.student, *plain));
}

TEST_CASE("teacher stays frozen and every term is logged") {
  const auto batch = fixed_batch();
  Setup all;
  auto st = make_state(all);
  const auto before = parameter_checksum(*st.teacher);
  const distill::LossWeights w;
  for (int i = 0; i < 3; ++i) {
    const auto r = alternating_step(st, batch, w, all.toggles);
    CHECK(std::abs(r.losses.total - r.losses.recombine(w)) < 1e-9);
    CHECK(r.losses.l_p > 0.0);
    CHECK(r.losses.l_s > 0.0);
    CHECK(r.losses.l_c > 0.0);
    CHECK(r.losses.l_adv != 0.0);
    CHECK(r.penalty >= 0.0);
  }
  CHECK(parameter_checksum(*st.teacher) == before);
}

TEST_CASE("single-toggle runs log zero for disabled terms") {
  const auto batch = fixed_batch();
  const std::array<StepToggles, 4> grid{StepToggles{true, false, false, false}, StepToggles{false, true, false, false},
                                        StepToggles{false, false, true, false}, StepToggles{false, false, false, true}};
  for (const auto& t : grid) {
    Setup s;
    s.toggles = t;
    auto st = make_state(s);
    const auto r = alternating_step(st, batch, {}, t);
    CHECK((r.losses.l_p != 0.0) == t.use_lp);
    CHECK((r.losses.l_adv != 0.0) == t.use_adv);
    CHECK((r.losses.l_s != 0.0) == t.use_ls);
    CHECK((r.losses.l_c != 0.0) == t.use_lc);
    CHECK((r.l_d != 0.0) == t.use_adv);
  }
}

TEST_CASE("lambda2 = 0 decouples the student from the critic") {
  const auto batch = fixed_batch();
  distill::LossWeights w;
  w.lambda2 = 0.0;
  Setup a, b, none;
  a.critic_seed = 2;
  b.critic_seed = 99;
  none.toggles.use_adv = false;
  auto sa = make_state(a);
  auto sb = make_state(b);
  auto sn = make_state(none);
  for (int i = 0; i < 3; ++i) {
    alternating_step(sa, batch, w, a.toggles);
    alternating_step(sb, batch, w, b.toggles);
    alternating_step(sn, batch, w, none.toggles);
  }
  CHECK(same_state(*sa.student, *sb.student));
  CHECK(same_state(*sa.student, *sn.student));
}

TEST_CASE("toggled-off terms contribute exactly nothing") {
  const auto batch = fixed_batch();
  // Each term switched off versus computed with a zero coefficient.
  struct Case {
    StepToggles off;
    StepToggles on;
    distill::LossWeights zeroed;
  };
  const std::array<Case, 2> cases{
      Case{{false, false, true, true}, {true, false, true, true}, {0.0, 0.1, 25.0}},
      Case{{true, false, false, false}, {true, false, true, true}, {10.0, 0.1, 0.0}},
  };
  for (const auto& c : cases) {
    Setup off, on;
    off.toggles = c.off;
    on.toggles = c.on;
    auto s_off = make_state(off);
    auto s_on = make_state(on);
    for (int i = 0; i < 3; ++i) {
      alternating_step(s_off, batch, c.zeroed, c.off);
      alternating_step(s_on, batch, c.zeroed, c.on);
    }
    CHECK(same_state(*s_off.student, *s_on.student));
  }
}

TEST_CASE("five-step loss trace golden") {
  const auto batch = fixed_batch();
  Setup all;
  auto st = make_state(all);
  std::vector<double> totals;
  for (int i = 0; i < 5; ++i) totals.push_back(alternating_step(st, batch, {}, all.toggles).losses.total);
  check_golden("five_step_totals.json", totals, 1e-4);
}

TEST_CASE("NaN inputs abort the step") {
  auto batch = fixed_batch();
  batch.images[0][0][0][0] = std::nan("");
  Setup all;
  auto st = make_state(all);
  CHECK_THROWS_AS(alternating_step(st, batch, {}, all.toggles), Error);
}

TEST_CASE("missing components are reported") {
  const auto batch = fixed_batch();
  Setup off;
  off.toggles.use_adv = false;
  auto st = make_state(off);
  CHECK_THROWS_AS(alternating_step(st, batch, {}, StepToggles{}), Error);
}

TEST_CASE("critic gradient norm stays controlled") {
  data::SyntheticSpec spec;
  spec.num_images = 10;
  spec.height = spec.width = 32;
  spec.num_classes = kClasses;
  spec.seed = 4;
  const auto split = data::generate_synthetic(spec);
  data::BatchSampler sampler(split.train, 4, 0);
  Setup adv;
  adv.toggles = {false, true, false, false};
  auto st = make_state(adv);
  double norm = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto b = sampler.next();
    norm = alternating_step(st, {b.images, b.labels, data::kIgnoreIndex}, {}, adv.toggles).interp_grad_norm;
  }
  CHECK(norm >= 0.1);
  CHECK(norm <= 10.0);
}

}  // TEST_SUITE
