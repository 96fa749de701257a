#include "doctest_torch.hpp"

#include <cmath>

#include "drd/distill.hpp"
#include "drd/error.hpp"
#include "support.hpp"

using namespace drd;
using namespace drd::distill;
using drd::testing::Gen;

TEST_SUITE("distill") {

TEST_CASE("softmax_scores") {
  const auto zeros = softmax_scores(torch::zeros({4, 2, 3}));
  CHECK(testing::max_abs_diff(zeros, torch::full({4, 2, 3}, 0.25)) < 1e-7);

  const auto p = softmax_scores(torch::tensor({std::log(2.0), 0.0}, torch::kDouble).view({2, 1, 1}));
  CHECK(p[0][0][0].item<double>() == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(p[1][0][0].item<double>() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Gen gen(31);
  const auto r = softmax_scores(gen.normal({2, 5, 3, 4}, 10.0, torch::kFloat));
  CHECK(testing::max_abs_diff(r.sum(1), torch::ones({2, 3, 4})) < 1e-6);

  auto bad = torch::zeros({3, 2, 2});
  bad[0][1][1] = INFINITY;
  CHECK_THROWS_AS(softmax_scores(bad), ValueError);
  CHECK_THROWS_AS(softmax_scores(torch::zeros({4})), ShapeError);
}

TEST_CASE("check_probabilities") {
  CHECK_NOTHROW(check_probabilities(torch::full({2, 2, 2}, 0.5), "p"));
  CHECK_THROWS(check_probabilities(torch::full({2, 2, 2}, 0.6), "p"));
  CHECK_THROWS(check_probabilities(torch::ones({1, 2, 2}), "p"));  // a single class
  auto neg = torch::full({2, 1, 1}, 0.5);
  neg[0][0][0] = 1.5;
  neg[1][0][0] = -0.5;
  CHECK_THROWS(check_probabilities(neg, "p"));
}

TEST_CASE("pixel KL: identity, hand case, oracle") {
  Gen gen(32);
  const auto p = gen.probabilities(3, 2, 2);
  CHECK(std::abs(pixel_kl_loss(p, p).item<double>()) < 1e-12);

  const auto t = torch::tensor({1.0, 0.0}, torch::kDouble).view({2, 1, 1});
  const auto s = torch::tensor({0.5, 0.5}, torch::kDouble).view({2, 1, 1});
  CHECK(pixel_kl_loss(t, s).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const auto a = gen.probabilities(3, 2, 2);
  const auto b = gen.probabilities(3, 2, 2);
  CHECK(std::abs(pixel_kl_loss(a, b).item<double>() - testing::kl_oracle(a, b)) < 1e-9);

  // Batched: mean over samples of per-sample values.
  const auto batch_t = torch::stack({a, b});
  const auto batch_s = torch::stack({b, a});
  const double expected = 0.5 * (testing::kl_oracle(a, b) + testing::kl_oracle(b, a));
  CHECK(std::abs(pixel_kl_loss(batch_t, batch_s).item<double>() - expected) < 1e-9);
}

TEST_CASE("pixel KL: zeros, clamping and asymmetry") {
  // A student zero where the teacher is positive stays finite thanks to the floor.
  const auto t = torch::tensor({0.5, 0.5}, torch::kDouble).view({2, 1, 1});
  const auto s = torch::tensor({1.0, 0.0}, torch::kDouble).view({2, 1, 1});
  const double v = pixel_kl_loss(t, s).item<double>();
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(0.5 * std::log(0.5 / 1.0) + 0.5 * std::log(0.5 / 1e-8)).epsilon(1e-9));

  const auto a = torch::tensor({0.9, 0.1}, torch::kDouble).view({2, 1, 1});
  const auto b = torch::tensor({0.6, 0.4}, torch::kDouble).view({2, 1, 1});
  CHECK(std::abs(pixel_kl_loss(a, b).item<double>() - pixel_kl_loss(b, a).item<double>()) > 1e-3);

  CHECK_THROWS_AS(pixel_kl_loss(torch::full({2, 2, 2}, 0.5), torch::full({2, 2, 3}, 0.5)), ShapeError);
}

TEST_CASE("pixel KL: teacher gets no gradient") {
  Gen gen(33);
  auto tl = gen.normal({3, 2, 2}).set_requires_grad(true);
  auto sl = gen.normal({3, 2, 2}).set_requires_grad(true);
  pixel_kl_loss(softmax_scores(tl), softmax_scores(sl)).backward();
  CHECK_FALSE(tl.grad().defined());
  CHECK(sl.grad().abs().sum().item<double>() > 0.0);
}

TEST_CASE("property: pixel KL is non-negative") {
  Gen gen(34);
  for (int i = 0; i < 100; ++i) {
    const auto c = gen.integer(2, 6);
    const auto t = gen.probabilities(c, 2, 3);
    const auto s = gen.probabilities(c, 2, 3);
    CHECK(pixel_kl_loss(t, s).item<double>() >= -1e-7);
  }
}

TEST_CASE("gradient check: KL through softmax") {
  Gen gen(35);
  const auto teacher = softmax_scores(gen.normal({3, 2, 2}));
  const auto logits = gen.normal({3, 2, 2});
  const auto g = testing::gradient_check(
      [&](const torch::Tensor& x) { return pixel_kl_loss(teacher, softmax_scores(x)); }, logits);
  CHECK(g.max_rel_error < 1e-3);
}

TEST_CASE("total_loss") {
  const LossWeights paper;
  CHECK(total_loss(0, 0, 0, 0, 0, paper).total == 0.0);
  CHECK(total_loss(1, 1, 1, 1, 1, paper).total == doctest::Approx(60.9).epsilon(1e-12));
  const LossWeights off{0, 0, 0};
  CHECK(total_loss(0.7, 3, 4, 5, 6, off).total == 0.7);

  // Slope in l_adv is exactly -lambda2.
  const auto a = total_loss(1, 2, 3, 4, 5, paper);
  const auto b = total_loss(1, 2, 3.5, 4, 5, paper);
  CHECK((b.total - a.total) / 0.5 == doctest::Approx(-paper.lambda2).epsilon(1e-12));

  const auto br = total_loss(0.3, 0.2, -1.7, 0.01, 0.02, paper);
  CHECK(std::abs(br.total - br.recombine(paper)) < 1e-9);
  CHECK_THROWS_AS(total_loss(NAN, 0, 0, 0, 0, paper), ValueError);
  CHECK_THROWS_AS((LossWeights{-1, 0, 0}.validate()), ValueError);
}

TEST_CASE("total_objective matches the scalar form") {
  const LossWeights w;
  auto f = [](double v) { return torch::tensor(v, torch::kFloat); };
  const auto t = total_objective(f(0.3), f(0.2), f(-1.7), f(0.01), f(0.02), w);
  const auto s = total_loss(f(0.3).item<double>(), f(0.2).item<double>(), f(-1.7).item<double>(),
                            f(0.01).item<double>(), f(0.02).item<double>(), w);
  CHECK(t.item<double>() == s.total);
  // Undefined terms count as zero.
  CHECK(total_objective(f(0.5), {}, {}, {}, {}, w).item<double>() == doctest::Approx(0.5));
}

TEST_CASE("loss breakdown CSV") {
  CHECK(LossBreakdown::csv_header() == "step,l_ce,l_p,l_adv,l_s,l_c,total");
  const LossBreakdown b{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const auto row = b.csv_row(7);
  CHECK(row.rfind("7,", 0) == 0);
  CHECK(std::count(row.begin(), row.end(), ',') == 6);
}

TEST_CASE("masked cross-entropy") {
  const auto labels = torch::tensor({0, 1, 2, 1}, torch::kLong).view({2, 2});
  // Confident and correct everywhere.
  auto logits = torch::full({3, 2, 2}, -1e4, torch::kDouble);
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) logits[labels[y][x].item<std::int64_t>()][y][x] = 1e4;
  }
  CHECK(masked_cross_entropy(logits, labels).item<double>() == doctest::Approx(0.0));

  const auto uniform = torch::zeros({6, 2, 2}, torch::kDouble);
  CHECK(masked_cross_entropy(uniform, labels).item<double>() == doctest::Approx(std::log(6.0)).epsilon(1e-12));

  // Masking: ignoring half the pixels equals the loss on the kept half alone.
  Gen gen(36);
  const auto lg = gen.normal({1, 3, 2, 4});
  auto lab = gen.labels({1, 2, 4}, 3);
  auto half = lab.clone();
  half.index_put_({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(2, 4)}, 255);
  const auto kept = masked_cross_entropy(lg.index({torch::indexing::Slice(), torch::indexing::Slice(),
                                                   torch::indexing::Slice(), torch::indexing::Slice(0, 2)}),
                                         lab.index({torch::indexing::Slice(), torch::indexing::Slice(),
                                                    torch::indexing::Slice(0, 2)}));
  CHECK(masked_cross_entropy(lg, half).item<double>() == doctest::Approx(kept.item<double>()).epsilon(1e-12));

  // Ignored pixels carry no gradient.
  auto x = lg.clone().set_requires_grad(true);
  masked_cross_entropy(x, half).backward();
  const auto g = x.grad().index({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(),
                                 torch::indexing::Slice(2, 4)});
  CHECK(g.abs().max().item<double>() == 0.0);

  CHECK_THROWS_AS(masked_cross_entropy(uniform, torch::full({2, 2}, 255, torch::kLong)), ValueError);
  CHECK_THROWS_AS(masked_cross_entropy(uniform, torch::full({2, 2}, 7, torch::kLong)), ValueError);
  CHECK_THROWS_AS(masked_cross_entropy(uniform, torch::zeros({3, 3}, torch::kLong)), ShapeError);
}

TEST_CASE("resize_scores") {
  const auto s = torch::rand({1, 3, 4, 4});
  CHECK(torch::equal(resize_scores(s, 4, 4), s));
  CHECK(resize_scores(s, 8, 6).sizes() == torch::IntArrayRef{1, 3, 8, 6});
  const auto c = torch::full({2, 3, 3}, 0.5);
  CHECK(testing::max_abs_diff(resize_scores(c, 7, 5), torch::full({2, 7, 5}, 0.5)) < 1e-7);
}

TEST_CASE("dual relation loss: identity and projection") {
  torch::manual_seed(0);
  Gen gen(37);
  DualRelationLoss same(4, 4);
  CHECK_FALSE(same->has_projection());
  CHECK(same->parameters().empty());
  const auto f = gen.normal({2, 4, 5, 5}, 1.0, torch::kFloat);
  CHECK(same->spatial(f, f).item<double>() < 1e-7);
  CHECK(same->channel(f, f).item<double>() < 1e-7);

  DualRelationLoss lifted(2, 6);
  CHECK(lifted->has_projection());
  const auto t = gen.normal({2, 6, 4, 4}, 1.0, torch::kFloat);
  const auto s = gen.normal({2, 2, 4, 4}, 1.0, torch::kFloat);
  CHECK(lifted->channel(t, s).item<double>() >= 0.0);
  CHECK(lifted->spatial(t, s).item<double>() >= 0.0);
}

TEST_CASE("dual relation loss: pooling bound and resolution alignment") {
  Gen gen(38);
  RelationLossOptions opts;
  opts.pool_h = 4;
  opts.pool_w = 3;
  DualRelationLoss loss(3, 3, opts);
  const auto t = gen.normal({1, 3, 12, 12}, 1.0, torch::kFloat);
  const auto s = gen.normal({1, 3, 6, 6}, 1.0, torch::kFloat);
  const auto [pt, ps] = loss->align(t, s);
  CHECK(pt.sizes() == torch::IntArrayRef{1, 3, 4, 3});
  CHECK(ps.sizes() == torch::IntArrayRef{1, 3, 4, 3});
  CHECK(std::isfinite(loss->spatial(t, s).item<double>()));
}

TEST_CASE("dual relation loss: teacher side is detached") {
  Gen gen(39);
  DualRelationLoss loss(3, 3);
  auto t = gen.normal({1, 3, 3, 3}, 1.0, torch::kFloat).set_requires_grad(true);
  auto s = gen.normal({1, 3, 3, 3}, 1.0, torch::kFloat).set_requires_grad(true);
  (loss->spatial(t, s) + loss->channel(t, s)).backward();
  CHECK_FALSE(t.grad().defined());
  CHECK(s.grad().defined());
}

}  // TEST_SUITE
