#pragma once

// Independent oracles, random generators and a finite-difference gradient
// checker shared by the unit tests and the acceptance binary. Nothing here
// calls the library code it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <torch/torch.h>

namespace drd::testing {

// Hand-rolled generator: keeps the tests independent of torch's RNG stream.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::int64_t integer(std::int64_t lo, std::int64_t hi) {  // inclusive
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return uniform() < p; }

  torch::Tensor normal(std::vector<std::int64_t> shape, double scale = 1.0,
                       torch::ScalarType dtype = torch::kDouble) {
    auto t = torch::empty(shape, torch::kDouble);
    auto* p = t.data_ptr<double>();
    std::normal_distribution<double> dist(0.0, scale);
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = dist(rng_);
    return t.to(dtype);
  }

  torch::Tensor labels(std::vector<std::int64_t> shape, std::int64_t classes, double ignore_rate = 0.0,
                       std::int64_t ignore_index = 255) {
    auto t = torch::empty(shape, torch::kLong);
    auto* p = t.data_ptr<std::int64_t>();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = coin(ignore_rate) ? ignore_index : integer(0, classes - 1);
    return t;
  }

  // Random probability map (c, H, W) in double.
  torch::Tensor probabilities(std::int64_t c, std::int64_t h, std::int64_t w) {
    auto t = torch::empty({c, h, w}, torch::kDouble);
    auto a = t.accessor<double, 3>();
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        double sum = 0.0;
        for (std::int64_t k = 0; k < c; ++k) sum += (a[k][y][x] = uniform(0.05, 1.0));
        for (std::int64_t k = 0; k < c; ++k) a[k][y][x] /= sum;
      }
    }
    return t;
  }

  std::vector<std::int64_t> permutation(std::int64_t n) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    std::shuffle(p.begin(), p.end(), rng_);
    return p;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// Column i of the C x N flattening, as plain numbers.
inline std::vector<std::vector<double>> columns(const torch::Tensor& f) {
  auto d = f.to(torch::kDouble).contiguous();
  const auto c = d.size(0);
  const auto n = d.size(1) * d.size(2);
  auto flat = d.view({c, n});
  auto a = flat.accessor<double, 2>();
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(c)));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < c; ++k) cols[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = a[k][i];
  }
  return cols;
}

// Rows of the C x N flattening.
inline std::vector<std::vector<double>> rows(const torch::Tensor& f) {
  auto d = f.to(torch::kDouble).contiguous();
  const auto c = d.size(0);
  const auto n = d.size(1) * d.size(2);
  const auto flat = d.view({c, n});
  auto a = flat.accessor<double, 2>();
  std::vector<std::vector<double>> r(static_cast<std::size_t>(c), std::vector<double>(static_cast<std::size_t>(n)));
  for (std::int64_t k = 0; k < c; ++k) {
    for (std::int64_t i = 0; i < n; ++i) r[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] = a[k][i];
  }
  return r;
}

// exp(v_j . v_i) / sum_j exp(v_j . v_i) by explicit double loops.
inline torch::Tensor naive_affinity_softmax(const std::vector<std::vector<double>>& vecs) {
  const auto n = static_cast<std::int64_t>(vecs.size());
  auto out = torch::empty({n, n}, torch::kDouble);
  auto o = out.accessor<double, 2>();
  for (std::int64_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < vecs[0].size(); ++k) {
        dot += vecs[static_cast<std::size_t>(j)][k] * vecs[static_cast<std::size_t>(i)][k];
      }
      o[i][j] = std::exp(dot);
      denom += o[i][j];
    }
    for (std::int64_t j = 0; j < n; ++j) o[i][j] /= denom;
  }
  return out;
}

inline torch::Tensor spatial_oracle(const torch::Tensor& f) { return naive_affinity_softmax(columns(f)); }
inline torch::Tensor channel_oracle(const torch::Tensor& f) { return naive_affinity_softmax(rows(f)); }

inline double squared_error_mean_oracle(const torch::Tensor& a, const torch::Tensor& b) {
  auto x = a.to(torch::kDouble).contiguous().view(-1);
  auto y = b.to(torch::kDouble).contiguous().view(-1);
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double d = x[i].item<double>() - y[i].item<double>();
    s += d * d;
  }
  return s / static_cast<double>(x.numel());
}

// (1/N) sum_pixels sum_classes t log(t / max(s, 1e-8)), 0 log 0 = 0.
inline double kl_oracle(const torch::Tensor& teacher, const torch::Tensor& student) {
  auto t = teacher.to(torch::kDouble).contiguous();
  auto s = student.to(torch::kDouble).contiguous();
  auto ta = t.accessor<double, 3>();
  auto sa = s.accessor<double, 3>();
  double total = 0.0;
  for (std::int64_t y = 0; y < t.size(1); ++y) {
    for (std::int64_t x = 0; x < t.size(2); ++x) {
      for (std::int64_t k = 0; k < t.size(0); ++k) {
        const double tv = ta[k][y][x];
        if (tv > 0.0) total += tv * std::log(tv / std::max(sa[k][y][x], 1e-8));
      }
    }
  }
  return total / static_cast<double>(t.size(1) * t.size(2));
}

// Mean over each window of an exact integer-factor average pooling.
inline torch::Tensor window_mean_oracle(const torch::Tensor& f, std::int64_t oh, std::int64_t ow) {
  auto d = f.to(torch::kDouble).contiguous();
  const auto c = d.size(0), h = d.size(1), w = d.size(2);
  const auto kh = h / oh, kw = w / ow;
  auto out = torch::zeros({c, oh, ow}, torch::kDouble);
  auto a = d.accessor<double, 3>();
  auto o = out.accessor<double, 3>();
  for (std::int64_t k = 0; k < c; ++k) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (std::int64_t dy = 0; dy < kh; ++dy) {
          for (std::int64_t dx = 0; dx < kw; ++dx) s += a[k][y * kh + dy][x * kw + dx];
        }
        o[k][y][x] = s / static_cast<double>(kh * kw);
      }
    }
  }
  return out;
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().max().item<double>();
}

// Central differences of a scalar function of one double tensor, compared
// elementwise against autograd. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-3 * max|numeric|) so entries whose true
// gradient is ~0 do not explode the ratio.
struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

inline GradCheck gradient_check(const std::function<torch::Tensor(const torch::Tensor&)>& fn, torch::Tensor x,
                                double step = 1e-4) {
  x = x.to(torch::kDouble).detach().clone();
  auto xg = x.clone().set_requires_grad(true);
  auto y = fn(xg);
  auto analytic = torch::autograd::grad({y}, {xg})[0].detach().contiguous().view(-1);

  auto numeric = torch::empty_like(analytic);
  auto flat = x.view(-1);
  {
    torch::NoGradGuard no_grad;
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      const double orig = flat[i].item<double>();
      flat[i] = orig + step;
      const double up = fn(x).item<double>();
      flat[i] = orig - step;
      const double down = fn(x).item<double>();
      flat[i] = orig;
      numeric[i] = (up - down) / (2.0 * step);
    }
  }
  const double scale = numeric.abs().max().item<double>();
  GradCheck out;
  for (std::int64_t i = 0; i < analytic.numel(); ++i) {
    const double a = analytic[i].item<double>();
    const double n = numeric[i].item<double>();
    const double denom = std::max({std::abs(a), std::abs(n), 1e-3 * scale, 1e-300});
    out.max_rel_error = std::max(out.max_rel_error, std::abs(a - n) / denom);
    out.max_abs_error = std::max(out.max_abs_error, std::abs(a - n));
  }
  return out;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::uint64_t counter = 0;
  auto dir = std::filesystem::temp_directory_path() /
             ("drd-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline bool update_golden() {
  const char* v = std::getenv("DRD_UPDATE_GOLDEN");
  return v != nullptr && std::string(v) == "1";
}

}  // namespace drd::testing
