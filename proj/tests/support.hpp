#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "ermc/ermc.hpp"

namespace ermc::testing {

// Model with random weights and random (nonzero) biases.
inline MlpModel random_model(const LayerDims& dims, std::uint64_t seed, double scale = 1.0) {
  MlpModel m = mlp_init(dims, seed);
  Rng rng(derive_seed(seed, 99));
  for (double& v : m.params().values()) v = scale * (v + 0.3 * rng.normal());
  return m;
}

inline LabeledBatch random_batch(std::size_t n, std::size_t d, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  LabeledBatch b{Matrix(n, d), std::vector<int>(n)};
  for (double& v : b.inputs.values()) v = rng.uniform(-1.0, 1.0);
  for (int& y : b.labels) y = static_cast<int>(rng.below(k));
  return b;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t d, double scale = 1.0) {
  std::vector<double> v(d);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Central difference of f around x along every coordinate.
inline std::vector<double> central_difference(const std::function<double(std::span<const double>)>& f,
                                              std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// |a - b|_2 / max(|a|_2, |b|_2), zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

// Fresh directory removed again on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ermc-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline double median(std::vector<double> v) {
  std::ranges::sort(v);
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Desk-scale two-moons experiment shared by the training, curve and
// acceptance suites.

struct DeskSetup {
  std::size_t n = 1000;
  double noise = 0.1;
  double test_fraction = 0.3;
  LayerDims dims{2, 16, 2};
  std::size_t epochs = 180;
  std::size_t curve_epochs = 60;
  double eps_inf = 0.15;
  double eps_1 = 0.27;
  double eps_2 = 0.19;
  std::size_t grid = 21;
};

struct DeskData {
  Dataset train;
  Dataset test;
};

inline DeskData desk_data(const DeskSetup& s, int seed) {
  auto all = gen_two_moons(s.n, s.noise, 100 + static_cast<std::uint64_t>(seed));
  auto [train, test] = train_test_split(all, s.test_fraction, 200 + static_cast<std::uint64_t>(seed));
  return {std::move(train), std::move(test)};
}

inline TrainConfig desk_train_config(const DeskSetup& s, int seed) {
  TrainConfig cfg;
  cfg.epochs = s.epochs;
  cfg.seed = 300 + static_cast<std::uint64_t>(seed);
  return cfg;
}

inline MlpModel desk_init(const DeskSetup& s, int seed) {
  return mlp_init(s.dims, 400 + static_cast<std::uint64_t>(seed));
}

inline PgdSuite desk_suite(const DeskSetup& s) { return PgdSuite::make(s.eps_inf, s.eps_2, s.eps_1); }

struct DeskEndpoints {
  MlpModel clean;
  MlpModel linf;  // AT-linf
  MlpModel l1;    // AT-linf fine-tuned with AT-l1
};

inline DeskEndpoints desk_endpoints(const DeskSetup& s, const DeskData& data, int seed) {
  const auto cfg = desk_train_config(s, seed);
  const auto init = desk_init(s, seed);
  auto clean = train(init, data.train, cfg).model;
  TrainConfig at = cfg;
  at.attack = AttackConfig::make(Norm::linf, s.eps_inf);
  auto linf = train(init, data.train, at).model;
  auto l1 = finetune(linf, data.train, AttackConfig::make(Norm::l1, s.eps_1), cfg).model;
  return {std::move(clean), std::move(linf), std::move(l1)};
}

inline CurveSpec desk_robust_curve(const DeskSetup& s, const DeskData& data, const DeskEndpoints& e,
                                   int seed) {
  CurveTrainConfig cc;
  cc.train = desk_train_config(s, seed);
  cc.train.epochs = s.curve_epochs;
  cc.msd = MsdConfig::make(s.eps_1, s.eps_inf);
  return train_robust_curve(CurveSpec::linear(e.linf, e.l1), data.train, cc).curve;
}

inline double accuracy(const MlpModel& m, const LabeledBatch& data) {
  const Matrix p = forward(m, data.inputs);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    hits += argmax(p.row(r)) == static_cast<std::size_t>(data.labels[r]) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

}  // namespace ermc::testing
