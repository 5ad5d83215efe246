#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "ermc/error.hpp"
#include "ermc/lp_geometry.hpp"
#include "ermc/mlp.hpp"
#include "ermc/parallel.hpp"
#include "ermc/random.hpp"
#include "ermc/tensor.hpp"

namespace ermc {

// Anything that can be attacked white-box: class probabilities, per-sample
// cross-entropy and its per-sample input gradient.
template <class C>
concept Classifier = requires(const C& c, const Matrix& x, std::span<const int> y) {
  { forward(c, x) } -> std::same_as<Matrix>;
  { sample_losses(c, x, y) } -> std::same_as<std::vector<double>>;
  { sample_loss_grads(c, x, y) } -> std::same_as<SampleGrads>;
  { input_dim(c) } -> std::convertible_to<std::size_t>;
  { num_classes(c) } -> std::convertible_to<std::size_t>;
};

enum class StepRule { raw_gradient, steepest };
enum class InitRule { zero, random_in_ball };

struct AttackConfig {
  NormBall ball;
  int steps = 10;
  double step_size = 0.0;
  StepRule step_rule = StepRule::steepest;
  InitRule init_rule = InitRule::zero;
  std::uint64_t seed = 0;

  // Steepest-rule attack with step size 2 * eps / steps.
  static AttackConfig make(Norm p, double epsilon, int steps = 10, std::uint64_t seed = 0) {
    AttackConfig cfg;
    cfg.ball = {p, epsilon};
    cfg.steps = steps;
    cfg.step_size = steps > 0 ? 2.0 * epsilon / steps : 0.0;
    cfg.seed = seed;
    return cfg;
  }
};

inline void validate(const AttackConfig& cfg) {
  if (cfg.steps < 1) throw Error(ErrorCode::config, "attack needs at least one step");
  if (!(cfg.ball.epsilon >= 0.0)) throw Error(ErrorCode::config, "attack budget must be >= 0");
  if (cfg.ball.epsilon > 0.0 && !(cfg.step_size > 0.0)) {
    throw Error(ErrorCode::config, "attack step size must be positive");
  }
}

// Multi steepest descent over the l1 and l-infinity threat models.
struct MsdConfig {
  AttackConfig l1;
  AttackConfig linf;

  static MsdConfig make(double eps_1, double eps_inf, int steps = 10, std::uint64_t seed = 0) {
    return {AttackConfig::make(Norm::l1, eps_1, steps, seed),
            AttackConfig::make(Norm::linf, eps_inf, steps, seed)};
  }
};

inline void validate(const MsdConfig& cfg) {
  validate(cfg.l1);
  validate(cfg.linf);
  if (cfg.l1.ball.p != Norm::l1 || cfg.linf.ball.p != Norm::linf) {
    throw Error(ErrorCode::config, "MSD needs one l1 and one linf attack");
  }
  if (cfg.l1.steps != cfg.linf.steps) {
    throw Error(ErrorCode::config, "MSD attacks must share the step count");
  }
}

using Attack = std::variant<AttackConfig, MsdConfig>;

// 0-based index of the largest loss; the earliest iterate wins ties.
inline std::size_t best_iterate_index(std::span<const double> losses) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) {
    if (losses[i] > losses[best]) best = i;
  }
  return best;
}

// losses[k][r] is sample r's loss at iterate k. Returns, per sample, the row
// of the iterate with maximal loss.
inline Matrix best_of_trajectory(const std::vector<std::vector<double>>& losses,
                                 const std::vector<Matrix>& iterates) {
  if (iterates.empty() || losses.size() != iterates.size()) {
    throw Error(ErrorCode::domain, "need one loss record per recorded iterate");
  }
  Matrix out(iterates.front().rows(), iterates.front().cols());
  std::vector<double> column(iterates.size());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t k = 0; k < iterates.size(); ++k) column[k] = losses[k][r];
    const auto k = best_iterate_index(column);
    std::ranges::copy(iterates[k].row(r), out.row(r).begin());
  }
  return out;
}

namespace detail {

inline constexpr std::size_t kMinRowsPerWorker = 64;

inline void ascent_step(std::span<double> delta, std::span<const double> grad,
                        const AttackConfig& cfg) {
  if (cfg.step_rule == StepRule::raw_gradient) {
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += cfg.step_size * grad[i];
  } else {
    const auto dir = steepest_direction(grad, cfg.ball.p);
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += cfg.step_size * dir[i];
  }
  project_inplace(delta, cfg.ball);
}

inline void init_row(std::span<double> delta, const AttackConfig& cfg, std::size_t sample) {
  if (cfg.init_rule == InitRule::zero) return;
  Rng rng(derive_seed(cfg.seed, sample));
  for (double& x : delta) x = rng.uniform(-cfg.ball.epsilon, cfg.ball.epsilon);
  project_inplace(delta, cfg.ball);
}

// Keeps rows of candidate whose loss strictly beats the best so far.
inline void keep_better(Matrix& best, std::vector<double>& best_loss, const Matrix& candidate,
                        std::span<const double> loss) {
  for (std::size_t r = 0; r < best.rows(); ++r) {
    if (loss[r] > best_loss[r]) {
      best_loss[r] = loss[r];
      std::ranges::copy(candidate.row(r), best.row(r).begin());
    }
  }
}

template <Classifier C>
Matrix pgd_rows(const C& model, const Matrix& x, std::span<const int> y,
                const AttackConfig& cfg, std::size_t first_sample) {
  Matrix delta(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) init_row(delta.row(r), cfg, first_sample + r);
  auto current = sample_loss_grads(model, add(x, delta), y);
  Matrix best = delta;
  std::vector<double> best_loss = current.losses;
  for (int j = 1; j <= cfg.steps; ++j) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
      ascent_step(delta.row(r), current.grad_inputs.row(r), cfg);
    }
    const Matrix adv = add(x, delta);
    if (j < cfg.steps) {
      current = sample_loss_grads(model, adv, y);
    } else {
      current.losses = sample_losses(model, adv, y);
    }
    keep_better(best, best_loss, delta, current.losses);
  }
  return best;
}

}  // namespace detail

// Per-iteration record of the MSD candidate selection.
struct MsdIteration {
  Matrix start;
  Matrix candidate_l1;
  Matrix candidate_linf;
  std::vector<double> loss_l1;
  std::vector<double> loss_linf;
  std::vector<std::uint8_t> chose_l1;
};

using MsdTrace = std::vector<MsdIteration>;

namespace detail {

template <Classifier C>
Matrix msd_rows(const C& model, const Matrix& x, std::span<const int> y, const MsdConfig& cfg,
                MsdTrace* trace) {
  Matrix delta(x.rows(), x.cols());
  Matrix best = delta;
  std::vector<double> best_loss = sample_losses(model, x, y);
  for (int j = 1; j <= cfg.l1.steps; ++j) {
    const auto current = sample_loss_grads(model, add(x, delta), y);
    Matrix cand_l1 = delta;
    Matrix cand_linf = delta;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      ascent_step(cand_l1.row(r), current.grad_inputs.row(r), cfg.l1);
      ascent_step(cand_linf.row(r), current.grad_inputs.row(r), cfg.linf);
    }
    const auto loss_l1 = sample_losses(model, add(x, cand_l1), y);
    const auto loss_linf = sample_losses(model, add(x, cand_linf), y);
    std::vector<std::uint8_t> chose_l1(x.rows());
    std::vector<double> chosen_loss(x.rows());
    Matrix next(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      chose_l1[r] = loss_l1[r] >= loss_linf[r] ? 1 : 0;
      const Matrix& src = chose_l1[r] ? cand_l1 : cand_linf;
      chosen_loss[r] = chose_l1[r] ? loss_l1[r] : loss_linf[r];
      std::ranges::copy(src.row(r), next.row(r).begin());
    }
    if (trace != nullptr) {
      trace->push_back({delta, cand_l1, cand_linf, loss_l1, loss_linf, chose_l1});
    }
    delta = std::move(next);
    keep_better(best, best_loss, delta, chosen_loss);
  }
  return best;
}

}  // namespace detail

// Projected gradient ascent on the cross-entropy inside cfg.ball. Each row
// returns its best iterate over the trajectory (initial point included).
template <Classifier C>
Matrix pgd_attack(const C& model, const LabeledBatch& batch, const AttackConfig& cfg) {
  validate(cfg);
  validate_batch(batch, input_dim(model), num_classes(model));
  Matrix out(batch.inputs.rows(), batch.inputs.cols());
  if (cfg.ball.epsilon == 0.0) return out;
  parallel_chunks(batch.size(), detail::kMinRowsPerWorker, [&](std::size_t first, std::size_t count) {
    const Matrix x = slice_rows(batch.inputs, first, count);
    const std::span<const int> y(batch.labels.data() + first, count);
    const Matrix part = detail::pgd_rows(model, x, y, cfg, first);
    std::ranges::copy(part.values(), out.row(first).begin());
  });
  return out;
}

// MSD inner maximization starting from zero. At every iteration both the l1
// and l-infinity candidates are formed from the current perturbation and,
// per sample, the one with the larger loss is kept (l1 on ties). Returns the
// best iterate over the trajectory.
template <Classifier C>
Matrix msd_perturb(const C& model, const LabeledBatch& batch, const MsdConfig& cfg,
                   MsdTrace* trace = nullptr) {
  validate(cfg);
  validate_batch(batch, input_dim(model), num_classes(model));
  Matrix out(batch.inputs.rows(), batch.inputs.cols());
  if (cfg.l1.ball.epsilon == 0.0 && cfg.linf.ball.epsilon == 0.0 && trace == nullptr) return out;
  if (trace != nullptr) {
    trace->clear();
    return detail::msd_rows(model, batch.inputs, batch.labels, cfg, trace);
  }
  parallel_chunks(batch.size(), detail::kMinRowsPerWorker, [&](std::size_t first, std::size_t count) {
    const Matrix x = slice_rows(batch.inputs, first, count);
    const std::span<const int> y(batch.labels.data() + first, count);
    const Matrix part = detail::msd_rows(model, x, y, cfg, nullptr);
    std::ranges::copy(part.values(), out.row(first).begin());
  });
  return out;
}

template <Classifier C>
Matrix perturb(const C& model, const LabeledBatch& batch, const Attack& attack) {
  return std::visit(
      [&](const auto& cfg) -> Matrix {
        if constexpr (std::is_same_v<std::decay_t<decltype(cfg)>, AttackConfig>) {
          return pgd_attack(model, batch, cfg);
        } else {
          return msd_perturb(model, batch, cfg);
        }
      },
      attack);
}

// The attack with its random-init seed moved to an independent stream.
inline Attack reseeded(const Attack& attack, std::uint64_t stream) {
  Attack out = attack;
  std::visit(
      [&](auto& cfg) {
        if constexpr (std::is_same_v<std::decay_t<decltype(cfg)>, AttackConfig>) {
          cfg.seed = derive_seed(cfg.seed, stream);
        } else {
          cfg.l1.seed = derive_seed(cfg.l1.seed, stream);
          cfg.linf.seed = derive_seed(cfg.linf.seed, stream);
        }
      },
      out);
  return out;
}

}  // namespace ermc
