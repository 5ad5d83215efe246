#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "ermc/attacks.hpp"
#include "ermc/error.hpp"
#include "ermc/mlp.hpp"
#include "ermc/random.hpp"
#include "ermc/tensor.hpp"
#include "ermc/training.hpp"

namespace ermc {

// Quadratic Bezier path in weight space,
//   phi(t) = (1-t)^2 theta1 + 2t(1-t) control + t^2 theta2.
// The endpoints are fixed at construction; only the control point can change.
class CurveSpec {
 public:
  CurveSpec(LayerDims dims, ParamVector theta1, ParamVector control, ParamVector theta2)
      : dims_(std::move(dims)),
        theta1_(std::move(theta1)),
        control_(std::move(control)),
        theta2_(std::move(theta2)) {
    validate_architecture(dims_);
    const auto n = param_count(dims_);
    if (theta1_.size() != n || control_.size() != n || theta2_.size() != n) {
      throw Error(ErrorCode::dimension, "curve points must match the architecture");
    }
  }

  // Control point at the midpoint, so the initial path is the straight line.
  static CurveSpec linear(const MlpModel& start, const MlpModel& end) {
    if (start.dims() != end.dims()) {
      throw Error(ErrorCode::dimension, "curve endpoints have different architectures");
    }
    ParamVector mid(start.params().size());
    for (std::size_t i = 0; i < mid.size(); ++i) {
      mid[i] = 0.5 * (start.params()[i] + end.params()[i]);
    }
    return CurveSpec(start.dims(), start.params(), std::move(mid), end.params());
  }

  const LayerDims& dims() const noexcept { return dims_; }
  const ParamVector& theta1() const noexcept { return theta1_; }
  const ParamVector& theta2() const noexcept { return theta2_; }
  const ParamVector& control() const noexcept { return control_; }
  ParamVector& control() noexcept { return control_; }

  bool operator==(const CurveSpec&) const = default;

 private:
  LayerDims dims_;
  ParamVector theta1_;
  ParamVector control_;
  ParamVector theta2_;
};

inline void check_curve_t(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error(ErrorCode::domain, "curve parameter t must lie in [0, 1]");
}

// Endpoints are returned exactly at t = 0 and t = 1.
inline ParamVector qbc_point(const CurveSpec& curve, double t) {
  check_curve_t(t);
  if (t == 0.0) return curve.theta1();
  if (t == 1.0) return curve.theta2();
  const double w1 = (1.0 - t) * (1.0 - t);
  const double wc = 2.0 * t * (1.0 - t);
  const double w2 = t * t;
  ParamVector out(curve.theta1().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = w1 * curve.theta1()[i] + wc * curve.control()[i] + w2 * curve.theta2()[i];
  }
  return out;
}

inline MlpModel model_at(const CurveSpec& curve, double t) {
  return MlpModel(curve.dims(), qbc_point(curve, t));
}

// d phi(t) / d control = 2t(1-t) I, so the control-point gradient is the
// gradient at phi(t) scaled by 2t(1-t).
inline ParamVector control_gradient(double t, const ParamVector& grad_at_point) {
  const double factor = 2.0 * t * (1.0 - t);
  ParamVector out(grad_at_point.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * grad_at_point[i];
  return out;
}

enum class PathObjective {
  clean,    // plain mode connectivity
  msd_max,  // worst of l1/linf per MSD iteration
  summed,   // l1 PGD loss + linf PGD loss
};

struct CurveTrainConfig {
  TrainConfig train;
  MsdConfig msd;
  PathObjective objective = PathObjective::msd_max;
};

struct CurveTrainResult {
  CurveSpec curve;
  std::vector<double> loss_trace;
};

namespace detail {

inline LossAndGrads path_loss(const MlpModel& model, const LabeledBatch& batch,
                              const CurveTrainConfig& cfg, std::uint64_t batch_seed_stream) {
  if (cfg.objective == PathObjective::clean) return loss_and_grads(model, batch);
  const Attack msd = reseeded(cfg.msd, batch_seed_stream);
  const auto& seeded = std::get<MsdConfig>(msd);
  if (cfg.objective == PathObjective::msd_max) {
    const LabeledBatch adv{add(batch.inputs, msd_perturb(model, batch, seeded)), batch.labels};
    return loss_and_grads(model, adv);
  }
  const LabeledBatch adv1{add(batch.inputs, pgd_attack(model, batch, seeded.l1)), batch.labels};
  const LabeledBatch adv_inf{add(batch.inputs, pgd_attack(model, batch, seeded.linf)), batch.labels};
  LossAndGrads total = loss_and_grads(model, adv1);
  const LossAndGrads other = loss_and_grads(model, adv_inf);
  total.loss += other.loss;
  for (std::size_t i = 0; i < total.grads.grad_params.size(); ++i) {
    total.grads.grad_params[i] += other.grads.grad_params[i];
  }
  return total;
}

}  // namespace detail

// For each batch: draw t ~ U(0,1), build phi(t), perturb the batch according
// to the objective, and take an SGD step on the control point alone.
inline CurveTrainResult train_robust_curve(CurveSpec curve, const LabeledBatch& data,
                                           const CurveTrainConfig& cfg) {
  validate(cfg.train);
  if (cfg.objective != PathObjective::clean) validate(cfg.msd);
  validate_batch(data, curve.dims().front(), curve.dims().back());
  BatchSchedule schedule(data.size(), cfg.train.batch_size, cfg.train.seed, cfg.train.shuffle);
  Rng t_rng(derive_seed(cfg.train.seed, stream::curve_t));
  SgdMomentum opt(curve.control().size(), cfg.train.learning_rate, cfg.train.momentum);
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    double total = 0.0;
    const auto batches = schedule.next_epoch();
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const double t = t_rng.uniform();
      const LabeledBatch batch = gather(data, batches[b]);
      const MlpModel point = model_at(curve, t);
      LossAndGrads lg;
      try {
        lg = detail::path_loss(point, batch, cfg, batch_stream(epoch, b));
      } catch (const Error& e) {
        if (e.code() == ErrorCode::numeric_overflow) throw DivergedError(epoch, b, t);
        throw;
      }
      const ParamVector g = control_gradient(t, lg.grads.grad_params);
      opt.step(curve.control().values(), g.values());
      if (!curve.control().is_finite()) throw DivergedError(epoch, b, t);
      total += lg.loss * static_cast<double>(batch.size());
    }
    trace.push_back(total / static_cast<double>(data.size()));
  }
  return {std::move(curve), std::move(trace)};
}

// Classic mode-connectivity objective: clean loss only.
inline CurveTrainResult train_plain_curve(CurveSpec curve, const LabeledBatch& data,
                                          const TrainConfig& cfg) {
  CurveTrainConfig plain;
  plain.train = cfg;
  plain.objective = PathObjective::clean;
  return train_robust_curve(std::move(curve), data, plain);
}

}  // namespace ermc
