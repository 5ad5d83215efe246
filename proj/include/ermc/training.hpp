#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include "ermc/attacks.hpp"
#include "ermc/error.hpp"
#include "ermc/mlp.hpp"
#include "ermc/random.hpp"
#include "ermc/tensor.hpp"

namespace ermc {

inline constexpr std::size_t kFinetuneEpochs = 10;

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::optional<Attack> attack;  // empty: clean training
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw Error(ErrorCode::config, "batch size must be positive");
  if (!(cfg.learning_rate > 0.0)) throw Error(ErrorCode::config, "learning rate must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw Error(ErrorCode::config, "momentum must lie in [0, 1)");
  }
  if (cfg.attack) std::visit([](const auto& a) { validate(a); }, *cfg.attack);
}

// Seed streams carved out of a run seed.
namespace stream {
inline constexpr std::uint64_t shuffle = 1;
inline constexpr std::uint64_t curve_t = 2;
inline constexpr std::uint64_t attack = 3;
}  // namespace stream

// Minibatch index lists for each epoch, Fisher-Yates shuffled when enabled.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n, std::size_t batch_size, std::uint64_t seed, bool shuffle)
      : order_(n), batch_size_(batch_size), shuffle_(shuffle), rng_(derive_seed(seed, stream::shuffle)) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::vector<std::vector<std::size_t>> next_epoch() {
    if (shuffle_) rng_.shuffle(order_);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t first = 0; first < order_.size(); first += batch_size_) {
      const std::size_t last = std::min(order_.size(), first + batch_size_);
      batches.emplace_back(order_.begin() + static_cast<std::ptrdiff_t>(first),
                           order_.begin() + static_cast<std::ptrdiff_t>(last));
    }
    return batches;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  bool shuffle_;
  Rng rng_;
};

// Heavy-ball SGD: v <- momentum * v + g, x <- x - lr * v.
class SgdMomentum {
 public:
  SgdMomentum(std::size_t n, double learning_rate, double momentum)
      : velocity_(n, 0.0), lr_(learning_rate), momentum_(momentum) {}

  void step(std::span<double> params, std::span<const double> grad) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity_[i] = momentum_ * velocity_[i] + grad[i];
      params[i] -= lr_ * velocity_[i];
    }
  }

 private:
  std::vector<double> velocity_;
  double lr_;
  double momentum_;
};

inline std::uint64_t batch_stream(std::size_t epoch, std::size_t batch) {
  return (static_cast<std::uint64_t>(epoch) << 32) ^ static_cast<std::uint64_t>(batch) ^
         (stream::attack << 60);
}

struct BatchReport {
  std::size_t epoch;
  std::size_t batch;
  double clean_loss;     // loss on the unperturbed batch
  double training_loss;  // loss the step was taken on
};

using BatchObserver = std::function<void(const BatchReport&)>;

struct TrainResult {
  MlpModel model;
  std::vector<double> loss_trace;  // per-epoch sample-weighted mean training loss
};

// Minibatch SGD on the mean cross-entropy. With an attack configured, every
// batch is replaced by x + delta from that attack before the step.
inline TrainResult train(MlpModel model, const LabeledBatch& data, const TrainConfig& cfg,
                         const BatchObserver& observer = {}) {
  validate(cfg);
  validate_batch(data, model.input_dim(), model.num_classes());
  BatchSchedule schedule(data.size(), cfg.batch_size, cfg.seed, cfg.shuffle);
  SgdMomentum opt(model.params().size(), cfg.learning_rate, cfg.momentum);
  std::vector<double> trace;
  trace.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    const auto batches = schedule.next_epoch();
    for (std::size_t b = 0; b < batches.size(); ++b) {
      LabeledBatch batch = gather(data, batches[b]);
      const LabeledBatch* step_batch = &batch;
      LabeledBatch adversarial;
      if (cfg.attack) {
        const Attack attack = reseeded(*cfg.attack, batch_stream(epoch, b));
        adversarial.inputs = add(batch.inputs, perturb(model, batch, attack));
        adversarial.labels = batch.labels;
        step_batch = &adversarial;
      }
      LossAndGrads lg;
      try {
        lg = loss_and_grads(model, *step_batch);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::numeric_overflow) throw DivergedError(epoch, b);
        throw;
      }
      if (observer) {
        const double clean = step_batch == &batch ? lg.loss : loss_and_grads(model, batch).loss;
        observer({epoch, b, clean, lg.loss});
      }
      total += lg.loss * static_cast<double>(batch.size());
      opt.step(model.params().values(), lg.grads.grad_params.values());
    }
    if (!model.params().is_finite()) throw DivergedError(epoch);
    trace.push_back(total / static_cast<double>(data.size()));
  }
  return {std::move(model), std::move(trace)};
}

// Retrains a copy of an already trained model under a new threat model.
inline TrainResult finetune(const MlpModel& model, const LabeledBatch& data,
                            const AttackConfig& new_attack, TrainConfig cfg,
                            std::size_t epochs = kFinetuneEpochs) {
  cfg.epochs = epochs;
  cfg.attack = new_attack;
  return train(model, data, cfg);
}

}  // namespace ermc
