#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ermc/error.hpp"
#include "ermc/random.hpp"
#include "ermc/tensor.hpp"

namespace ermc {

using LayerDims = std::vector<std::size_t>;

inline void validate_architecture(const LayerDims& dims) {
  if (dims.size() < 2) {
    throw Error(ErrorCode::invalid_architecture, "need at least input and output widths");
  }
  for (auto w : dims) {
    if (w == 0) throw Error(ErrorCode::invalid_architecture, "layer widths must be positive");
  }
  if (dims.back() < 2) {
    throw Error(ErrorCode::invalid_architecture, "need at least two output classes");
  }
}

// Sum over layers of (fan_in + 1) * fan_out.
inline std::size_t param_count(const LayerDims& dims) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) n += (dims[l] + 1) * dims[l + 1];
  return n;
}

// ReLU multilayer perceptron with a softmax head. Per layer the parameters
// are stored as a fan_out x fan_in row-major weight block followed by the
// fan_out biases.
class MlpModel {
 public:
  MlpModel(LayerDims dims, ParamVector params)
      : dims_(std::move(dims)), params_(std::move(params)) {
    validate_architecture(dims_);
    if (params_.size() != param_count(dims_)) {
      throw Error(ErrorCode::dimension, "parameter vector has " + std::to_string(params_.size()) +
                                            " entries, architecture needs " +
                                            std::to_string(param_count(dims_)));
    }
  }

  const LayerDims& dims() const noexcept { return dims_; }
  const ParamVector& params() const noexcept { return params_; }
  ParamVector& params() noexcept { return params_; }

  std::size_t input_dim() const noexcept { return dims_.front(); }
  std::size_t num_classes() const noexcept { return dims_.back(); }
  std::size_t num_layers() const noexcept { return dims_.size() - 1; }

  // Offset of layer l's weight block inside params().
  std::size_t weight_offset(std::size_t layer) const noexcept {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += (dims_[l] + 1) * dims_[l + 1];
    return off;
  }
  std::size_t bias_offset(std::size_t layer) const noexcept {
    return weight_offset(layer) + dims_[layer] * dims_[layer + 1];
  }

  bool operator==(const MlpModel&) const = default;

 private:
  LayerDims dims_;
  ParamVector params_;
};

inline MlpModel mlp_init(const LayerDims& dims, std::uint64_t seed) {
  validate_architecture(dims);
  ParamVector params(param_count(dims));
  Rng rng(seed);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::size_t i = 0; i < fan_in * fan_out; ++i) params[off++] = rng.uniform(-limit, limit);
    off += fan_out;  // biases stay zero
  }
  return MlpModel(dims, std::move(params));
}

namespace detail {

// activations[0] is the input; activations[l] for l >= 1 is the post-ReLU
// output of hidden layer l. logits is the final affine output.
struct ForwardCache {
  std::vector<Matrix> activations;
  Matrix logits;
};

inline void affine(const MlpModel& model, std::size_t layer, const Matrix& in, Matrix& out) {
  const auto& dims = model.dims();
  const std::size_t fan_in = dims[layer], fan_out = dims[layer + 1];
  const auto p = model.params().values();
  const double* w = p.data() + model.weight_offset(layer);
  const double* b = p.data() + model.bias_offset(layer);
  out = Matrix(in.rows(), fan_out);
  for (std::size_t r = 0; r < in.rows(); ++r) {
    const auto x = in.row(r);
    auto y = out.row(r);
    for (std::size_t o = 0; o < fan_out; ++o) {
      double acc = b[o];
      const double* wo = w + o * fan_in;
      for (std::size_t i = 0; i < fan_in; ++i) acc += wo[i] * x[i];
      y[o] = acc;
    }
  }
}

inline ForwardCache run_forward(const MlpModel& model, const Matrix& inputs) {
  if (inputs.cols() != model.input_dim()) {
    throw Error(ErrorCode::dimension, "input width " + std::to_string(inputs.cols()) +
                                          " does not match model input " +
                                          std::to_string(model.input_dim()));
  }
  ForwardCache cache;
  cache.activations.reserve(model.num_layers());
  cache.activations.push_back(inputs);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    Matrix z;
    affine(model, l, cache.activations.back(), z);
    if (l + 1 == model.num_layers()) {
      cache.logits = std::move(z);
    } else {
      for (double& v : z.values()) v = v > 0.0 ? v : 0.0;
      cache.activations.push_back(std::move(z));
    }
  }
  return cache;
}

inline void softmax_rows(Matrix& z) {
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    double mx = row[0];
    for (double v : row) mx = v > mx ? v : mx;
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : row) v /= total;
  }
}

// -log softmax(z)[y], computed as logsumexp(z) - z_y.
inline double cross_entropy(std::span<const double> z, int y) {
  double mx = z[0];
  for (double v : z) mx = v > mx ? v : mx;
  double total = 0.0;
  for (double v : z) total += std::exp(v - mx);
  return std::log(total) - (z[static_cast<std::size_t>(y)] - mx);
}

// Backpropagates dL/dlogits. Accumulates parameter gradients into grad_params
// when given; always returns dL/dinputs.
inline Matrix backward(const MlpModel& model, const ForwardCache& cache, Matrix grad,
                       ParamVector* grad_params) {
  const auto& dims = model.dims();
  const auto p = model.params().values();
  for (std::size_t l = model.num_layers(); l-- > 0;) {
    const Matrix& in = cache.activations[l];
    const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
    const double* w = p.data() + model.weight_offset(l);
    if (grad_params != nullptr) {
      double* gw = grad_params->values().data() + model.weight_offset(l);
      double* gb = grad_params->values().data() + model.bias_offset(l);
      for (std::size_t r = 0; r < in.rows(); ++r) {
        const auto x = in.row(r);
        const auto g = grad.row(r);
        for (std::size_t o = 0; o < fan_out; ++o) {
          const double go = g[o];
          gb[o] += go;
          double* gwo = gw + o * fan_in;
          for (std::size_t i = 0; i < fan_in; ++i) gwo[i] += go * x[i];
        }
      }
    }
    Matrix grad_in(in.rows(), fan_in);
    for (std::size_t r = 0; r < in.rows(); ++r) {
      const auto g = grad.row(r);
      auto gi = grad_in.row(r);
      for (std::size_t o = 0; o < fan_out; ++o) {
        const double go = g[o];
        const double* wo = w + o * fan_in;
        for (std::size_t i = 0; i < fan_in; ++i) gi[i] += go * wo[i];
      }
      if (l > 0) {
        const auto a = in.row(r);
        for (std::size_t i = 0; i < fan_in; ++i) {
          if (!(a[i] > 0.0)) gi[i] = 0.0;
        }
      }
    }
    grad = std::move(grad_in);
  }
  return grad;
}

inline void require_finite(std::span<const double> v, const char* what) {
  if (!all_finite(v)) {
    throw Error(ErrorCode::numeric_overflow, std::string("non-finite ") + what);
  }
}

}  // namespace detail

inline Matrix logits(const MlpModel& model, const Matrix& inputs) {
  return detail::run_forward(model, inputs).logits;
}

// Class probabilities, one softmax row per input row.
inline Matrix forward(const MlpModel& model, const Matrix& inputs) {
  Matrix z = logits(model, inputs);
  detail::softmax_rows(z);
  return z;
}

struct GradPair {
  ParamVector grad_params;
  Matrix grad_inputs;
};

struct LossAndGrads {
  double loss = 0.0;
  GradPair grads;
};

// Mean cross-entropy over the batch and its exact gradients.
inline LossAndGrads loss_and_grads(const MlpModel& model, const LabeledBatch& batch) {
  validate_batch(batch, model.input_dim(), model.num_classes());
  auto cache = detail::run_forward(model, batch.inputs);
  detail::require_finite(cache.logits.values(), "logits");
  const auto n = static_cast<double>(batch.size());
  double loss = 0.0;
  Matrix grad = cache.logits;
  detail::softmax_rows(grad);
  for (std::size_t r = 0; r < batch.size(); ++r) {
    loss += detail::cross_entropy(cache.logits.row(r), batch.labels[r]);
    auto g = grad.row(r);
    g[static_cast<std::size_t>(batch.labels[r])] -= 1.0;
    for (double& v : g) v /= n;
  }
  loss /= n;
  if (!std::isfinite(loss)) throw Error(ErrorCode::numeric_overflow, "non-finite loss");
  LossAndGrads out;
  out.loss = loss;
  out.grads.grad_params = ParamVector(model.params().size());
  out.grads.grad_inputs = detail::backward(model, cache, std::move(grad), &out.grads.grad_params);
  detail::require_finite(out.grads.grad_params.values(), "parameter gradient");
  detail::require_finite(out.grads.grad_inputs.values(), "input gradient");
  return out;
}

// Per-sample losses together with the gradient of each sample's own loss
// with respect to its input row (not divided by the batch size).
struct SampleGrads {
  std::vector<double> losses;
  Matrix grad_inputs;
};

inline std::vector<double> sample_losses(const MlpModel& model, const Matrix& inputs,
                                         std::span<const int> labels) {
  const Matrix z = logits(model, inputs);
  std::vector<double> out(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) out[r] = detail::cross_entropy(z.row(r), labels[r]);
  return out;
}

inline SampleGrads sample_loss_grads(const MlpModel& model, const Matrix& inputs,
                                     std::span<const int> labels) {
  auto cache = detail::run_forward(model, inputs);
  SampleGrads out;
  out.losses.resize(labels.size());
  Matrix grad = cache.logits;
  detail::softmax_rows(grad);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out.losses[r] = detail::cross_entropy(cache.logits.row(r), labels[r]);
    grad(r, static_cast<std::size_t>(labels[r])) -= 1.0;
  }
  out.grad_inputs = detail::backward(model, cache, std::move(grad), nullptr);
  return out;
}

inline std::size_t input_dim(const MlpModel& model) { return model.input_dim(); }
inline std::size_t num_classes(const MlpModel& model) { return model.num_classes(); }

}  // namespace ermc
