#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ermc/attacks.hpp"
#include "ermc/curve.hpp"
#include "ermc/error.hpp"
#include "ermc/mlp.hpp"
#include "ermc/tensor.hpp"

namespace ermc {

// Models whose softmax outputs are averaged. Attacks see the averaged
// prediction: loss_i = -log(mean_m p_m(y_i | x_i)).
class Ensemble {
 public:
  explicit Ensemble(std::vector<MlpModel> members) : members_(std::move(members)) {
    if (members_.empty()) throw Error(ErrorCode::domain, "ensemble needs at least one member");
    for (const auto& m : members_) {
      if (m.dims() != members_.front().dims()) {
        throw Error(ErrorCode::domain, "ensemble members have different architectures");
      }
    }
  }

  const std::vector<MlpModel>& members() const noexcept { return members_; }
  std::size_t size() const noexcept { return members_.size(); }

 private:
  std::vector<MlpModel> members_;
};

inline std::size_t input_dim(const Ensemble& e) { return e.members().front().input_dim(); }
inline std::size_t num_classes(const Ensemble& e) { return e.members().front().num_classes(); }

inline Matrix forward(const Ensemble& e, const Matrix& inputs) {
  Matrix mean = forward(e.members().front(), inputs);
  for (std::size_t m = 1; m < e.size(); ++m) {
    const Matrix p = forward(e.members()[m], inputs);
    for (std::size_t i = 0; i < mean.size(); ++i) mean.values()[i] += p.values()[i];
  }
  const auto n = static_cast<double>(e.size());
  for (double& v : mean.values()) v /= n;
  return mean;
}

namespace detail {

// log(mean_m exp(v_m)) computed stably.
inline double log_mean_exp(std::span<const double> v) {
  double mx = v[0];
  for (double x : v) mx = x > mx ? x : mx;
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  return mx + std::log(total) - std::log(static_cast<double>(v.size()));
}

}  // namespace detail

inline std::vector<double> sample_losses(const Ensemble& e, const Matrix& inputs,
                                         std::span<const int> labels) {
  std::vector<std::vector<double>> member_losses;
  for (const auto& m : e.members()) member_losses.push_back(sample_losses(m, inputs, labels));
  std::vector<double> out(labels.size());
  std::vector<double> log_p(e.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    for (std::size_t m = 0; m < e.size(); ++m) log_p[m] = -member_losses[m][r];
    out[r] = -detail::log_mean_exp(log_p);
  }
  return out;
}

// dloss/dlogits_m = w_m (p_m - e_y), w_m = p_m(y) / sum_k p_k(y).
inline SampleGrads sample_loss_grads(const Ensemble& e, const Matrix& inputs,
                                     std::span<const int> labels) {
  std::vector<detail::ForwardCache> caches;
  std::vector<Matrix> probs;
  std::vector<std::vector<double>> member_losses;
  for (const auto& m : e.members()) {
    caches.push_back(detail::run_forward(m, inputs));
    Matrix p = caches.back().logits;
    detail::softmax_rows(p);
    probs.push_back(std::move(p));
    std::vector<double> l(labels.size());
    for (std::size_t r = 0; r < labels.size(); ++r) {
      l[r] = detail::cross_entropy(caches.back().logits.row(r), labels[r]);
    }
    member_losses.push_back(std::move(l));
  }
  SampleGrads out;
  out.losses.resize(labels.size());
  out.grad_inputs = Matrix(inputs.rows(), inputs.cols());
  std::vector<std::vector<double>> weights(e.size(), std::vector<double>(labels.size()));
  std::vector<double> log_p(e.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    for (std::size_t m = 0; m < e.size(); ++m) log_p[m] = -member_losses[m][r];
    const double log_mean = detail::log_mean_exp(log_p);
    out.losses[r] = -log_mean;
    const double log_total = log_mean + std::log(static_cast<double>(e.size()));
    for (std::size_t m = 0; m < e.size(); ++m) weights[m][r] = std::exp(log_p[m] - log_total);
  }
  for (std::size_t m = 0; m < e.size(); ++m) {
    Matrix grad = std::move(probs[m]);
    for (std::size_t r = 0; r < labels.size(); ++r) {
      grad(r, static_cast<std::size_t>(labels[r])) -= 1.0;
      for (double& v : grad.row(r)) v *= weights[m][r];
    }
    const Matrix gx = detail::backward(e.members()[m], caches[m], std::move(grad), nullptr);
    for (std::size_t i = 0; i < gx.size(); ++i) out.grad_inputs.values()[i] += gx.values()[i];
  }
  return out;
}

inline Matrix ensemble_predict(const std::vector<MlpModel>& members, const Matrix& inputs) {
  return forward(Ensemble(members), inputs);
}

// ---------------------------------------------------------------------------
// Metrics

struct NamedAttack {
  std::string name;
  Attack attack;
  bool in_union = true;
};

using AttackSuite = std::vector<NamedAttack>;

struct AttackOutcome {
  std::string name;
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<std::uint8_t> correct;
  bool in_union = true;
};

struct Metrics {
  double clean_accuracy = 0.0;
  double clean_loss = 0.0;
  std::vector<std::uint8_t> clean_correct;
  std::vector<AttackOutcome> attacks;
  std::optional<double> union_accuracy;  // over attacks flagged in_union

  const AttackOutcome& attack(const std::string& name) const {
    for (const auto& a : attacks) {
      if (a.name == name) return a;
    }
    throw Error(ErrorCode::domain, "no attack named " + name);
  }
};

// Fraction of samples marked correct in every mask.
inline double union_accuracy(const std::vector<std::vector<std::uint8_t>>& masks) {
  if (masks.empty()) throw Error(ErrorCode::domain, "union of zero masks");
  const std::size_t n = masks.front().size();
  if (n == 0) throw Error(ErrorCode::domain, "masks are empty");
  for (const auto& m : masks) {
    if (m.size() != n) throw Error(ErrorCode::domain, "masks differ in length");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = true;
    for (const auto& m : masks) ok = ok && m[i] != 0;
    hits += ok ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

namespace detail {

template <Classifier C>
void score(const C& model, const Matrix& inputs, std::span<const int> labels, double& accuracy,
           double& loss, std::vector<std::uint8_t>& correct) {
  const Matrix p = forward(model, inputs);
  const auto losses = sample_losses(model, inputs, labels);
  correct.assign(labels.size(), 0);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    correct[r] = argmax(p.row(r)) == static_cast<std::size_t>(labels[r]) ? 1 : 0;
    hits += correct[r];
  }
  const auto n = static_cast<double>(labels.size());
  accuracy = static_cast<double>(hits) / n;
  loss = std::accumulate(losses.begin(), losses.end(), 0.0) / n;
}

}  // namespace detail

// Standard accuracy plus robust accuracy under each attack of the suite.
template <Classifier C>
Metrics evaluate(const C& model, const LabeledBatch& data, const AttackSuite& suite) {
  if (data.size() == 0) throw Error(ErrorCode::domain, "cannot evaluate on an empty dataset");
  validate_batch(data, input_dim(model), num_classes(model));
  Metrics out;
  detail::score(model, data.inputs, data.labels, out.clean_accuracy, out.clean_loss,
                out.clean_correct);
  std::vector<std::vector<std::uint8_t>> union_masks;
  for (const auto& named : suite) {
    AttackOutcome outcome;
    outcome.name = named.name;
    outcome.in_union = named.in_union;
    const Matrix adv = add(data.inputs, perturb(model, data, named.attack));
    detail::score(model, adv, data.labels, outcome.accuracy, outcome.loss, outcome.correct);
    if (named.in_union) union_masks.push_back(outcome.correct);
    out.attacks.push_back(std::move(outcome));
  }
  if (!union_masks.empty()) out.union_accuracy = union_accuracy(union_masks);
  return out;
}

// ---------------------------------------------------------------------------
// Path sweeps

// Per-norm PGD attacks used for sweeps and the union metric.
struct PgdSuite {
  AttackConfig linf;
  AttackConfig l2;
  AttackConfig l1;

  static PgdSuite make(double eps_inf, double eps_2, double eps_1, int steps = 10,
                       std::uint64_t seed = 0) {
    return {AttackConfig::make(Norm::linf, eps_inf, steps, seed),
            AttackConfig::make(Norm::l2, eps_2, steps, seed),
            AttackConfig::make(Norm::l1, eps_1, steps, seed)};
  }

  AttackSuite named() const {
    return {{"pgd_linf", linf, true}, {"pgd_l2", l2, true}, {"pgd_l1", l1, true}};
  }
};

struct ProfilePoint {
  double t = 0.0;
  double clean_acc = 0.0;
  double acc_linf = 0.0;
  double acc_l2 = 0.0;
  double acc_l1 = 0.0;
  double union_acc = 0.0;
  double clean_loss = 0.0;
  double loss_linf = 0.0;
  double loss_l2 = 0.0;
  double loss_l1 = 0.0;

  double worst_of_l1_linf() const { return std::min(acc_linf, acc_l1); }
  bool operator==(const ProfilePoint&) const = default;
};

struct RobustnessProfile {
  std::vector<ProfilePoint> points;

  double min_worst_case() const {
    double v = 1.0;
    for (const auto& p : points) v = std::min(v, p.worst_of_l1_linf());
    return v;
  }
  double max_worst_case() const {
    double v = 0.0;
    for (const auto& p : points) v = std::max(v, p.worst_of_l1_linf());
    return v;
  }
};

template <Classifier C>
ProfilePoint profile_point(const C& model, const LabeledBatch& data, const PgdSuite& suite, double t) {
  const Metrics m = evaluate(model, data, suite.named());
  ProfilePoint p;
  p.t = t;
  p.clean_acc = m.clean_accuracy;
  p.clean_loss = m.clean_loss;
  p.acc_linf = m.attacks[0].accuracy;
  p.loss_linf = m.attacks[0].loss;
  p.acc_l2 = m.attacks[1].accuracy;
  p.loss_l2 = m.attacks[1].loss;
  p.acc_l1 = m.attacks[2].accuracy;
  p.loss_l1 = m.attacks[2].loss;
  p.union_acc = *m.union_accuracy;
  return p;
}

// Evenly spaced grid on [0, 1] with both ends included exactly.
inline std::vector<double> t_grid(std::size_t grid_size) {
  if (grid_size < 2) throw Error(ErrorCode::domain, "grid needs at least two points");
  std::vector<double> grid(grid_size);
  for (std::size_t i = 0; i < grid_size; ++i) {
    grid[i] = static_cast<double>(i) / static_cast<double>(grid_size - 1);
  }
  grid.back() = 1.0;
  return grid;
}

inline RobustnessProfile sweep_path(const CurveSpec& curve, const LabeledBatch& data,
                                    std::size_t grid_size, const PgdSuite& suite) {
  RobustnessProfile profile;
  for (double t : t_grid(grid_size)) {
    profile.points.push_back(profile_point(model_at(curve, t), data, suite, t));
  }
  return profile;
}

// ---------------------------------------------------------------------------
// Ensemble selection

struct Interval {
  double a = 0.0;
  double b = 0.0;

  double length() const { return b - a; }
  bool contains(double t) const { return t >= a && t <= b; }
  bool operator==(const Interval&) const = default;
};

// Maximal runs of consecutive grid points where acc_linf >= alpha_inf and
// acc_l1 >= alpha_1. Boundaries are grid points.
inline std::vector<Interval> select_segment(const RobustnessProfile& profile, double alpha_inf,
                                            double alpha_1) {
  std::vector<Interval> out;
  std::optional<std::size_t> run_start;
  const auto& pts = profile.points;
  for (std::size_t i = 0; i <= pts.size(); ++i) {
    const bool ok = i < pts.size() && pts[i].acc_linf >= alpha_inf && pts[i].acc_l1 >= alpha_1;
    if (ok && !run_start) run_start = i;
    if (!ok && run_start) {
      out.push_back({pts[*run_start].t, pts[i - 1].t});
      run_start.reset();
    }
  }
  return out;
}

// Largest-remainder apportionment of n seats by weight. Equal weights when
// all weights are zero; remainder ties go to the lower index.
inline std::vector<std::size_t> apportion(std::span<const double> weights, std::size_t n) {
  std::vector<std::size_t> seats(weights.size(), 0);
  if (weights.empty()) return seats;
  double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<double> w(weights.begin(), weights.end());
  if (!(total > 0.0)) {
    std::ranges::fill(w, 1.0);
    total = static_cast<double>(w.size());
  }
  // Remainders are compared at 1e-9 resolution so lengths that are equal up
  // to rounding tie exactly.
  std::vector<long long> remainder(w.size());
  std::size_t given = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double quota = static_cast<double>(n) * w[i] / total;
    // Absorb rounding so exact quotas like 0.99999999999 count as 1.
    const double whole = std::floor(quota + 1e-9);
    seats[i] = static_cast<std::size_t>(whole);
    remainder[i] = std::llround((quota - whole) * 1e9);
    given += seats[i];
  }
  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t x, std::size_t y) { return remainder[x] > remainder[y]; });
  for (std::size_t k = 0; given < n; ++k, ++given) ++seats[order[k % order.size()]];
  return seats;
}

struct EnsembleSpec {
  std::vector<Interval> intervals;
  std::size_t n = 0;
  double alpha_inf = 0.0;
  double alpha_1 = 0.0;
  std::vector<double> member_ts;
};

namespace detail {

// Grid point inside the interval with the best min(acc_linf, acc_l1); the
// smallest t wins ties.
inline double best_point(const RobustnessProfile& profile, const Interval& interval) {
  std::optional<double> best_t;
  double best = -1.0;
  for (const auto& p : profile.points) {
    if (!interval.contains(p.t)) continue;
    if (p.worst_of_l1_linf() > best) {
      best = p.worst_of_l1_linf();
      best_t = p.t;
    }
  }
  return best_t.value_or(interval.a);
}

}  // namespace detail

// Places n members on the selected intervals: k > 1 members of an interval
// [a, b] sit at a + (b - a) i / (k - 1); a lone member sits at the interval's
// best grid point. Seats are apportioned by interval length.
inline EnsembleSpec pick_members(const RobustnessProfile& profile,
                                 const std::vector<Interval>& intervals, std::size_t n,
                                 double alpha_inf, double alpha_1) {
  if (intervals.empty()) {
    throw Error(ErrorCode::no_feasible_segment, "no path segment meets the selection thresholds");
  }
  if (n == 0) throw Error(ErrorCode::domain, "ensemble size must be positive");
  EnsembleSpec spec{intervals, n, alpha_inf, alpha_1, {}};
  if (n == 1) {
    std::optional<double> best_t;
    double best = -1.0;
    for (const auto& interval : intervals) {
      const double t = detail::best_point(profile, interval);
      double score = -1.0;
      for (const auto& p : profile.points) {
        if (p.t == t) score = p.worst_of_l1_linf();
      }
      if (score > best) {
        best = score;
        best_t = t;
      }
    }
    spec.member_ts.push_back(*best_t);
    return spec;
  }
  std::vector<double> lengths;
  for (const auto& interval : intervals) lengths.push_back(interval.length());
  const auto seats = apportion(lengths, n);
  for (std::size_t k = 0; k < intervals.size(); ++k) {
    const auto& [a, b] = intervals[k];
    if (seats[k] == 1) {
      spec.member_ts.push_back(detail::best_point(profile, intervals[k]));
      continue;
    }
    for (std::size_t i = 0; i < seats[k]; ++i) {
      const double t = a + (b - a) * static_cast<double>(i) / static_cast<double>(seats[k] - 1);
      spec.member_ts.push_back(i + 1 == seats[k] ? b : t);
    }
  }
  return spec;
}

inline Ensemble build_ensemble(const CurveSpec& curve, const EnsembleSpec& spec) {
  std::vector<MlpModel> members;
  for (double t : spec.member_ts) members.push_back(model_at(curve, t));
  return Ensemble(std::move(members));
}

}  // namespace ermc
