#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "ral/acquisition.hpp"
#include "ral/elbo.hpp"
#include "ral/optim.hpp"

namespace ral {

/// Thinned candidates and their stacked predictive moments. Layout is
/// class-major: entry c * M + m is class c of candidate m.
struct PoolState {
  std::vector<std::size_t> candidates;
  Vector<double> mean;
  Vector<double> var;

  int size() const { return static_cast<int>(candidates.size()); }
};

/// The policy is a second mean-field network: C*M -> 500 -> M.
using PolicyParams = VariationalParams<double>;

inline PolicyParams init_policy(int classes, int candidates, double prior_precision, std::uint64_t seed,
                                int hidden = 500) {
  return init_params<double>(Topology::mlp(classes * candidates, {hidden}, candidates), prior_precision, seed);
}

/// Builds the state from precomputed predictions: rank the pool by maxent,
/// thin with stride K to M candidates and stack their (g, h).
template <typename T>
PoolState build_state(const std::vector<std::size_t>& pool, const std::vector<PredictiveDistribution<T>>& preds,
                      int stride, int count) {
  require(pool.size() == preds.size(), "build_state: one prediction per pool point required");
  const auto order = rank_pool(pool, preds, Criterion::maxent, 0);
  PoolState s;
  s.candidates = thin_ranking_or_fallback(order, stride, count);
  std::vector<std::size_t> where(s.candidates.size());
  {
    // Pool indices back to positions in `pool`.
    std::vector<std::size_t> pos(pool.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return pool[a] < pool[b]; });
    for (std::size_t m = 0; m < s.candidates.size(); ++m)
      where[m] = *std::lower_bound(pos.begin(), pos.end(), s.candidates[m],
                                   [&](std::size_t p, std::size_t v) { return pool[p] < v; });
  }
  const Eigen::Index classes = preds.front().g.size();
  s.mean.resize(classes * count);
  s.var.resize(classes * count);
  for (int m = 0; m < count; ++m)
    for (Eigen::Index c = 0; c < classes; ++c) {
      s.mean(c * count + m) = preds[where[m]].g(c);
      s.var(c * count + m) = std::max<double>(preds[where[m]].h(c), 0.0);
    }
  return s;
}

template <typename T>
PoolState build_state(const std::vector<std::size_t>& pool, const Matrix<T>& inputs,
                      const VariationalParams<T>& params, int stride, int count) {
  Matrix<T> x(inputs.rows(), static_cast<Eigen::Index>(pool.size()));
  for (std::size_t i = 0; i < pool.size(); ++i) x.col(Eigen::Index(i)) = inputs.col(Eigen::Index(pool[i]));
  return build_state(pool, predict_all(params, x), stride, count);
}

namespace detail {

struct PolicyOutput {
  Vector<double> probs;  // a
  Vector<double> raw;    // clamped a-tilde
  Vector<double> g, h;
  Tape<double> tape;
};

inline PolicyOutput policy_pass(const PoolState& state, const PolicyParams& policy, bool record) {
  if (state.mean.size() != policy.topology.input.size() || state.var.size() != state.mean.size())
    throw ShapeError("state dimension " + std::to_string(state.mean.size()) + " != policy input " +
                     std::to_string(policy.topology.input.size()));
  PolicyOutput o;
  const auto x = MomentTensor<double>::gaussian(Matrix<double>(state.mean), Matrix<double>(state.var),
                                                policy.topology.input);
  const auto out = forward_moments(policy, x, record ? &o.tape : nullptr);
  o.g = out.mean.col(0);
  o.h = out.var.col(0).cwiseMax(0.0);
  o.raw.resize(o.g.size());
  for (Eigen::Index m = 0; m < o.g.size(); ++m)
    o.raw(m) = std::max(predictive_probability(o.g(m), o.h(m)), kProbFloor);
  o.probs = o.raw / o.raw.sum();
  return o;
}

}  // namespace detail

/// Action probabilities a_m = a~_m / sum_j a~_j with a~_m = Phi(g_m / sqrt(h_m + 1)).
inline Vector<double> policy_forward(const PoolState& state, const PolicyParams& policy) {
  return detail::policy_pass(state, policy, false).probs;
}

/// Gradient of -log a_action w.r.t. the policy parameters.
inline ParamGradient<double> neg_log_prob_gradient(const PoolState& state, const PolicyParams& policy,
                                                   int action, double* neg_log_prob = nullptr) {
  auto o = detail::policy_pass(state, policy, true);
  require(action >= 0 && action < o.probs.size(), "neg_log_prob_gradient: action out of range");
  if (neg_log_prob) *neg_log_prob = -std::log(o.probs(action));
  const double total = o.raw.sum();
  Matrix<double> dg = Matrix<double>::Zero(o.g.size(), 1), dh = dg;
  for (Eigen::Index m = 0; m < o.g.size(); ++m) {
    const double d_raw = (m == action ? -1.0 / o.raw(m) : 0.0) + 1.0 / total;
    const double scale = 1.0 / std::sqrt(o.h(m) + 1.0);
    const double z = o.g(m) * scale;
    if (normal_cdf(z) < kProbFloor) continue;  // clamped: locally constant
    const double dz = d_raw * normal_pdf(z);
    dg(m, 0) = dz * scale;
    dh(m, 0) = dz * (-0.5 * z / (o.h(m) + 1.0));
  }
  return backward(policy, o.tape, std::move(dg), std::move(dh));
}

/// Inverse-CDF categorical draw.
template <typename Rng>
int sample_action(const Vector<double>& probs, Rng& rng) {
  require(probs.size() > 0, "sample_action: empty distribution");
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * probs.sum();
  double acc = 0.0;
  int last = 0;
  for (Eigen::Index m = 0; m < probs.size(); ++m) {
    if (probs(m) <= 0.0) continue;
    last = static_cast<int>(m);
    acc += probs(m);
    if (u < acc) return last;
  }
  return last;
}

/// Product over classes of Ber(y_c | p_c) with clamped p, one value per column.
template <typename T>
std::vector<double> label_likelihood(const Matrix<T>& inputs, const std::vector<int>& labels,
                                     const VariationalParams<T>& params) {
  require(std::size_t(inputs.cols()) == labels.size(), "label_likelihood: one label per input");
  const auto preds = predict_batch(params, inputs);
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double l = 1.0;
    for (Eigen::Index c = 0; c < preds[i].p.size(); ++c) {
      const double p = clamp_probability<double>(preds[i].p(c));
      l *= (c == labels[i]) ? p : 1.0 - p;
    }
    out[i] = l;
  }
  return out;
}

/// Likelihood of the labeled point under `next` minus under `prev`.
template <typename T>
std::vector<double> reward_improvement(const Matrix<T>& inputs, const std::vector<int>& labels,
                                       const VariationalParams<T>& prev, const VariationalParams<T>& next) {
  const auto a = label_likelihood(inputs, labels, next);
  const auto b = label_likelihood(inputs, labels, prev);
  std::vector<double> r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

template <typename T>
double reward_improvement(const Vector<T>& x, int label, const VariationalParams<T>& prev,
                          const VariationalParams<T>& next) {
  return reward_improvement(Matrix<T>(x), std::vector<int>{label}, prev, next).front();
}

/// Distinct labels over number of requests.
inline double reward_diversity(const std::vector<int>& labels) {
  require(!labels.empty(), "reward_diversity: no label requests");
  return double(std::set<int>(labels.begin(), labels.end()).size()) / double(labels.size());
}

/// G_t = R_t + gamma G_{t+1}.
inline std::vector<double> compute_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    require(std::isfinite(rewards[t]), "compute_returns: rewards must be finite");
    acc = rewards[t] + gamma * acc;
    g[t] = acc;
  }
  return g;
}

/// Running mean of every per-step reward seen so far.
struct RewardBaseline {
  double sum = 0.0;
  std::uint64_t count = 0;

  double value() const { return count ? sum / double(count) : 0.0; }
  void add(const std::vector<double>& rewards) {
    for (double r : rewards) sum += r;
    count += rewards.size();
  }
};

inline double update_baseline(const std::vector<double>& history) {
  RewardBaseline b;
  b.add(history);
  return b.value();
}

struct TrajectoryStep {
  PoolState state;
  int action = 0;
  std::size_t pool_index = 0;
  double probability = 0.0;
  double reward = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  std::vector<double> returns;
  double gamma = 0.95;

  std::vector<double> rewards() const {
    std::vector<double> r;
    for (const auto& s : steps) r.push_back(s.reward);
    return r;
  }
  void finish() { returns = compute_returns(rewards(), gamma); }
};

/// One Adam step on sum_t (G_t - b)(-log a_{A_t}(S_t)) + KL(q(phi) || p(phi)).
inline void policy_update(const Trajectory& traj, double baseline, PolicyParams& policy, AdamState<double>& opt,
                          const AdamConfig& cfg) {
  require(traj.returns.size() == traj.steps.size(), "policy_update: returns not computed");
  ParamGradient<double> grad = policy.zero_gradient();
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const double advantage = traj.returns[t] - baseline;
    if (advantage == 0.0) continue;
    const auto g = neg_log_prob_gradient(traj.steps[t].state, policy, traj.steps[t].action);
    for_each_array([&](auto& acc, const auto& part) { acc += advantage * part; }, grad, g);
  }
  add_kl_gradient(policy, grad);
  adam_step(policy, grad, opt, cfg);
}

}  // namespace ral
