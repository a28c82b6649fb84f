#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ral/network.hpp"
#include "ral/train.hpp"

namespace ral {

enum class Criterion { random, maxent, bald };

inline std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::random: return "random";
    case Criterion::maxent: return "maxent";
    case Criterion::bald: return "bald";
  }
  return "?";
}

struct PoolScore {
  std::size_t index = 0;  // pool index
  double score = 0.0;
  Criterion criterion = Criterion::maxent;
};

/// Shannon entropy (nats) of a probability vector after clamping and
/// renormalising.
template <typename Vec>
double categorical_entropy(const Vec& p) {
  double total = 0.0;
  for (Eigen::Index c = 0; c < p.size(); ++c) total += clamp_probability<double>(p(c));
  double h = 0.0;
  for (Eigen::Index c = 0; c < p.size(); ++c) {
    const double q = clamp_probability<double>(p(c)) / total;
    h -= q * std::log(q);
  }
  return std::max(h, 0.0);
}

template <typename T>
double predictive_entropy(const PredictiveDistribution<T>& pred) {
  return categorical_entropy(pred.p_cat);
}

/// Mutual information estimate: entropy of the closed-form predictive minus
/// the mean entropy of probit-normalised logit draws f ~ N(g, h).
template <typename T>
double bald_score(const PredictiveDistribution<T>& pred, int n_samples, std::uint64_t seed) {
  require(n_samples >= 1, "bald_score: n_samples must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index classes = pred.g.size();
  Vector<double> p(classes);
  double expected = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    for (Eigen::Index c = 0; c < classes; ++c) {
      const double f = double(pred.g(c)) + std::sqrt(std::max(double(pred.h(c)), 0.0)) * normal(rng);
      p(c) = normal_cdf(f);
    }
    expected += categorical_entropy(p);
  }
  return std::max(predictive_entropy(pred) - expected / n_samples, 0.0);
}

template <typename T>
double bald_score(const Vector<T>& x, const VariationalParams<T>& params, int n_samples,
                  std::uint64_t seed) {
  return bald_score(network_forward(x, params), n_samples, seed);
}

/// Scores every pool point. `preds[i]` is the predictive of pool point
/// `pool[i]`; BALD draws are seeded per pool index so scores do not depend on
/// evaluation order.
template <typename T>
std::vector<PoolScore> score_pool(const std::vector<std::size_t>& pool,
                                  const std::vector<PredictiveDistribution<T>>& preds, Criterion criterion,
                                  std::uint64_t seed, int bald_samples = 100) {
  require(criterion == Criterion::random || preds.size() == pool.size(),
          "score_pool: one prediction per pool point required");
  std::vector<PoolScore> out(pool.size());
  if (criterion == Criterion::random) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto rng = derived_rng(seed, {0x72616e64ULL});
    for (std::size_t i = 0; i < pool.size(); ++i) out[i] = {pool[i], uni(rng), criterion};
    return out;
  }
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const double s = criterion == Criterion::maxent
                         ? predictive_entropy(preds[i])
                         : bald_score(preds[i], bald_samples,
                                      derived_rng(seed, {0x62616c64ULL, pool[i]})());
    out[i] = {pool[i], s, criterion};
  }
  return out;
}

/// Descending score, ties by ascending pool index.
inline std::vector<std::size_t> rank_scores(std::vector<PoolScore> scores) {
  require(!scores.empty(), "rank_pool: empty pool");
  std::sort(scores.begin(), scores.end(), [](const PoolScore& a, const PoolScore& b) {
    return a.score != b.score ? a.score > b.score : a.index < b.index;
  });
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) order[i] = scores[i].index;
  return order;
}

/// Pool ordering by decreasing acquisition score. The random criterion is a
/// seeded shuffle of the pool taken in ascending index order.
template <typename T>
std::vector<std::size_t> rank_pool(const std::vector<std::size_t>& pool,
                                   const std::vector<PredictiveDistribution<T>>& preds, Criterion criterion,
                                   std::uint64_t seed, int bald_samples = 100) {
  require(!pool.empty(), "rank_pool: empty pool");
  if (criterion == Criterion::random) {
    std::vector<std::size_t> order = pool;
    std::sort(order.begin(), order.end());
    auto rng = derived_rng(seed, {0x72616e64ULL});
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }
  return rank_scores(score_pool(pool, preds, criterion, seed, bald_samples));
}

/// Convenience overload: runs the predictor over the pool columns of `inputs`.
template <typename T>
std::vector<std::size_t> rank_pool(const std::vector<std::size_t>& pool, const Matrix<T>& inputs,
                                   const VariationalParams<T>& params, Criterion criterion, std::uint64_t seed,
                                   int bald_samples = 100) {
  require(!pool.empty(), "rank_pool: empty pool");
  std::vector<PredictiveDistribution<T>> preds;
  if (criterion != Criterion::random) {
    Matrix<T> x(inputs.rows(), static_cast<Eigen::Index>(pool.size()));
    for (std::size_t i = 0; i < pool.size(); ++i) x.col(Eigen::Index(i)) = inputs.col(Eigen::Index(pool[i]));
    preds = predict_all(params, x);
  }
  return rank_pool(pool, preds, criterion, seed, bald_samples);
}

class ThinningError : public PreconditionError {
 public:
  ThinningError(std::size_t available, int stride, int count)
      : PreconditionError("thin_ranking: ranking of " + std::to_string(available) + " is too short for stride " +
                          std::to_string(stride) + " and " + std::to_string(count) +
                          " samples; reduce the stride to " + std::to_string(fallback(available, count))),
        available_(available) {}

  /// Largest stride that still fits: floor((n - 1) / (M - 1)).
  static int fallback(std::size_t available, int count) {
    if (count <= 1) return 1;
    if (available == 0) return 0;
    return static_cast<int>((available - 1) / std::size_t(count - 1));
  }
  std::size_t available() const { return available_; }

 private:
  std::size_t available_;
};

/// ordering[0], ordering[K], ..., ordering[(M-1)K].
inline std::vector<std::size_t> thin_ranking(const std::vector<std::size_t>& ordering, int stride, int count) {
  require(stride >= 1 && count >= 1, "thin_ranking: stride and count must be positive");
  if (ordering.size() < 1 + std::size_t(count - 1) * std::size_t(stride))
    throw ThinningError(ordering.size(), stride, count);
  std::vector<std::size_t> out(count);
  for (int m = 0; m < count; ++m) out[m] = ordering[std::size_t(m) * stride];
  return out;
}

/// Thinning with the small-pool fallback applied. Throws if fewer than M
/// points remain.
inline std::vector<std::size_t> thin_ranking_or_fallback(const std::vector<std::size_t>& ordering, int stride,
                                                         int count) {
  try {
    return thin_ranking(ordering, stride, count);
  } catch (const ThinningError& e) {
    const int k = ThinningError::fallback(e.available(), count);
    if (k < 1) throw;
    return thin_ranking(ordering, k, count);
  }
}

}  // namespace ral
