#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>

#include "ral/elbo.hpp"
#include "ral/optim.hpp"

namespace ral {

struct TrainConfig {
  int epochs_per_round = 30;
  int batch_size = 64;
  AdamConfig adam;
  // Rounds over which the step size decays linearly, and its floor.
  int total_rounds = 70;
  double min_multiplier = 0.1;
  std::uint64_t seed = 0;

  /// Step-size multiplier for a labeling round: max(floor, 1 - r / R).
  double multiplier(int round_index) const {
    if (total_rounds <= 0) return 1.0;
    return std::max(min_multiplier, 1.0 - double(round_index) / double(total_rounds));
  }

  void validate() const {
    require(epochs_per_round >= 0, "epochs_per_round must be nonnegative");
    require(batch_size >= 1, "batch_size must be positive");
    require(min_multiplier > 0.0 && min_multiplier <= 1.0, "min_multiplier must be in (0, 1]");
    require(adam.learning_rate > 0.0, "learning rate must be positive");
  }
};

/// Seeds derived from a base seed and a tag tuple, so each consumer gets an
/// independent reproducible stream without carrying generator state around.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto t : tags) {
    words.push_back(static_cast<std::uint32_t>(t));
    words.push_back(static_cast<std::uint32_t>(t >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

template <typename T>
LabeledBatch<T> gather(const LabeledBatch<T>& data, const std::vector<std::size_t>& idx) {
  LabeledBatch<T> out{Matrix<T>(data.inputs.rows(), static_cast<Eigen::Index>(idx.size())), {}};
  out.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.inputs.col(static_cast<Eigen::Index>(i)) = data.inputs.col(static_cast<Eigen::Index>(idx[i]));
    out.labels.push_back(data.labels[idx[i]]);
  }
  return out;
}

/// Minibatch Adam on the ELBO, warm-started from `params` and `opt`.
template <typename T>
VariationalParams<T> train_predictor(const LabeledBatch<T>& dataset, VariationalParams<T> params,
                                     AdamState<T>& opt, const TrainConfig& cfg, int round_index) {
  cfg.validate();
  require(dataset.size() > 0, "train_predictor: empty dataset");
  ScopedFlushDenormals ftz;
  const std::size_t n = dataset.labels.size();
  const double multiplier = cfg.multiplier(round_index);
  auto rng = derived_rng(cfg.seed, {0x7261696eULL, static_cast<std::uint64_t>(round_index)});
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < cfg.epochs_per_round; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);
      const auto g = elbo_gradient(gather(dataset, idx), params, n, false);
      adam_step(params, g.grad, opt, cfg.adam, multiplier);
    }
  }
  return params;
}

/// Full-dataset ELBO, evaluated in chunks.
template <typename T>
ElboReport full_elbo(const LabeledBatch<T>& dataset, const VariationalParams<T>& params,
                     int chunk = 256) {
  ElboReport r;
  const std::size_t n = dataset.labels.size();
  for (std::size_t s = 0; s < n; s += chunk) {
    std::vector<std::size_t> idx(std::min<std::size_t>(chunk, n - s));
    std::iota(idx.begin(), idx.end(), s);
    r.nll += nll_term(gather(dataset, idx), params);
  }
  r.kl = kl_gaussian(params);
  r.total = r.nll + r.kl;
  r.n_points = n;
  return r;
}

}  // namespace ral
