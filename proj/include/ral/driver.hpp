#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <zlib.h>

#include <json.hpp>

#include "ral/agent.hpp"
#include "ral/data.hpp"

namespace ral {

using json = nlohmann::json;

enum class Strategy { random, maxent, bald, ral };
enum class OracleMode { simulated, human };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::random: return "random";
    case Strategy::maxent: return "maxent";
    case Strategy::bald: return "bald";
    case Strategy::ral: return "ral";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(const std::string& s) {
  if (s == "random") return Strategy::random;
  if (s == "maxent") return Strategy::maxent;
  if (s == "bald") return Strategy::bald;
  if (s == "ral") return Strategy::ral;
  return std::nullopt;
}

/// Invalid experiment configuration; `fields` names every offending key.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> fields, const std::string& detail)
      : std::invalid_argument("invalid config: " + detail), fields_(std::move(fields)) {}
  const std::vector<std::string>& fields() const { return fields_; }

 private:
  std::vector<std::string> fields_;
};

struct BlobsConfig {
  int per_class = 100;
  int test_per_class = 200;
  int classes = 2;
  double spread = 0.3;
};

struct ExperimentConfig {
  std::string dataset = "mnist";  // mnist | fashion | blobs
  std::string data_dir = "data/mnist";
  Strategy strategy = Strategy::random;
  int initial = 50;
  int budget = 400;  // total labeled points at the end of the run
  int per_round = 5;
  int candidates = 50;  // M
  int stride = 20;      // K
  std::uint64_t seed = 0;
  TrainConfig train;
  std::size_t pool_size = 10000;  // 0 keeps the whole train split
  OracleMode oracle = OracleMode::simulated;
  double prior_precision = 1.0;
  double policy_prior_precision = 1.0;
  double policy_learning_rate = 1e-3;
  int policy_hidden = 500;
  double gamma = 0.95;
  int bald_samples = 100;
  int rounds_per_eval = 1;
  BlobsConfig blobs;

  int rounds() const { return per_round > 0 ? (budget - initial) / per_round : 0; }

  /// Collects every invalid field before throwing.
  void validate() const {
    std::vector<std::string> bad;
    auto check = [&](bool ok, const char* field) {
      if (!ok) bad.emplace_back(field);
    };
    check(dataset == "mnist" || dataset == "fashion" || dataset == "blobs", "dataset");
    check(initial >= 1, "initial");
    check(per_round >= 1, "per_round");
    check(budget >= initial && per_round >= 1 && (budget - initial) % std::max(per_round, 1) == 0, "budget");
    check(candidates >= 1, "candidates");
    check(stride >= 1, "stride");
    check(train.epochs_per_round >= 0, "train.epochs_per_round");
    check(train.batch_size >= 1, "train.batch_size");
    check(train.adam.learning_rate > 0.0, "train.learning_rate");
    check(train.min_multiplier > 0.0 && train.min_multiplier <= 1.0, "train.min_multiplier");
    check(prior_precision > 0.0, "prior_precision");
    check(policy_prior_precision > 0.0, "policy_prior_precision");
    check(policy_learning_rate > 0.0, "policy_learning_rate");
    check(policy_hidden >= 1, "policy_hidden");
    check(gamma >= 0.0 && gamma <= 1.0, "gamma");
    check(bald_samples >= 1, "bald_samples");
    check(rounds_per_eval >= 1, "rounds_per_eval");
    check(blobs.classes >= 2, "blobs.classes");
    check(blobs.per_class >= 1 && blobs.test_per_class >= 1, "blobs.per_class");
    check(blobs.spread >= 0.0, "blobs.spread");
    if (!bad.empty()) {
      std::string list;
      for (const auto& f : bad) list += (list.empty() ? "" : ", ") + f;
      throw ConfigError(bad, list);
    }
  }
};

inline json to_json(const ExperimentConfig& c) {
  return json{{"dataset", c.dataset},
              {"data_dir", c.data_dir},
              {"strategy", to_string(c.strategy)},
              {"initial", c.initial},
              {"budget", c.budget},
              {"per_round", c.per_round},
              {"candidates", c.candidates},
              {"stride", c.stride},
              {"seed", c.seed},
              {"pool_size", c.pool_size},
              {"oracle", c.oracle == OracleMode::human ? "human" : "simulated"},
              {"prior_precision", c.prior_precision},
              {"policy_prior_precision", c.policy_prior_precision},
              {"policy_learning_rate", c.policy_learning_rate},
              {"policy_hidden", c.policy_hidden},
              {"gamma", c.gamma},
              {"bald_samples", c.bald_samples},
              {"rounds_per_eval", c.rounds_per_eval},
              {"train",
               {{"epochs_per_round", c.train.epochs_per_round},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.adam.learning_rate},
                {"beta1", c.train.adam.beta1},
                {"beta2", c.train.adam.beta2},
                {"epsilon", c.train.adam.epsilon},
                {"min_multiplier", c.train.min_multiplier}}},
              {"blobs",
               {{"per_class", c.blobs.per_class},
                {"test_per_class", c.blobs.test_per_class},
                {"classes", c.blobs.classes},
                {"spread", c.blobs.spread}}}};
}

/// Parses a config object. Missing keys keep their defaults; unknown keys and
/// type errors are reported together with validation failures.
inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  std::vector<std::string> bad;
  if (!j.is_object()) throw ConfigError({"<root>"}, "config must be a JSON object");
  auto take = [&](const json& obj, const std::string& prefix, const char* key, auto& dst) {
    if (!obj.contains(key)) return;
    try {
      obj.at(key).get_to(dst);
    } catch (const json::exception&) {
      bad.push_back(prefix + key);
    }
  };
  static const std::set<std::string> known{"dataset", "data_dir", "strategy", "initial", "budget", "per_round",
                                           "candidates", "stride", "seed", "pool_size", "oracle",
                                           "prior_precision", "policy_prior_precision", "policy_learning_rate",
                                           "policy_hidden", "gamma", "bald_samples", "rounds_per_eval", "train",
                                           "blobs"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) bad.push_back(k);
  take(j, "", "dataset", c.dataset);
  take(j, "", "data_dir", c.data_dir);
  if (j.contains("strategy")) {
    const auto s = j["strategy"].is_string() ? parse_strategy(j["strategy"].get<std::string>()) : std::nullopt;
    if (s) c.strategy = *s;
    else bad.push_back("strategy");
  }
  take(j, "", "initial", c.initial);
  take(j, "", "budget", c.budget);
  take(j, "", "per_round", c.per_round);
  take(j, "", "candidates", c.candidates);
  take(j, "", "stride", c.stride);
  take(j, "", "seed", c.seed);
  take(j, "", "pool_size", c.pool_size);
  if (j.contains("oracle")) {
    const auto& o = j["oracle"];
    if (o == "human") c.oracle = OracleMode::human;
    else if (o == "simulated") c.oracle = OracleMode::simulated;
    else bad.push_back("oracle");
  }
  take(j, "", "prior_precision", c.prior_precision);
  take(j, "", "policy_prior_precision", c.policy_prior_precision);
  take(j, "", "policy_learning_rate", c.policy_learning_rate);
  take(j, "", "policy_hidden", c.policy_hidden);
  take(j, "", "gamma", c.gamma);
  take(j, "", "bald_samples", c.bald_samples);
  take(j, "", "rounds_per_eval", c.rounds_per_eval);
  if (j.contains("train")) {
    const auto& t = j["train"];
    if (!t.is_object()) {
      bad.push_back("train");
    } else {
      take(t, "train.", "epochs_per_round", c.train.epochs_per_round);
      take(t, "train.", "batch_size", c.train.batch_size);
      take(t, "train.", "learning_rate", c.train.adam.learning_rate);
      take(t, "train.", "beta1", c.train.adam.beta1);
      take(t, "train.", "beta2", c.train.adam.beta2);
      take(t, "train.", "epsilon", c.train.adam.epsilon);
      take(t, "train.", "min_multiplier", c.train.min_multiplier);
    }
  }
  if (j.contains("blobs")) {
    const auto& b = j["blobs"];
    if (!b.is_object()) {
      bad.push_back("blobs");
    } else {
      take(b, "blobs.", "per_class", c.blobs.per_class);
      take(b, "blobs.", "test_per_class", c.blobs.test_per_class);
      take(b, "blobs.", "classes", c.blobs.classes);
      take(b, "blobs.", "spread", c.blobs.spread);
    }
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    for (const auto& f : e.fields())
      if (std::find(bad.begin(), bad.end(), f) == bad.end()) bad.push_back(f);
  }
  if (!bad.empty()) {
    std::string list;
    for (const auto& f : bad) list += (list.empty() ? "" : ", ") + f;
    throw ConfigError(bad, list);
  }
  return c;
}

struct ExperimentData {
  Dataset train;
  Dataset test;
};

/// Loads the train/test splits named by the config.
inline std::shared_ptr<const ExperimentData> load_experiment_data(const ExperimentConfig& cfg) {
  auto d = std::make_shared<ExperimentData>();
  if (cfg.dataset == "blobs") {
    d->train = synth_blobs(cfg.blobs.per_class, cfg.blobs.classes, cfg.blobs.spread, cfg.seed);
    d->test = synth_blobs(cfg.blobs.test_per_class, cfg.blobs.classes, cfg.blobs.spread,
                          derived_rng(cfg.seed, {0x74657374ULL})());
  } else {
    const std::filesystem::path dir(cfg.data_dir);
    d->train = load_idx((dir / "train-images-idx3-ubyte").string(), (dir / "train-labels-idx1-ubyte").string());
    d->test = load_idx((dir / "t10k-images-idx3-ubyte").string(), (dir / "t10k-labels-idx1-ubyte").string());
  }
  return d;
}

inline Topology predictor_topology(const Dataset& d) {
  if (d.shape.flat()) return Topology::mlp(d.shape.size(), {50, 50}, d.classes);
  return Topology::lenet(d.shape, d.classes);
}

/// Fraction of points whose argmax p_cat differs from the label.
template <typename T>
double evaluate(const VariationalParams<T>& params, const Dataset& test) {
  require(test.size() > 0, "evaluate: empty test set");
  const auto preds = predict_all(params, Matrix<T>(test.inputs.template cast<T>()));
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    Eigen::Index best = 0;
    preds[i].p_cat.maxCoeff(&best);
    if (best != test.labels[i]) ++wrong;
  }
  return double(wrong) / double(test.size());
}

struct RoundMetrics {
  int round = 0;
  int labeled = 0;
  double test_error = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double wall_seconds = 0.0;
  std::string strategy;
  std::vector<std::size_t> selected;
  std::vector<int> labels;
  std::vector<double> action_probs;
  std::vector<double> rewards;
  std::vector<double> returns;
  double baseline = 0.0;
};

inline json to_json(const RoundMetrics& m) {
  return json{{"round", m.round},
              {"labeled", m.labeled},
              {"test_error", std::isnan(m.test_error) ? json(nullptr) : json(m.test_error)},
              {"wall_seconds", m.wall_seconds},
              {"strategy", m.strategy},
              {"selected", m.selected},
              {"labels", m.labels},
              {"action_probs", m.action_probs},
              {"rewards", m.rewards},
              {"returns", m.returns},
              {"baseline", m.baseline}};
}

inline RoundMetrics round_metrics_from_json(const json& j) {
  RoundMetrics m;
  m.round = j.at("round");
  m.labeled = j.at("labeled");
  m.test_error = j.at("test_error").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                              : j.at("test_error").get<double>();
  m.wall_seconds = j.at("wall_seconds");
  m.strategy = j.at("strategy");
  m.selected = j.at("selected").get<std::vector<std::size_t>>();
  m.labels = j.at("labels").get<std::vector<int>>();
  m.action_probs = j.at("action_probs").get<std::vector<double>>();
  m.rewards = j.at("rewards").get<std::vector<double>>();
  m.returns = j.at("returns").get<std::vector<double>>();
  m.baseline = j.at("baseline");
  return m;
}

/// Points chosen for one round, before their labels are known.
struct Proposal {
  int round = 0;  // index of the round being proposed (1-based)
  std::vector<std::size_t> indices;
  Trajectory trajectory;  // RAL only
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version, integrity, mismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

class ByteWriter {
 public:
  template <typename P>
  void put(const P& v) {
    static_assert(std::is_trivially_copyable_v<P>);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(P));
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    buf_ += s;
  }
  template <typename P>
  void put_vector(const std::vector<P>& v) {
    put<std::uint64_t>(v.size());
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(P));
  }
  template <typename Derived>
  void put_matrix(const Eigen::MatrixBase<Derived>& m) {
    using S = typename Derived::Scalar;
    put<std::int64_t>(m.rows());
    put<std::int64_t>(m.cols());
    const Matrix<S> dense = m;
    buf_.append(reinterpret_cast<const char*>(dense.data()), dense.size() * sizeof(S));
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : buf_(b) {}
  template <typename P>
  P get() {
    P v;
    need(sizeof(P));
    std::memcpy(&v, buf_.data() + pos_, sizeof(P));
    pos_ += sizeof(P);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename P>
  std::vector<P> get_vector() {
    const auto n = get<std::uint64_t>();
    need(n * sizeof(P));
    std::vector<P> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(P));
    pos_ += n * sizeof(P);
    return v;
  }
  template <typename S>
  Matrix<S> get_matrix() {
    const auto r = get<std::int64_t>(), c = get<std::int64_t>();
    if (r < 0 || c < 0) throw CheckpointError(CheckpointError::Kind::integrity, "checkpoint: bad matrix shape");
    need(std::size_t(r * c) * sizeof(S));
    Matrix<S> m(r, c);
    std::memcpy(m.data(), buf_.data() + pos_, std::size_t(r * c) * sizeof(S));
    pos_ += std::size_t(r * c) * sizeof(S);
    return m;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw CheckpointError(CheckpointError::Kind::integrity, "checkpoint: truncated payload");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

template <typename T>
void put_layers(ByteWriter& w, const std::vector<GaussianLayer<T>>& layers) {
  w.put<std::uint64_t>(layers.size());
  for (const auto& l : layers) {
    w.put_matrix(l.mu);
    w.put_matrix(l.rho);
    w.put_matrix(l.bias_mu);
    w.put_matrix(l.bias_rho);
  }
}

template <typename T>
std::vector<GaussianLayer<T>> get_layers(ByteReader& r) {
  std::vector<GaussianLayer<T>> layers(r.get<std::uint64_t>());
  for (auto& l : layers) {
    l.mu = r.get_matrix<T>();
    l.rho = r.get_matrix<T>();
    l.bias_mu = r.get_matrix<T>();
    l.bias_rho = r.get_matrix<T>();
  }
  return layers;
}

inline constexpr char kCheckpointMagic[8] = {'R', 'A', 'L', 'C', 'K', 'P', 'T', '\0'};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Round-boundary state of one active-learning run.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, std::shared_ptr<const ExperimentData> data)
      : cfg_(std::move(cfg)), data_(std::move(data)) {
    cfg_.validate();
    cfg_.train.total_rounds = cfg_.rounds();
    cfg_.train.seed = cfg_.seed;
    data_->train.validate();
    data_->test.validate();
    const Split s = split(data_->train, cfg_.initial, derived_rng(cfg_.seed, {0x73706c74ULL})(), cfg_.pool_size);
    labeled_ = s.labeled;
    for (std::size_t i : labeled_) labeled_y_.push_back(data_->train.labels[i]);
    pool_ = s.pool;
    params_ = init_params<float>(predictor_topology(data_->train), float(cfg_.prior_precision),
                                 derived_rng(cfg_.seed, {0x696e6974ULL})());
    opt_ = AdamState<float>::for_params(params_);
    if (cfg_.strategy == Strategy::ral) {
      policy_ = init_policy(data_->train.classes, cfg_.candidates, cfg_.policy_prior_precision,
                            derived_rng(cfg_.seed, {0x706f6cULL})(), cfg_.policy_hidden);
      policy_opt_ = AdamState<double>::for_params(policy_);
    }
  }

  const ExperimentConfig& config() const { return cfg_; }
  const ExperimentData& data() const { return *data_; }
  std::shared_ptr<const ExperimentData> data_ptr() const { return data_; }
  const VariationalParams<float>& params() const { return params_; }
  const PolicyParams& policy() const { return policy_; }
  const std::vector<std::size_t>& labeled() const { return labeled_; }
  const std::vector<int>& labeled_labels() const { return labeled_y_; }
  const std::vector<std::size_t>& pool() const { return pool_; }
  const std::vector<RoundMetrics>& metrics() const { return metrics_; }
  const RewardBaseline& baseline() const { return baseline_; }
  int rounds_done() const { return round_; }
  bool initialized() const { return initialized_; }
  bool finished() const { return initialized_ && round_ >= cfg_.rounds(); }

  /// Labels received for the current proposal but not yet committed (human oracle).
  std::vector<int>& pending_labels() { return pending_; }
  const std::vector<int>& pending_labels() const { return pending_; }

  /// Initial fit on D_l and the round-0 evaluation.
  void initialize() {
    if (initialized_) return;
    const auto t0 = std::chrono::steady_clock::now();
    params_ = train_predictor(labeled_batch(), std::move(params_), opt_, cfg_.train, 0);
    RoundMetrics m;
    m.round = 0;
    m.labeled = int(labeled_.size());
    m.strategy = to_string(cfg_.strategy);
    m.test_error = evaluate(params_, data_->test);
    m.wall_seconds = seconds_since(t0);
    metrics_.push_back(std::move(m));
    initialized_ = true;
  }

  /// Selects the next round's T points. Depends only on the current state.
  Proposal propose_round() const {
    require(initialized_, "propose_round: experiment not initialized");
    require(!finished(), "propose_round: experiment finished");
    Proposal p;
    p.round = round_ + 1;
    const int t_count = cfg_.per_round;
    require(pool_.size() >= std::size_t(t_count), "propose_round: pool exhausted");
    const std::uint64_t sel_seed = derived_rng(cfg_.seed, {0x73656cULL, std::uint64_t(p.round)})();
    if (cfg_.strategy != Strategy::ral) {
      std::vector<PredictiveDistribution<float>> preds;
      if (cfg_.strategy != Strategy::random) preds = pool_predictions();
      const Criterion crit = cfg_.strategy == Strategy::random   ? Criterion::random
                             : cfg_.strategy == Strategy::maxent ? Criterion::maxent
                                                                 : Criterion::bald;
      const auto order = rank_pool(pool_, preds, crit, sel_seed, cfg_.bald_samples);
      p.indices.assign(order.begin(), order.begin() + t_count);
      return p;
    }
    std::vector<std::size_t> remaining = pool_;
    std::vector<PredictiveDistribution<float>> preds = pool_predictions();
    p.trajectory.gamma = cfg_.gamma;
    for (int t = 0; t < t_count; ++t) {
      TrajectoryStep step;
      step.state = build_state(remaining, preds, cfg_.stride, cfg_.candidates);
      const Vector<double> probs = policy_forward(step.state, policy_);
      auto rng = derived_rng(cfg_.seed, {0x616374ULL, std::uint64_t(p.round), std::uint64_t(t)});
      step.action = sample_action(probs, rng);
      step.probability = probs(step.action);
      step.pool_index = step.state.candidates[step.action];
      const auto it = std::find(remaining.begin(), remaining.end(), step.pool_index);
      preds.erase(preds.begin() + (it - remaining.begin()));
      remaining.erase(it);
      p.indices.push_back(step.pool_index);
      p.trajectory.steps.push_back(std::move(step));
    }
    return p;
  }

  /// Commits oracle labels for a proposal: retrain, rewards, policy update,
  /// evaluation. Returns the new round's metrics.
  const RoundMetrics& complete_round(Proposal p, const std::vector<int>& labels) {
    require(p.round == round_ + 1, "complete_round: proposal is for another round");
    require(labels.size() == p.indices.size(), "complete_round: one label per proposed point");
    for (int y : labels) require(y >= 0 && y < data_->train.classes, "complete_round: label out of range");
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t idx : p.indices) {
      const auto it = std::find(pool_.begin(), pool_.end(), idx);
      require(it != pool_.end(), "complete_round: point " + std::to_string(idx) + " is not in the pool");
      pool_.erase(it);
    }
    labeled_.insert(labeled_.end(), p.indices.begin(), p.indices.end());
    labeled_y_.insert(labeled_y_.end(), labels.begin(), labels.end());
    const VariationalParams<float> before = params_;
    params_ = train_predictor(labeled_batch(), std::move(params_), opt_, cfg_.train, p.round);
    RoundMetrics m;
    m.round = p.round;
    m.labeled = int(labeled_.size());
    m.strategy = to_string(cfg_.strategy);
    m.selected = p.indices;
    m.labels = labels;
    if (cfg_.strategy == Strategy::ral) {
      Matrix<float> x(data_->train.inputs.rows(), Eigen::Index(p.indices.size()));
      for (std::size_t i = 0; i < p.indices.size(); ++i)
        x.col(Eigen::Index(i)) = data_->train.inputs.col(Eigen::Index(p.indices[i]));
      const auto improv = reward_improvement(x, labels, before, params_);
      auto& traj = p.trajectory;
      for (std::size_t t = 0; t < traj.steps.size(); ++t) traj.steps[t].reward = improv[t];
      traj.steps.back().reward += reward_diversity(labels);
      traj.finish();
      m.baseline = baseline_.value();
      AdamConfig pc;
      pc.learning_rate = cfg_.policy_learning_rate;
      policy_update(traj, m.baseline, policy_, policy_opt_, pc);
      m.rewards = traj.rewards();
      m.returns = traj.returns;
      for (const auto& s : traj.steps) m.action_probs.push_back(s.probability);
      baseline_.add(m.rewards);
    }
    round_ = p.round;
    if (round_ % cfg_.rounds_per_eval == 0 || round_ == cfg_.rounds()) m.test_error = evaluate(params_, data_->test);
    m.wall_seconds = seconds_since(t0);
    metrics_.push_back(std::move(m));
    pending_.clear();
    return metrics_.back();
  }

  /// Last evaluated test error.
  double final_error() const {
    for (auto it = metrics_.rbegin(); it != metrics_.rend(); ++it)
      if (!std::isnan(it->test_error)) return it->test_error;
    return std::numeric_limits<double>::quiet_NaN();
  }

  json metrics_json() const {
    json rounds = json::array();
    for (const auto& m : metrics_) rounds.push_back(to_json(m));
    return json{{"config", to_json(cfg_)},
                {"rounds", rounds},
                {"finished", finished()},
                {"final_error", std::isnan(final_error()) ? json(nullptr) : json(final_error())},
                {"labeled_sequence", labeled_}};
  }

  void save(const std::filesystem::path& path) const {
    detail::ByteWriter w;
    w.put_string(to_json(cfg_).dump());
    w.put<std::uint64_t>(data_->train.size());
    w.put<std::uint64_t>(data_->test.size());
    w.put<std::uint32_t>(label_fingerprint(data_->train));
    w.put<std::uint8_t>(initialized_);
    w.put<std::int32_t>(round_);
    w.put_vector(labeled_);
    w.put_vector(labeled_y_);
    w.put_vector(pool_);
    w.put_vector(pending_);
    detail::put_layers(w, params_.layers);
    detail::put_layers(w, opt_.m);
    detail::put_layers(w, opt_.v);
    w.put<std::int64_t>(opt_.step);
    detail::put_layers(w, policy_.layers);
    detail::put_layers(w, policy_opt_.m);
    detail::put_layers(w, policy_opt_.v);
    w.put<std::int64_t>(policy_opt_.step);
    w.put<double>(baseline_.sum);
    w.put<std::uint64_t>(baseline_.count);
    json rounds = json::array();
    for (const auto& m : metrics_) rounds.push_back(to_json(m));
    w.put_string(rounds.dump());

    const std::string& payload = w.bytes();
    const std::uint32_t crc = crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), uInt(payload.size()));
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + tmp.string());
      out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
      const std::uint32_t version = kCheckpointVersion;
      const std::uint64_t size = payload.size();
      out.write(reinterpret_cast<const char*>(&version), sizeof(version));
      out.write(reinterpret_cast<const char*>(&size), sizeof(size));
      out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
      out.write(payload.data(), std::streamsize(payload.size()));
      if (!out) throw CheckpointError(CheckpointError::Kind::io, "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  using DataLoader = std::function<std::shared_ptr<const ExperimentData>(const ExperimentConfig&)>;

  /// Restores a saved run; the dataset is reloaded from the stored config.
  static Experiment load(const std::filesystem::path& path, const DataLoader& loader = load_experiment_data) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path.string());
    const std::string raw{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    constexpr std::size_t header = sizeof(detail::kCheckpointMagic) + 4 + 8 + 4;
    if (raw.size() < header || std::memcmp(raw.data(), detail::kCheckpointMagic, 8) != 0)
      throw CheckpointError(CheckpointError::Kind::bad_magic, path.string() + ": not a checkpoint file");
    std::uint32_t version, crc;
    std::uint64_t size;
    std::memcpy(&version, raw.data() + 8, 4);
    std::memcpy(&size, raw.data() + 12, 8);
    std::memcpy(&crc, raw.data() + 20, 4);
    if (version != kCheckpointVersion)
      throw CheckpointError(CheckpointError::Kind::version, path.string() + ": checkpoint version " +
                                                                std::to_string(version) + ", expected " +
                                                                std::to_string(kCheckpointVersion));
    if (raw.size() != header + size)
      throw CheckpointError(CheckpointError::Kind::integrity, path.string() + ": size does not match header");
    const std::string payload = raw.substr(header);
    if (crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), uInt(payload.size())) != crc)
      throw CheckpointError(CheckpointError::Kind::integrity, path.string() + ": checksum mismatch");

    detail::ByteReader r(payload);
    const ExperimentConfig cfg = config_from_json(json::parse(r.get_string()));
    const auto data = loader(cfg);
    const auto n_train = r.get<std::uint64_t>(), n_test = r.get<std::uint64_t>();
    const auto fp = r.get<std::uint32_t>();
    if (n_train != data->train.size() || n_test != data->test.size() || fp != label_fingerprint(data->train))
      throw CheckpointError(CheckpointError::Kind::mismatch, path.string() + ": dataset differs from the checkpointed run");
    Experiment e(cfg, data);
    e.initialized_ = r.get<std::uint8_t>() != 0;
    e.round_ = r.get<std::int32_t>();
    e.labeled_ = r.get_vector<std::size_t>();
    e.labeled_y_ = r.get_vector<int>();
    e.pool_ = r.get_vector<std::size_t>();
    e.pending_ = r.get_vector<int>();
    e.params_.layers = detail::get_layers<float>(r);
    e.opt_.m = detail::get_layers<float>(r);
    e.opt_.v = detail::get_layers<float>(r);
    e.opt_.step = r.get<std::int64_t>();
    e.policy_.layers = detail::get_layers<double>(r);
    e.policy_opt_.m = detail::get_layers<double>(r);
    e.policy_opt_.v = detail::get_layers<double>(r);
    e.policy_opt_.step = r.get<std::int64_t>();
    e.baseline_.sum = r.get<double>();
    e.baseline_.count = r.get<std::uint64_t>();
    for (const auto& m : json::parse(r.get_string())) e.metrics_.push_back(round_metrics_from_json(m));
    if (!r.done()) throw CheckpointError(CheckpointError::Kind::integrity, path.string() + ": trailing bytes");
    try {
      e.params_.validate();
      if (cfg.strategy == Strategy::ral) e.policy_.validate();
    } catch (const std::invalid_argument& ex) {
      throw CheckpointError(CheckpointError::Kind::integrity, path.string() + ": " + ex.what());
    }
    return e;
  }

 private:
  LabeledBatch<float> labeled_batch() const {
    LabeledBatch<float> b{Matrix<float>(data_->train.inputs.rows(), Eigen::Index(labeled_.size())), labeled_y_};
    for (std::size_t i = 0; i < labeled_.size(); ++i)
      b.inputs.col(Eigen::Index(i)) = data_->train.inputs.col(Eigen::Index(labeled_[i]));
    return b;
  }

  std::vector<PredictiveDistribution<float>> pool_predictions() const {
    Matrix<float> x(data_->train.inputs.rows(), Eigen::Index(pool_.size()));
    for (std::size_t i = 0; i < pool_.size(); ++i) x.col(Eigen::Index(i)) = data_->train.inputs.col(Eigen::Index(pool_[i]));
    return predict_all(params_, x);
  }

  static std::uint32_t label_fingerprint(const Dataset& d) {
    return crc32(0L, reinterpret_cast<const Bytef*>(d.labels.data()), uInt(d.labels.size() * sizeof(int)));
  }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  ExperimentConfig cfg_;
  std::shared_ptr<const ExperimentData> data_;
  bool initialized_ = false;
  int round_ = 0;
  std::vector<std::size_t> labeled_;
  std::vector<int> labeled_y_;
  std::vector<std::size_t> pool_;
  std::vector<int> pending_;
  VariationalParams<float> params_;
  AdamState<float> opt_;
  PolicyParams policy_;
  AdamState<double> policy_opt_;
  RewardBaseline baseline_;
  std::vector<RoundMetrics> metrics_;
};

/// Thrown by an oracle that gives up (timeout, user abort).
class OracleAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Oracle {
 public:
  virtual ~Oracle() = default;
  /// Labels for the given train-split indices, in order.
  virtual std::vector<int> label(const Experiment& exp, const Proposal& proposal) = 0;
};

/// Answers from the dataset's ground truth.
class SimulatedOracle : public Oracle {
 public:
  std::vector<int> label(const Experiment& exp, const Proposal& p) override {
    std::vector<int> y;
    for (std::size_t i : p.indices) y.push_back(exp.data().train.labels[i]);
    return y;
  }
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: write nothing
  std::function<void(const Experiment&, const RoundMetrics&)> on_round;
};

struct RunResult {
  bool halted = false;  // oracle aborted; state checkpointed
  std::string reason;
};

/// One JSON line per step of a RAL round.
inline void append_trajectory_log(const std::filesystem::path& path, const RoundMetrics& m) {
  if (m.rewards.empty()) return;
  std::ofstream out(path, std::ios::app);
  for (std::size_t t = 0; t < m.rewards.size(); ++t)
    out << json{{"round", m.round},        {"step", t},
                {"pool_index", m.selected[t]}, {"label", m.labels[t]},
                {"action_prob", m.action_probs[t]}, {"reward", m.rewards[t]},
                {"return", m.returns[t]},  {"baseline", m.baseline}}
               .dump()
        << '\n';
}

inline void write_run_files(const Experiment& exp, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  exp.save(dir / "checkpoint.bin");
  const auto tmp = dir / "metrics.json.tmp";
  {
    std::ofstream out(tmp);
    out << exp.metrics_json().dump(1) << '\n';
  }
  std::filesystem::rename(tmp, dir / "metrics.json");
}

/// Drives an experiment to completion (or until the oracle aborts),
/// checkpointing after every round when an output directory is given.
inline RunResult run_experiment(Experiment& exp, Oracle& oracle, const RunOptions& opt = {}) {
  RunResult res;
  const bool persist = !opt.out_dir.empty();
  if (!exp.initialized()) {
    exp.initialize();
    if (persist) write_run_files(exp, opt.out_dir);
    if (opt.on_round) opt.on_round(exp, exp.metrics().back());
  }
  while (!exp.finished()) {
    Proposal p = exp.propose_round();
    std::vector<int> labels;
    try {
      labels = oracle.label(exp, p);
    } catch (const OracleAborted& e) {
      if (persist) write_run_files(exp, opt.out_dir);
      res.halted = true;
      res.reason = e.what();
      return res;
    }
    const RoundMetrics& m = exp.complete_round(std::move(p), labels);
    if (persist) {
      append_trajectory_log(opt.out_dir / "trajectory.jsonl", m);
      write_run_files(exp, opt.out_dir);
    }
    if (opt.on_round) opt.on_round(exp, m);
  }
  if (persist) write_run_files(exp, opt.out_dir);
  return res;
}

}  // namespace ral
