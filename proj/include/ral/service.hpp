#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <regex>
#include <string>
#include <thread>

// Eigen before httplib: <resolv.h> defines _res, which Eigen uses as a parameter name.
#include "ral/driver.hpp"

#include <httplib.h>

namespace ral {

/// One live labeling session. The worker thread owns the experiment; HTTP
/// handlers only touch the fields below `mu`.
class Session {
 public:
  enum class Status { training, awaiting_label, finished, failed };

  static const char* name(Status s) {
    switch (s) {
      case Status::training: return "training";
      case Status::awaiting_label: return "awaiting-label";
      case Status::finished: return "finished";
      case Status::failed: return "failed";
    }
    return "?";
  }

  Session(std::string id, std::filesystem::path dir, std::unique_ptr<Experiment> exp)
      : id_(std::move(id)), dir_(std::move(dir)), exp_(std::move(exp)) {
    snapshot_metrics();
    // Labels committed in earlier runs of the process, plus ones still pending.
    accepted_ = labels_used_ - exp_->config().initial +
                int(std::count_if(exp_->pending_labels().begin(), exp_->pending_labels().end(), [](int y) { return y >= 0; }));
  }

  ~Session() { stop(); }

  const std::string& id() const { return id_; }
  const std::filesystem::path& dir() const { return dir_; }

  void start() {
    worker_ = std::thread([this] { work(); });
  }

  /// Asks the worker to checkpoint and exit at the next label wait.
  void stop() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Status status() const {
    std::lock_guard lock(mu_);
    return status_;
  }

  /// Oldest unanswered query, or the status that prevents one.
  void query(httplib::Response& res) const {
    std::lock_guard lock(mu_);
    if (status_ == Status::finished) {
      res.status = 410;
      set_json(res, json{{"status", name(status_)}, {"final_error", nullable(final_error_)}});
      return;
    }
    if (status_ == Status::failed) {
      res.status = 500;
      set_json(res, json{{"status", name(status_)}, {"error", failure_}});
      return;
    }
    if (status_ == Status::training || !proposal_) {
      res.status = 503;
      res.set_header("Retry-After", "1");
      set_json(res, json{{"status", "training"}, {"retry_after", 1}});
      return;
    }
    for (std::size_t t = 0; t < labels_.size(); ++t) {
      if (labels_[t] >= 0) continue;
      set_json(res, query_payload(t));
      return;
    }
    res.status = 503;
    res.set_header("Retry-After", "1");
    set_json(res, json{{"status", "training"}, {"retry_after", 1}});
  }

  void submit(const json& body, httplib::Response& res) {
    std::int64_t qid = 0;
    int cls = 0;
    try {
      qid = body.at("query_id").get<std::int64_t>();
      cls = body.at("class_id").get<int>();
    } catch (const json::exception&) {
      res.status = 400;
      set_json(res, json{{"error", "body must carry integer query_id and class_id"},
                         {"fields", {"query_id", "class_id"}}});
      return;
    }
    {
      std::lock_guard lock(mu_);
      const std::int64_t base = proposal_ ? query_base(proposal_->round) : -1;
      const bool known = proposal_ && qid >= base && qid < base + std::int64_t(labels_.size());
      if (!known) {
        const bool past = qid >= 0 && qid < query_base(exp_round_ + 1);
        res.status = past ? 409 : 404;
        set_json(res, json{{"error", past ? "query already answered" : "unknown query id"}, {"query_id", qid}});
        return;
      }
      if (cls < 0 || cls >= classes_) {
        res.status = 422;
        set_json(res, json{{"error", "class id out of range"}, {"class_id", cls}, {"classes", classes_}});
        return;
      }
      int& slot = labels_[std::size_t(qid - base)];
      if (slot >= 0) {
        res.status = 409;
        set_json(res, json{{"error", "query already answered"}, {"query_id", qid}});
        return;
      }
      slot = cls;
      ++accepted_;
      int remaining = 0;
      for (int y : labels_) remaining += y < 0;
      if (remaining == 0) status_ = Status::training;
      set_json(res, json{{"accepted", true}, {"remaining", remaining}});
    }
    cv_.notify_all();
  }

  json metrics() const {
    std::lock_guard lock(mu_);
    json errors = json::array(), rewards = json::array(), rounds = json::array();
    for (const auto& m : metrics_) {
      if (!std::isnan(m.test_error)) errors.push_back({{"labeled", m.labeled}, {"error", m.test_error}});
      double total = 0.0;
      for (double r : m.rewards) total += r;
      if (!m.rewards.empty()) rewards.push_back({{"round", m.round}, {"reward", total}});
      rounds.push_back(to_json(m));
    }
    return json{{"session", id_},
                {"status", name(status_)},
                {"rounds_done", metrics_.empty() ? 0 : metrics_.back().round},
                {"labels_used", labels_used_},
                {"labels_accepted", accepted_},
                {"budget", budget_},
                {"error_curve", errors},
                {"reward_curve", rewards},
                {"rounds", rounds}};
  }

  static void set_json(httplib::Response& res, const json& j) { res.set_content(j.dump(), "application/json"); }

 private:
  class HumanOracle : public Oracle {
   public:
    explicit HumanOracle(Session& s) : s_(s) {}
    std::vector<int> label(const Experiment&, const Proposal& p) override { return s_.wait_for_labels(p); }

   private:
    Session& s_;
  };

  static json nullable(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

  std::int64_t query_base(int round) const { return std::int64_t(round - 1) * per_round_; }

  json query_payload(std::size_t t) const {
    const std::size_t idx = proposal_->indices[t];
    const Dataset& d = exp_->data().train;
    const auto col = d.inputs.col(Eigen::Index(idx));
    json image = nullptr;
    if (!d.shape.flat()) {
      std::string raster(std::size_t(col.size()), '\0');
      for (Eigen::Index i = 0; i < col.size(); ++i)
        raster[std::size_t(i)] = char(static_cast<unsigned char>(std::lround(std::clamp(col(i), 0.0f, 1.0f) * 255.0f)));
      image = {{"format", "raw-u8"},
               {"width", d.shape.width},
               {"height", d.shape.height},
               {"channels", d.shape.channels},
               {"layout", "chw"},
               {"data", httplib::detail::base64_encode(raster)}};
    }
    std::vector<std::string> names;
    for (int c = 0; c < d.classes; ++c) names.push_back(std::to_string(c));
    int remaining = 0;
    for (int y : labels_) remaining += y < 0;
    return json{{"query_id", query_base(proposal_->round) + std::int64_t(t)},
                {"pool_index", idx},
                {"image", image},
                {"features", std::vector<float>(col.data(), col.data() + col.size())},
                {"class_names", names},
                {"round", proposal_->round},
                {"progress", {{"labels_used", labels_used_}, {"budget", budget_}, {"remaining_in_round", remaining}}}};
  }

  /// Called on the worker: publish the proposal and block until every label
  /// is in. Each accepted label is checkpointed so a restart keeps it.
  std::vector<int> wait_for_labels(const Proposal& p) {
    std::unique_lock lock(mu_);
    proposal_ = p;
    labels_.assign(p.indices.size(), -1);
    const auto& saved = exp_->pending_labels();
    if (saved.size() == labels_.size()) labels_ = saved;
    status_ = Status::awaiting_label;
    std::size_t seen = std::count_if(labels_.begin(), labels_.end(), [](int y) { return y >= 0; });
    while (true) {
      const std::size_t have = std::count_if(labels_.begin(), labels_.end(), [](int y) { return y >= 0; });
      if (have == labels_.size()) break;
      if (stopping_) {
        exp_->pending_labels() = labels_;
        throw OracleAborted("session stopped");
      }
      if (have != seen) {
        seen = have;
        exp_->pending_labels() = labels_;
        exp_->save(dir_ / "checkpoint.bin");
      }
      cv_.wait(lock);
    }
    status_ = Status::training;
    std::vector<int> out = labels_;
    return out;
  }

  void snapshot_metrics() {
    metrics_ = exp_->metrics();
    final_error_ = exp_->final_error();
    labels_used_ = int(exp_->labeled().size());
    budget_ = exp_->config().budget;
    per_round_ = exp_->config().per_round;
    classes_ = exp_->data().train.classes;
    exp_round_ = exp_->rounds_done();
  }

  void work() {
    try {
      HumanOracle oracle(*this);
      RunOptions opt{dir_, [this](const Experiment&, const RoundMetrics&) {
                       std::lock_guard lock(mu_);
                       snapshot_metrics();
                       proposal_.reset();
                       labels_.clear();
                       status_ = Status::training;
                     }};
      const RunResult r = run_experiment(*exp_, oracle, opt);
      std::lock_guard lock(mu_);
      snapshot_metrics();
      if (!r.halted) status_ = Status::finished;
    } catch (const std::exception& e) {
      std::lock_guard lock(mu_);
      status_ = Status::failed;
      failure_ = e.what();
    }
  }

  std::string id_;
  std::filesystem::path dir_;
  std::unique_ptr<Experiment> exp_;
  std::thread worker_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool stopping_ = false;
  Status status_ = Status::training;
  std::optional<Proposal> proposal_;
  std::vector<int> labels_;
  std::vector<RoundMetrics> metrics_;
  double final_error_ = std::numeric_limits<double>::quiet_NaN();
  int labels_used_ = 0;
  int budget_ = 0;
  int per_round_ = 1;
  int classes_ = 0;
  int exp_round_ = 0;
  int accepted_ = 0;
  std::string failure_;
};

/// HTTP front end: POST /session, GET /session/{id}/query,
/// POST /session/{id}/label, GET /session/{id}/metrics.
class LabelService {
 public:
  /// `data_loader` is swappable so tests can inject in-memory datasets.
  using DataLoader = std::function<std::shared_ptr<const ExperimentData>(const ExperimentConfig&)>;

  explicit LabelService(std::filesystem::path state_root, DataLoader loader = load_experiment_data)
      : root_(std::move(state_root)), loader_(std::move(loader)) {
    std::filesystem::create_directories(root_);
    restore();
    routes();
  }

  ~LabelService() { stop(); }

  httplib::Server& server() { return server_; }

  bool listen(const std::string& host, int port) { return server_.listen(host, port); }

  /// Binds to a free port and serves on a background thread; returns the port.
  int start_background(const std::string& host = "127.0.0.1") {
    const int port = server_.bind_to_any_port(host);
    listener_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port;
  }

  void stop() {
    server_.stop();
    if (listener_.joinable()) listener_.join();
    std::lock_guard lock(mu_);
    for (auto& [id, s] : sessions_) s->stop();
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

 private:
  static std::string new_token() {
    std::random_device rd;
    std::uniform_int_distribution<std::uint64_t> dist;
    char buf[33];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(dist(rd)),
                  static_cast<unsigned long long>(dist(rd)));
    return buf;
  }

  /// Reopens unfinished sessions found under the state root.
  void restore() {
    for (const auto& entry : std::filesystem::directory_iterator(root_)) {
      const auto ckpt = entry.path() / "checkpoint.bin";
      const auto meta = entry.path() / "session.json";
      if (!std::filesystem::exists(ckpt) || !std::filesystem::exists(meta)) continue;
      std::ifstream in(meta);
      const json m = json::parse(in, nullptr, false);
      if (m.is_discarded() || !m.contains("session")) continue;
      try {
        auto exp = std::make_unique<Experiment>(Experiment::load(ckpt, loader_));
        if (exp->finished()) continue;
        auto s = std::make_shared<Session>(m["session"].get<std::string>(), entry.path(), std::move(exp));
        s->start();
        sessions_[s->id()] = s;
        outputs_[entry.path().filename().string()] = s->id();
      } catch (const std::exception&) {
        // Unreadable checkpoints are left alone for inspection.
      }
    }
  }

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
      res.status = 204;
    });

    server_.Post("/session", [this](const httplib::Request& req, httplib::Response& res) {
      const json body = json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object() || !body.contains("config")) {
        res.status = 400;
        Session::set_json(res, json{{"error", "body must be a JSON object with a config field"}, {"fields", {"config"}}});
        return;
      }
      ExperimentConfig cfg;
      try {
        cfg = config_from_json(body["config"]);
      } catch (const ConfigError& e) {
        res.status = 400;
        Session::set_json(res, json{{"error", e.what()}, {"fields", e.fields()}});
        return;
      }
      cfg.oracle = OracleMode::human;
      const std::string id = new_token();
      const std::string output = body.value("output", id);
      if (output.empty() || output.find('/') != std::string::npos || output.find("..") != std::string::npos) {
        res.status = 400;
        Session::set_json(res, json{{"error", "output must be a plain directory name"}, {"fields", {"output"}}});
        return;
      }
      std::lock_guard lock(mu_);
      if (auto it = outputs_.find(output); it != outputs_.end()) {
        auto s = sessions_.at(it->second);
        if (s->status() != Session::Status::finished && s->status() != Session::Status::failed) {
          res.status = 409;
          Session::set_json(res, json{{"error", "another session is active for this output directory"},
                                      {"session", it->second}});
          return;
        }
      }
      std::unique_ptr<Experiment> exp;
      try {
        exp = std::make_unique<Experiment>(cfg, loader_(cfg));
      } catch (const std::exception& e) {
        res.status = 400;
        Session::set_json(res, json{{"error", e.what()}, {"fields", json::array()}});
        return;
      }
      const auto dir = root_ / output;
      std::filesystem::create_directories(dir);
      std::ofstream(dir / "session.json") << json{{"session", id}, {"config", to_json(cfg)}}.dump(1) << "\n";
      auto s = std::make_shared<Session>(id, dir, std::move(exp));
      sessions_[id] = s;
      outputs_[output] = id;
      s->start();
      Session::set_json(res, json{{"session", id}, {"status", Session::name(s->status())}, {"output", output}});
    });

    server_.Get(R"(/session/([0-9a-f]+)/query)", [this](const httplib::Request& req, httplib::Response& res) {
      if (auto s = find_or_404(req, res)) s->query(res);
    });

    server_.Post(R"(/session/([0-9a-f]+)/label)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = find_or_404(req, res);
      if (!s) return;
      const json body = json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object()) {
        res.status = 400;
        Session::set_json(res, json{{"error", "body must be a JSON object"}, {"fields", {"query_id", "class_id"}}});
        return;
      }
      s->submit(body, res);
    });

    server_.Get(R"(/session/([0-9a-f]+)/metrics)", [this](const httplib::Request& req, httplib::Response& res) {
      if (auto s = find_or_404(req, res)) Session::set_json(res, s->metrics());
    });
  }

  std::shared_ptr<Session> find_or_404(const httplib::Request& req, httplib::Response& res) const {
    auto s = find(req.matches[1]);
    if (!s) {
      res.status = 404;
      Session::set_json(res, json{{"error", "unknown session"}, {"session", std::string(req.matches[1])}});
    }
    return s;
  }

  std::filesystem::path root_;
  DataLoader loader_;
  httplib::Server server_;
  std::thread listener_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::map<std::string, std::string> outputs_;  // output dir name -> session id
};

}  // namespace ral
