#include "stpoi/eval.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>
#include <thread>

#include "stpoi/errors.hpp"

namespace stpoi {

double acc_at_k(std::span<const RankingResult> results, std::size_t k) {
  if (results.empty()) throw MetricError("Acc@K is undefined over zero instances");
  std::size_t hits = 0;
  for (const auto& r : results) hits += r.rank <= k ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double mean_ap(std::span<const RankingResult> results) {
  if (results.empty()) throw MetricError("MAP is undefined over zero instances");
  double total = 0.0;
  for (const auto& r : results) {
    if (r.rank == 0) throw PreconditionError("ranks are 1-based");
    total += 1.0 / static_cast<double>(r.rank);
  }
  return total / static_cast<double>(results.size());
}

std::string_view to_string(Cohort c) { return c == Cohort::all ? "all" : "cold"; }

Cohort parse_cohort(std::string_view name) {
  if (name == "all") return Cohort::all;
  if (name == "cold") return Cohort::cold;
  throw ConfigError("unknown cohort '" + std::string(name) + "'");
}

double MetricsReport::acc_at(std::size_t k) const {
  for (const auto& [cut, value] : acc) {
    if (cut == k) return value;
  }
  throw ConfigError("Acc@" + std::to_string(k) + " was not computed");
}

MetricsReport summarize(std::span<const RankingResult> results, const EvalConfig& cfg) {
  MetricsReport m;
  m.cohort = cfg.cohort;
  for (std::size_t k : cfg.cutoffs) m.acc.emplace_back(k, acc_at_k(results, k));
  m.map = mean_ap(results);
  m.n_instances = results.size();
  std::set<std::size_t> users;
  for (const auto& r : results) users.insert(r.user);
  m.n_users = users.size();
  return m;
}

namespace {

class ModelSession : public ScoringSession {
 public:
  ModelSession(const ModelParams& params, const ModelConfig& cfg)
      : params_(params), cfg_(cfg), state_(CellState::zeros(params.cell.n_c)) {}

  void observe(const TransitionTriple& step, std::span<double> scores) override {
    ModelStep out = model_step(params_, cfg_, step, state_);
    state_ = std::move(out.state);
    std::copy(out.logits.data.begin(), out.logits.data.end(), scores.begin());
  }

 private:
  const ModelParams& params_;
  const ModelConfig& cfg_;
  CellState state_;
};

}  // namespace

std::unique_ptr<ScoringSession> ModelRecommender::start(std::size_t) const {
  return std::make_unique<ModelSession>(params_, cfg_);
}

std::size_t rank_of(std::span<const double> scores, std::uint32_t target,
                    std::span<const std::uint8_t> excluded) {
  if (target >= scores.size()) throw IndexError("rank_of: target outside score vector");
  const double s = scores[target];
  if (!std::isfinite(s)) throw NumericError("rank_of: non-finite score for the target");
  std::size_t better = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (!excluded.empty() && excluded[j]) continue;
    if (scores[j] > s || (scores[j] == s && j < target)) ++better;
  }
  return better + 1;
}

std::vector<std::size_t> cohort_users(const Corpus& corpus, const EvalConfig& cfg) {
  std::vector<std::size_t> users;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    if (cfg.cohort == Cohort::cold && corpus.users[u].train_checkins() >= cfg.cold_threshold) {
      continue;
    }
    users.push_back(u);
  }
  return users;
}

namespace {

struct UserRanks {
  std::vector<RankingResult> results;
  std::size_t skipped = 0;
};

UserRanks rank_user(const Recommender& rec, const Corpus& corpus, std::size_t u,
                    const EvalConfig& cfg) {
  UserRanks out;
  const UserSequence& seq = corpus.users[u];
  const std::size_t vocab = rec.vocab_size();
  std::vector<double> scores(vocab);
  std::vector<std::uint8_t> visited(cfg.exclude_visited ? vocab : 0, 0);
  auto session = rec.start(u);
  for (std::size_t t = 0; t + 1 < seq.steps.size(); ++t) {
    session->observe(seq.steps[t], scores);
    if (cfg.exclude_visited) visited[seq.steps[t].poi] = 1;
    if (t + 1 < seq.n_train) continue;
    const std::uint32_t target = seq.steps[t + 1].poi;
    if (target >= vocab) throw IndexError("test POI outside the recommender's vocabulary");
    if (cfg.exclude_visited && visited[target]) {
      ++out.skipped;
      continue;
    }
    out.results.push_back({u, t + 1, rank_of(scores, target, visited)});
  }
  return out;
}

}  // namespace

std::vector<RankingResult> rank_test_instances(const Recommender& rec, const Corpus& corpus,
                                               const EvalConfig& cfg, std::size_t* skipped) {
  if (rec.vocab_size() != corpus.vocab_size()) {
    throw ConfigError("recommender vocabulary (" + std::to_string(rec.vocab_size()) +
                      ") differs from corpus vocabulary (" +
                      std::to_string(corpus.vocab_size()) + ")");
  }
  const auto users = cohort_users(corpus, cfg);
  std::vector<UserRanks> per_user(users.size());
  const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, users.size()));
  if (threads <= 1) {
    for (std::size_t k = 0; k < users.size(); ++k) {
      per_user[k] = rank_user(rec, corpus, users[k], cfg);
    }
  } else {
    std::vector<std::exception_ptr> errors(threads);
    {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t k = w; k < users.size(); k += threads) {
              per_user[k] = rank_user(rec, corpus, users[k], cfg);
            }
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::vector<RankingResult> results;
  std::size_t skip_total = 0;
  for (auto& r : per_user) {
    results.insert(results.end(), r.results.begin(), r.results.end());
    skip_total += r.skipped;
  }
  if (skipped) *skipped = skip_total;
  return results;
}

MetricsReport evaluate(const Recommender& rec, const Corpus& corpus, const EvalConfig& cfg) {
  std::size_t skipped = 0;
  const auto results = rank_test_instances(rec, corpus, cfg, &skipped);
  if (results.empty()) {
    std::string msg = "cohort '" + std::string(to_string(cfg.cohort)) + "' has no test instances";
    if (cfg.cohort == Cohort::cold) {
      msg += " (no user has fewer than " + std::to_string(cfg.cold_threshold) +
             " training check-ins)";
    }
    throw MetricError(msg);
  }
  MetricsReport m = summarize(results, cfg);
  m.n_skipped = skipped;
  return m;
}

MetricsReport evaluate(const ModelParams& params, const ModelConfig& model_cfg,
                       const Corpus& corpus, const EvalConfig& cfg) {
  return evaluate(ModelRecommender(params, model_cfg), corpus, cfg);
}

void write_metrics_text(const MetricsReport& report, std::ostream& out) {
  const std::string prefix = std::string(to_string(report.cohort)) + ".";
  for (const auto& [k, v] : report.acc) out << prefix << "acc@" << k << '\t' << v << '\n';
  out << prefix << "map\t" << report.map << '\n';
  out << prefix << "instances\t" << report.n_instances << '\n';
  out << prefix << "users\t" << report.n_users << '\n';
  out << prefix << "skipped\t" << report.n_skipped << '\n';
}

nlohmann::json metrics_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["cohort"] = to_string(report.cohort);
  for (const auto& [k, v] : report.acc) j["acc@" + std::to_string(k)] = v;
  j["map"] = report.map;
  j["n_instances"] = report.n_instances;
  j["n_users"] = report.n_users;
  j["n_skipped"] = report.n_skipped;
  return j;
}

void write_rank_dump(std::span<const RankingResult> results, const Corpus& corpus,
                     std::ostream& out) {
  out << "user\tstep\ttarget\trank\n";
  for (const auto& r : results) {
    const auto& seq = corpus.users[r.user];
    out << seq.user << '\t' << r.step << '\t' << corpus.vocab[seq.steps[r.step].poi] << '\t'
        << r.rank << '\n';
  }
}

}  // namespace stpoi
