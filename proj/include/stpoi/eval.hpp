#pragma once

// Ranking metrics and the teacher-forced test protocol.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "stpoi/data.hpp"
#include "stpoi/model.hpp"

namespace stpoi {

struct RankingResult {
  std::size_t user = 0;  // index into Corpus::users
  std::size_t step = 0;  // index of the target record in the user's sequence
  std::size_t rank = 0;  // 1-based rank of the true next POI
};

// Fraction of results with rank <= k.
double acc_at_k(std::span<const RankingResult> results, std::size_t k);
// Mean reciprocal rank, i.e. average precision with one relevant item.
double mean_ap(std::span<const RankingResult> results);

enum class Cohort { all, cold };

std::string_view to_string(Cohort c);
Cohort parse_cohort(std::string_view name);

inline const std::vector<std::size_t> kDefaultCutoffs = {1, 5, 10, 15, 20};

struct EvalConfig {
  Cohort cohort = Cohort::all;
  // Cold users have fewer than this many check-ins in their training split.
  std::size_t cold_threshold = 5;
  // Rank only POIs absent from the history; instances whose target was
  // already visited are skipped and counted.
  bool exclude_visited = false;
  std::vector<std::size_t> cutoffs = kDefaultCutoffs;
  unsigned threads = 1;
};

struct MetricsReport {
  Cohort cohort = Cohort::all;
  std::vector<std::pair<std::size_t, double>> acc;  // (K, Acc@K)
  double map = 0.0;
  std::size_t n_instances = 0;
  std::size_t n_users = 0;
  std::size_t n_skipped = 0;

  double acc_at(std::size_t k) const;
};

MetricsReport summarize(std::span<const RankingResult> results, const EvalConfig& cfg);

// Produces next-POI scores while consuming one user's history step by step.
class ScoringSession {
 public:
  virtual ~ScoringSession() = default;
  // Consumes `step` (POI plus intervals to the next record) and writes a
  // score for every POI into `scores`.
  virtual void observe(const TransitionTriple& step, std::span<double> scores) = 0;
};

class Recommender {
 public:
  virtual ~Recommender() = default;
  virtual std::size_t vocab_size() const = 0;
  // user is the index into Corpus::users.
  virtual std::unique_ptr<ScoringSession> start(std::size_t user) const = 0;
};

// Scores with a trained network; the hidden state is carried across the
// whole history.
class ModelRecommender : public Recommender {
 public:
  ModelRecommender(const ModelParams& params, const ModelConfig& cfg)
      : params_(params), cfg_(cfg) {}
  std::size_t vocab_size() const override { return params_.b_out.size(); }
  std::unique_ptr<ScoringSession> start(std::size_t user) const override;

 private:
  const ModelParams& params_;
  ModelConfig cfg_;
};

// 1-based rank of `target` when POIs are ordered by descending score with
// ties broken by ascending id. Excluded POIs are skipped.
std::size_t rank_of(std::span<const double> scores, std::uint32_t target,
                    std::span<const std::uint8_t> excluded = {});

// Conditions on every earlier record (training split, then earlier test
// records) and ranks the true POI of each test record.
std::vector<RankingResult> rank_test_instances(const Recommender& rec, const Corpus& corpus,
                                               const EvalConfig& cfg,
                                               std::size_t* skipped = nullptr);

// Throws MetricError when the requested cohort has no test instances.
MetricsReport evaluate(const Recommender& rec, const Corpus& corpus, const EvalConfig& cfg);
MetricsReport evaluate(const ModelParams& params, const ModelConfig& model_cfg,
                       const Corpus& corpus, const EvalConfig& cfg);

// Users of the corpus in the cohort.
std::vector<std::size_t> cohort_users(const Corpus& corpus, const EvalConfig& cfg);

void write_metrics_text(const MetricsReport& report, std::ostream& out);
nlohmann::json metrics_to_json(const MetricsReport& report);
void write_rank_dump(std::span<const RankingResult> results, const Corpus& corpus,
                     std::ostream& out);

}  // namespace stpoi
