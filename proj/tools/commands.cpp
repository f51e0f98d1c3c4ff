#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "stpoi/checkpoint.hpp"
#include "stpoi/data.hpp"
#include "stpoi/errors.hpp"
#include "stpoi/eval.hpp"
#include "stpoi/optim.hpp"
#include "stpoi/training.hpp"

namespace stpoi::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;
constexpr int kDiverged = 3;

const std::vector<std::string> kVariantNames = {"lstm", "st-lstm", "st-clstm"};
const std::vector<std::string> kAblationNames = {"none", "time-only", "distance-only",
                                                 "short-term-only", "long-term-only"};

struct ModelFlags {
  std::string variant = "st-clstm";
  std::size_t cell_size = 128;
  std::size_t embed_size = 128;
  bool fix_t1 = false, fix_t2 = false, fix_d1 = false, fix_d2 = false;
  std::string constraint_target = "interval";
  std::size_t bptt_cap = 0;
  bool clip_intervals = false;
  double max_dt = 24.0 * 30.0;
  double max_dd = 100.0;
  bool log1p = false;
};

struct OptimFlags {
  std::size_t epochs = 100;
  std::size_t batch_size = 10;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  bool early_stop = false;
  std::size_t patience = 10;
  double rel_tol = 1e-4;
  unsigned threads = 1;
};

void add_model_flags(CLI::App* app, ModelFlags& f, bool with_ablation_flags) {
  app->add_option("--variant", f.variant, "Cell variant")
      ->check(CLI::IsMember(kVariantNames))
      ->capture_default_str();
  app->add_option("--cell-size", f.cell_size, "Cell and hidden size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--embed-size", f.embed_size, "POI embedding size")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  if (with_ablation_flags) {
    app->add_flag("--fix-t1", f.fix_t1, "Replace time gate T1 by ones");
    app->add_flag("--fix-t2", f.fix_t2, "Replace time gate T2 by ones");
    app->add_flag("--fix-d1", f.fix_d1, "Replace distance gate D1 by ones");
    app->add_flag("--fix-d2", f.fix_d2, "Replace distance gate D2 by ones");
  }
  app->add_option("--constraint-target", f.constraint_target,
                  "Weights kept non-positive: interval (w_t1, w_d1) or input (W_xt1, W_xd1)")
      ->check(CLI::IsMember({"interval", "input"}))
      ->capture_default_str();
  app->add_option("--bptt-cap", f.bptt_cap, "Truncated BPTT window in steps (0: whole sequence)")
      ->capture_default_str();
  app->add_flag("--clip-intervals", f.clip_intervals, "Clip dt/dd at --max-dt/--max-dd");
  app->add_option("--max-dt", f.max_dt, "Clip bound for dt in hours")->capture_default_str();
  app->add_option("--max-dd", f.max_dd, "Clip bound for dd in km")->capture_default_str();
  app->add_flag("--log1p-intervals", f.log1p, "Feed log1p(dt), log1p(dd) to the cell");
}

void add_optim_flags(CLI::App* app, OptimFlags& f, bool with_batch_and_seed) {
  app->add_option("--epochs", f.epochs, "Training epochs")->capture_default_str();
  if (with_batch_and_seed) {
    app->add_option("--batch-size", f.batch_size, "User sequences per optimizer step")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app->add_option("--seed", f.seed, "Seed for initialization and data order")
        ->capture_default_str();
  }
  app->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
  app->add_option("--beta1", f.beta1, "Adam beta1")->capture_default_str();
  app->add_option("--beta2", f.beta2, "Adam beta2")->capture_default_str();
  app->add_option("--adam-eps", f.adam_eps, "Adam epsilon")->capture_default_str();
  app->add_option("--clip-norm", f.clip_norm, "Global gradient-norm clip (0 disables)")
      ->capture_default_str();
  app->add_flag("--early-stop", f.early_stop, "Stop when the epoch loss plateaus");
  app->add_option("--patience", f.patience, "Early-stop patience in epochs")
      ->capture_default_str();
  app->add_option("--rel-tol", f.rel_tol, "Early-stop minimum relative improvement")
      ->capture_default_str();
  app->add_option("--threads", f.threads, "Worker threads for batch gradients")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

ModelConfig model_config(const ModelFlags& f, GateAblation ablation) {
  ModelConfig m;
  m.variant = parse_variant(f.variant);
  m.n_i = f.embed_size;
  m.n_c = f.cell_size;
  m.ablation = ablation;
  m.bptt_cap = f.bptt_cap;
  m.constraint_target = parse_constraint_target(f.constraint_target);
  m.intervals.clip = f.clip_intervals;
  m.intervals.max_dt_hours = f.max_dt;
  m.intervals.max_dd_km = f.max_dd;
  m.intervals.log1p = f.log1p;
  if (m.variant == Variant::lstm && ablation.any()) {
    throw ConfigError("gate ablation requires an st-lstm or st-clstm variant");
  }
  return m;
}

TrainConfig train_config(const ModelConfig& m, const OptimFlags& f) {
  TrainConfig t;
  t.model = m;
  t.adam = {f.lr, f.beta1, f.beta2, f.adam_eps};
  t.clip_norm = f.clip_norm;
  t.epochs = f.epochs;
  t.batch_size = f.batch_size;
  t.seed = f.seed;
  t.early_stop = {f.early_stop, f.patience, f.rel_tol};
  t.threads = f.threads;
  return t;
}

json model_json(const ModelConfig& m) {
  return {{"variant", to_string(m.variant)},
          {"embed_size", m.n_i},
          {"cell_size", m.n_c},
          {"vocab", m.vocab},
          {"ablation", ablation_name(m.ablation)},
          {"fix_t1", m.ablation.fix_t1},
          {"fix_t2", m.ablation.fix_t2},
          {"fix_d1", m.ablation.fix_d1},
          {"fix_d2", m.ablation.fix_d2},
          {"bptt_cap", m.bptt_cap},
          {"constraint_target", to_string(m.constraint_target)},
          {"constrained_tensors", constrained_model_tensors(m)},
          {"clip_intervals", m.intervals.clip},
          {"max_dt_hours", m.intervals.max_dt_hours},
          {"max_dd_km", m.intervals.max_dd_km},
          {"log1p_intervals", m.intervals.log1p}};
}

json train_json(const TrainConfig& t) {
  return {{"model", model_json(t.model)},
          {"optimizer",
           {{"lr", t.adam.lr},
            {"beta1", t.adam.beta1},
            {"beta2", t.adam.beta2},
            {"eps", t.adam.eps},
            {"clip_norm", t.clip_norm}}},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"early_stop",
           {{"enabled", t.early_stop.enabled},
            {"patience", t.early_stop.patience},
            {"rel_tol", t.early_stop.rel_tol}}},
          {"threads", t.threads}};
}

void write_text(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string command_line(const std::vector<std::string>& args) {
  std::string s = "stpoi";
  for (const auto& a : args) s += " " + a;
  return s;
}

// ---------------------------------------------------------------- prepare

struct PrepareFlags {
  std::string input;
  std::string format = "snap";
  bool synth = false;
  std::string pattern = "periodic";
  std::size_t users = 50;
  std::size_t pois = 40;
  std::size_t cycle = 3;
  std::size_t checkins_per_user = 30;
  double jump_prob = 0.01;
  std::uint64_t seed = 1;
  std::size_t min_user_checkins = 10;
  std::size_t min_poi_users = 10;
  double train_frac = 0.7;
  std::size_t cold_threshold = 5;
  std::string out_dir;
};

json stats_json(const DatasetStats& s) {
  return {{"users", s.users}, {"pois", s.pois}, {"checkins", s.checkins}, {"density", s.density}};
}

int cmd_prepare(const PrepareFlags& f, const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err) {
  if (f.synth == !f.input.empty()) throw UsageError("prepare needs exactly one of --input or --synth");

  std::vector<CheckIn> raw;
  json source;
  std::size_t malformed = 0;
  if (f.synth) {
    SynthOptions o;
    o.seed = f.seed;
    o.n_users = f.users;
    o.n_pois = f.pois;
    o.pattern = parse_synth_pattern(f.pattern);
    o.cycle_length = f.cycle;
    o.checkins_per_user = f.checkins_per_user;
    o.jump_prob = f.jump_prob;
    o.train_frac = f.train_frac;
    raw = synth_checkins(o);
    source = {{"synth", true},
              {"pattern", to_string(o.pattern)},
              {"users", o.n_users},
              {"pois", o.n_pois},
              {"cycle_length", o.cycle_length},
              {"checkins_per_user", o.checkins_per_user},
              {"jump_prob", o.jump_prob},
              {"seed", o.seed}};
  } else {
    auto loaded = load_checkins(f.input, parse_checkin_format(f.format));
    for (const auto& w : loaded.warnings) err << "warning: " << w << '\n';
    raw = std::move(loaded.checkins);
    malformed = loaded.malformed;
    source = {{"synth", false},
              {"input", f.input},
              {"format", f.format},
              {"lines", loaded.lines},
              {"malformed_lines", loaded.malformed}};
  }

  const DatasetStats raw_stats = dataset_stats(raw);
  // Synthetic corpora are generated at the requested size and not filtered.
  const std::vector<CheckIn> cleaned =
      f.synth ? raw : clean(raw, {f.min_user_checkins, f.min_poi_users});
  const DatasetStats clean_stats = dataset_stats(cleaned);
  auto built = build_corpus(cleaned, f.train_frac);
  for (const auto& w : built.warnings) err << "warning: " << w << '\n';
  const Corpus& corpus = built.corpus;
  if (corpus.users.empty()) throw PreconditionError("no user survives cleaning");

  std::size_t train_transitions = 0, cold = 0;
  for (const auto& u : corpus.users) {
    train_transitions += u.train_transitions();
    if (u.train_checkins() < f.cold_threshold) ++cold;
  }

  ensure_dir(f.out_dir);
  const fs::path dir(f.out_dir);
  save_corpus(corpus, dir / "corpus.bin");

  json stats = {{"source", source},
                {"raw", stats_json(raw_stats)},
                {"cleaned", stats_json(clean_stats)},
                {"cleaning",
                 {{"applied", !f.synth},
                  {"min_user_checkins", f.min_user_checkins},
                  {"min_poi_users", f.min_poi_users}}},
                {"corpus",
                 {{"users", corpus.users.size()},
                  {"vocab", corpus.vocab_size()},
                  {"train_frac", f.train_frac},
                  {"train_transitions", train_transitions},
                  {"test_instances", corpus.test_instances()},
                  {"cold_threshold", f.cold_threshold},
                  {"cold_users", cold},
                  {"hash", corpus_hash(corpus)}}},
                {"command", command_line(args)}};
  write_json(dir / "stats.json", stats);

  std::ostringstream txt;
  txt << std::setprecision(10);
  for (const auto& [name, s] : {std::pair{"raw", raw_stats}, std::pair{"cleaned", clean_stats}}) {
    txt << name << ".users\t" << s.users << '\n'
        << name << ".pois\t" << s.pois << '\n'
        << name << ".checkins\t" << s.checkins << '\n'
        << name << ".density\t" << s.density << '\n';
  }
  txt << "malformed_lines\t" << malformed << '\n'
      << "corpus.users\t" << corpus.users.size() << '\n'
      << "corpus.vocab\t" << corpus.vocab_size() << '\n'
      << "corpus.train_transitions\t" << train_transitions << '\n'
      << "corpus.test_instances\t" << corpus.test_instances() << '\n'
      << "corpus.cold_users\t" << cold << '\n'
      << "corpus.hash\t" << corpus_hash(corpus) << '\n';
  write_text(dir / "stats.txt", txt.str());
  out << txt.str();
  return kOk;
}

// ------------------------------------------------------------------ train

struct TrainFlags {
  std::string corpus;
  std::string out_dir;
  std::string resume;
  bool keep_checkpoints = false;
  bool quiet = false;
  ModelFlags model;
  OptimFlags optim;
};

GateAblation ablation_from_flags(const ModelFlags& f) {
  return {f.fix_t1, f.fix_t2, f.fix_d1, f.fix_d2};
}

struct TrainOutcome {
  TrainResult result;
  ModelConfig model;
};

// Trains into `dir`: config.json, train_log.tsv, checkpoint.bin (each epoch),
// model.bin (final). Throws TrainingDiverged after writing diverged_batch.tsv.
TrainOutcome train_run(const Corpus& corpus, const std::string& corpus_path, TrainConfig cfg,
                       const fs::path& dir, const std::optional<Checkpoint>& resume,
                       bool keep_checkpoints, const std::vector<std::string>& args,
                       std::ostream* progress) {
  ensure_dir(dir);
  cfg.model.vocab = corpus.vocab_size();
  if (resume) {
    if (resume->config.vocab != corpus.vocab_size()) {
      throw ConfigError("checkpoint vocabulary (" + std::to_string(resume->config.vocab) +
                        ") differs from corpus vocabulary (" +
                        std::to_string(corpus.vocab_size()) + ")");
    }
    cfg.model = resume->config;
    if (resume->optimizer) cfg.adam = resume->optimizer->hp;
  }

  json config = train_json(cfg);
  config["corpus"] = {{"path", corpus_path},
                      {"hash", corpus_hash(corpus)},
                      {"users", corpus.users.size()},
                      {"vocab", corpus.vocab_size()}};
  config["command"] = command_line(args);
  if (resume) config["resumed_from_epoch"] = resume->epoch;
  write_json(dir / "config.json", config);

  std::ofstream log(dir / "train_log.tsv", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / "train_log.tsv").string());
  if (!resume) log << "epoch\tloss\tsteps\tmax_grad_norm\tmax_constrained\n";
  log << std::setprecision(17);

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochStats& s, const ModelParams& p, const AdamState& adam) {
    log << s.epoch << '\t' << s.loss << '\t' << s.steps << '\t' << s.max_grad_norm << '\t'
        << s.max_constrained << '\n';
    log.flush();
    if (s.max_constrained > 0.0) {
      throw std::logic_error("constraint violated after epoch " + std::to_string(s.epoch));
    }
    const Checkpoint ck{cfg.model, p, adam, s.epoch};
    save_checkpoint(ck, dir / "checkpoint.bin");
    if (keep_checkpoints) {
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << s.epoch << ".bin";
      save_checkpoint(ck, dir / name.str());
    }
    if (progress) {
      *progress << "epoch " << s.epoch << "/" << cfg.epochs << "  loss " << std::setprecision(6)
                << s.loss << '\n';
    }
  };

  try {
    TrainOutcome o{train(corpus, cfg, hooks, resume), cfg.model};
    save_checkpoint({cfg.model, o.result.params, o.result.optimizer, o.result.epochs_completed},
                    dir / "model.bin");
    return o;
  } catch (const TrainingDiverged& e) {
    write_text(dir / "diverged_batch.tsv", e.diagnostics());
    throw;
  }
}

int cmd_train(const TrainFlags& f, const std::vector<std::string>& args, std::ostream& out,
              std::ostream& err) {
  const Corpus corpus = load_corpus(f.corpus);
  std::optional<Checkpoint> resume;
  if (!f.resume.empty()) resume = load_checkpoint(f.resume);
  const ModelConfig m = resume ? resume->config : model_config(f.model, ablation_from_flags(f.model));
  const TrainConfig cfg = train_config(m, f.optim);
  try {
    const auto o = train_run(corpus, f.corpus, cfg, f.out_dir, resume, f.keep_checkpoints, args,
                             f.quiet ? nullptr : &out);
    const auto& h = o.result.history;
    out << "trained " << to_string(o.model.variant) << " (" << ablation_name(o.model.ablation)
        << ") for " << o.result.epochs_completed << " epochs";
    if (!h.empty()) out << ", final loss " << std::setprecision(6) << h.back().loss;
    if (o.result.early_stopped) out << " (early stop)";
    out << "\nmodel written to " << (fs::path(f.out_dir) / "model.bin").string() << '\n';
    return kOk;
  } catch (const TrainingDiverged& e) {
    err << "error: training diverged: " << e.what() << "\nlast batch written to "
        << (fs::path(f.out_dir) / "diverged_batch.tsv").string() << '\n';
    return kDiverged;
  }
}

// ------------------------------------------------------------------- eval

struct EvalFlags {
  std::string checkpoint;
  std::string corpus;
  std::string out_dir;
  std::string cohort = "both";
  std::size_t cold_threshold = 5;
  std::vector<std::size_t> topk = kDefaultCutoffs;
  bool exclude_visited = false;
  bool ranks = false;
  unsigned threads = 1;
};

struct CohortOutcome {
  Cohort cohort;
  std::optional<MetricsReport> report;
  std::string error;  // set when the cohort had no instances
};

std::vector<CohortOutcome> evaluate_cohorts(const ModelParams& params, const ModelConfig& mc,
                                            const Corpus& corpus, const EvalFlags& f,
                                            const fs::path* rank_dir) {
  if (params.b_out.size() != corpus.vocab_size()) {
    throw ConfigError("checkpoint vocabulary (" + std::to_string(params.b_out.size()) +
                      ") differs from corpus vocabulary (" +
                      std::to_string(corpus.vocab_size()) + ")");
  }
  std::vector<Cohort> cohorts;
  if (f.cohort == "both") {
    cohorts = {Cohort::all, Cohort::cold};
  } else {
    cohorts = {parse_cohort(f.cohort)};
  }
  std::vector<CohortOutcome> outs;
  const ModelRecommender rec(params, mc);
  for (Cohort c : cohorts) {
    EvalConfig ec;
    ec.cohort = c;
    ec.cold_threshold = f.cold_threshold;
    ec.exclude_visited = f.exclude_visited;
    ec.cutoffs = f.topk;
    ec.threads = f.threads;
    std::size_t skipped = 0;
    const auto results = rank_test_instances(rec, corpus, ec, &skipped);
    CohortOutcome o{c, std::nullopt, {}};
    if (results.empty()) {
      try {
        evaluate(rec, corpus, ec);
      } catch (const MetricError& e) {
        // Only an explicitly requested cohort makes this fatal.
        if (f.cohort != "both") throw;
        o.error = e.what();
      }
    } else {
      o.report = summarize(results, ec);
      o.report->n_skipped = skipped;
      if (rank_dir) {
        std::ostringstream dump;
        write_rank_dump(results, corpus, dump);
        write_text(*rank_dir / ("ranks_" + std::string(to_string(c)) + ".tsv"), dump.str());
      }
    }
    outs.push_back(std::move(o));
  }
  return outs;
}

int cmd_eval(const EvalFlags& f, const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err) {
  const Checkpoint ck = load_checkpoint(f.checkpoint);
  const Corpus corpus = load_corpus(f.corpus);
  ModelConfig mc = ck.config;
  mc.exclude_visited = f.exclude_visited;
  ensure_dir(f.out_dir);
  const fs::path dir(f.out_dir);
  const auto outs = evaluate_cohorts(ck.params, mc, corpus, f, f.ranks ? &dir : nullptr);

  std::ostringstream txt;
  txt << std::setprecision(10);
  json records = json::array();
  for (const auto& o : outs) {
    json rec = {{"cohort", to_string(o.cohort)},
                {"variant", to_string(mc.variant)},
                {"ablation", ablation_name(mc.ablation)},
                {"exclude_visited", f.exclude_visited},
                {"cold_threshold", f.cold_threshold}};
    if (o.report) {
      write_metrics_text(*o.report, txt);
      rec["metrics"] = metrics_to_json(*o.report);
    } else {
      err << "warning: " << o.error << '\n';
      txt << to_string(o.cohort) << ".instances\t0\n";
      rec["metrics"] = nullptr;
      rec["error"] = o.error;
    }
    records.push_back(rec);
  }
  write_text(dir / "metrics.txt", txt.str());
  write_json(dir / "metrics.json", {{"checkpoint", f.checkpoint},
                                    {"corpus", f.corpus},
                                    {"corpus_hash", corpus_hash(corpus)},
                                    {"epoch", ck.epoch},
                                    {"command", command_line(args)},
                                    {"records", records}});
  out << txt.str();
  return kOk;
}

// ------------------------------------------------------------------- grid

struct GridFlags {
  std::string corpus;
  std::string out_dir;
  std::vector<std::string> variants = kVariantNames;
  std::vector<std::string> ablations = {"none"};
  std::vector<std::size_t> cell_sizes = {128};
  std::vector<std::size_t> batch_sizes = {10};
  std::vector<std::uint64_t> seeds = {1};
  std::size_t cold_threshold = 5;
  bool exclude_visited = false;
  unsigned jobs = 1;
  ModelFlags model;
  OptimFlags optim;
};

struct Leg {
  std::string name;
  std::string variant;
  std::string ablation;
  std::size_t cell_size = 0;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double final_loss = std::nan("");
  std::optional<MetricsReport> all, cold;
};

void run_leg(Leg& leg, const Corpus& corpus, const GridFlags& f,
             const std::vector<std::string>& args) {
  ModelFlags mf = f.model;
  mf.variant = leg.variant;
  mf.cell_size = leg.cell_size;
  OptimFlags of = f.optim;
  of.batch_size = leg.batch_size;
  of.seed = leg.seed;
  const ModelConfig m = model_config(mf, parse_ablation(leg.ablation));
  const fs::path dir = fs::path(f.out_dir) / "legs" / leg.name;
  const auto o =
      train_run(corpus, f.corpus, train_config(m, of), dir, std::nullopt, false, args, nullptr);
  if (!o.result.history.empty()) leg.final_loss = o.result.history.back().loss;

  EvalFlags ef;
  ef.cohort = "both";
  ef.cold_threshold = f.cold_threshold;
  ef.exclude_visited = f.exclude_visited;
  ModelConfig mc = o.model;
  mc.exclude_visited = f.exclude_visited;
  const auto outs = evaluate_cohorts(o.result.params, mc, corpus, ef, nullptr);
  json records = json::array();
  for (const auto& c : outs) {
    (c.cohort == Cohort::all ? leg.all : leg.cold) = c.report;
    records.push_back({{"cohort", to_string(c.cohort)},
                       {"metrics", c.report ? metrics_to_json(*c.report) : json(nullptr)}});
  }
  if (!leg.all) throw MetricError("no test instances in the corpus");
  write_json(dir / "metrics.json", {{"records", records}});
  leg.ok = true;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << std::fixed << v;
  return s.str();
}

int cmd_grid(const GridFlags& f, const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err) {
  const Corpus corpus = load_corpus(f.corpus);
  for (const auto& a : f.ablations) parse_ablation(a);
  ensure_dir(f.out_dir);

  std::vector<Leg> legs;
  for (const auto& v : f.variants) {
    for (const auto& a : f.ablations) {
      // Gate ablations only exist for the spatio-temporal cells.
      if (v == "lstm" && a != "none") continue;
      for (std::size_t c : f.cell_sizes) {
        for (std::size_t b : f.batch_sizes) {
          for (std::uint64_t s : f.seeds) {
            Leg leg;
            leg.variant = v;
            leg.ablation = a;
            leg.cell_size = c;
            leg.batch_size = b;
            leg.seed = s;
            leg.name = v + "_" + a + "_c" + std::to_string(c) + "_b" + std::to_string(b) + "_s" +
                       std::to_string(s);
            legs.push_back(std::move(leg));
          }
        }
      }
    }
  }

  std::mutex io;
  std::size_t done = 0;
  auto work = [&](Leg& leg) {
    try {
      run_leg(leg, corpus, f, args);
    } catch (const std::exception& e) {
      leg.ok = false;
      leg.error = e.what();
    }
    std::lock_guard lock(io);
    ++done;
    out << "[" << done << "/" << legs.size() << "] " << leg.name << ": "
        << (leg.ok ? "acc@1 " + fmt(leg.all->acc_at(1)) : "FAILED (" + leg.error + ")") << '\n';
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(f.jobs, legs.size()));
  if (jobs == 1) {
    for (auto& leg : legs) work(leg);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < jobs; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < legs.size(); k += jobs) work(legs[k]);
      });
    }
  }

  std::vector<const Leg*> order;
  for (const auto& l : legs) order.push_back(&l);
  std::stable_sort(order.begin(), order.end(), [](const Leg* a, const Leg* b) {
    if (a->ok != b->ok) return a->ok;
    if (!a->ok) return false;
    const double a1 = a->all->acc_at(1), b1 = b->all->acc_at(1);
    if (a1 != b1) return a1 > b1;
    return a->all->map > b->all->map;
  });

  const std::vector<std::size_t> cuts = kDefaultCutoffs;
  std::ostringstream tsv;
  tsv << "rank\tvariant\tablation\tcell_size\tbatch_size\tseed\tstatus";
  for (std::size_t k : cuts) tsv << "\tacc@" << k;
  tsv << "\tmap\tcold.acc@1\tcold.acc@10\tcold.map\tfinal_loss\n";
  json rows = json::array();
  std::size_t rank = 0;
  for (const Leg* l : order) {
    ++rank;
    tsv << rank << '\t' << l->variant << '\t' << l->ablation << '\t' << l->cell_size << '\t'
        << l->batch_size << '\t' << l->seed << '\t' << (l->ok ? "ok" : "failed");
    json row = {{"rank", rank},
                {"leg", l->name},
                {"variant", l->variant},
                {"ablation", l->ablation},
                {"cell_size", l->cell_size},
                {"batch_size", l->batch_size},
                {"seed", l->seed},
                {"status", l->ok ? "ok" : "failed"}};
    if (l->ok) {
      for (std::size_t k : cuts) tsv << '\t' << fmt(l->all->acc_at(k));
      tsv << '\t' << fmt(l->all->map);
      if (l->cold) {
        tsv << '\t' << fmt(l->cold->acc_at(1)) << '\t' << fmt(l->cold->acc_at(10)) << '\t'
            << fmt(l->cold->map);
      } else {
        tsv << "\tNA\tNA\tNA";
      }
      tsv << '\t' << fmt(l->final_loss) << '\n';
      row["all"] = metrics_to_json(*l->all);
      row["cold"] = l->cold ? metrics_to_json(*l->cold) : json(nullptr);
      row["final_loss"] = l->final_loss;
    } else {
      for (std::size_t k = 0; k < cuts.size() + 5; ++k) tsv << "\tNA";
      tsv << '\n';
      row["error"] = l->error;
    }
    rows.push_back(row);
  }
  const fs::path dir(f.out_dir);
  write_text(dir / "grid.tsv", tsv.str());
  write_json(dir / "grid.json", {{"corpus", f.corpus},
                                 {"corpus_hash", corpus_hash(corpus)},
                                 {"command", command_line(args)},
                                 {"rows", rows}});
  out << tsv.str();

  const auto failed = std::count_if(legs.begin(), legs.end(), [](const Leg& l) { return !l.ok; });
  if (failed > 0) {
    err << "error: " << failed << " of " << legs.size() << " legs failed\n";
    return kFailure;
  }
  return kOk;
}

// -------------------------------------------------------------- gradcheck

struct GradcheckFlags {
  std::vector<std::string> variants = kVariantNames;
  std::vector<std::string> ablations = {"none"};
  std::size_t embed_size = 3;
  std::size_t cell_size = 4;
  std::size_t vocab = 6;
  std::size_t length = 5;
  std::size_t bptt_cap = 0;
  std::uint64_t seed = 1;
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t samples = 0;
};

int cmd_gradcheck(const GradcheckFlags& f, std::ostream& out) {
  bool all_ok = true;
  std::size_t case_no = 0;
  for (const auto& vname : f.variants) {
    for (const auto& aname : f.ablations) {
      const Variant v = parse_variant(vname);
      const GateAblation ab = parse_ablation(aname);
      if (v == Variant::lstm && ab.any()) continue;
      ModelConfig cfg;
      cfg.variant = v;
      cfg.n_i = f.embed_size;
      cfg.n_c = f.cell_size;
      cfg.vocab = f.vocab;
      cfg.ablation = ab;
      cfg.bptt_cap = f.bptt_cap;
      const std::uint64_t seed = mix_seed(f.seed, case_no++);
      ModelParams p = ModelParams::initialized(cfg, seed);
      // Non-zero biases so every gate path is exercised.
      Rng rng(mix_seed(seed, 1));
      for (auto& t : p.tensors()) {
        if (t.name == "b_out" || t.name.starts_with("cell.b_")) {
          for (double& x : t.values) x = rng.uniform(-0.5, 0.5);
        }
      }
      std::vector<TransitionTriple> seq;
      std::vector<std::uint32_t> targets;
      for (std::size_t k = 0; k < f.length; ++k) {
        seq.push_back({static_cast<std::uint32_t>(rng.index(f.vocab)), rng.uniform(0.0, 3.0),
                       rng.uniform(0.0, 3.0)});
        targets.push_back(static_cast<std::uint32_t>(rng.index(f.vocab)));
      }
      // Truncation changes the gradient, not the loss, so the oracle only
      // agrees with the untruncated backward pass.
      ModelConfig plain = cfg;
      plain.bptt_cap = 0;
      const auto lg = loss_and_grads(p, seq, targets, plain);
      FdCheckOptions opts;
      opts.eps = f.eps;
      opts.tol = f.tol;
      opts.max_coords_per_tensor = f.samples;
      opts.seed = seed;
      const auto r = fd_check([&] { return sequence_loss(p, seq, targets, plain); }, p.tensors(),
                              std::as_const(lg.grads).tensors(), opts);
      all_ok = all_ok && r.passed;
      out << std::left << std::setw(9) << vname << ' ' << std::setw(16) << aname
          << " max_rel_err " << std::scientific << std::setprecision(3) << r.max_rel_error
          << std::defaultfloat << "  worst " << r.worst_tensor << "[" << r.worst_index << "]"
          << "  coords " << r.checked << "  " << (r.passed ? "PASS" : "FAIL") << '\n';
    }
  }
  out << (all_ok ? "all gradient checks passed" : "gradient check FAILED") << '\n';
  return all_ok ? kOk : kFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spatio-temporal LSTM next-POI recommendation experiments", "stpoi"};
  app.require_subcommand(1);
  // A repeated flag overrides the earlier value, so scripts can append.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  PrepareFlags pf;
  auto* prepare = app.add_subcommand("prepare", "Build a corpus cache from check-ins or a synthetic generator");
  prepare->add_option("--input", pf.input, "Check-in file");
  prepare->add_option("--format", pf.format, "Input format")
      ->check(CLI::IsMember({"snap", "csv"}))
      ->capture_default_str();
  prepare->add_flag("--synth", pf.synth, "Generate a synthetic corpus");
  prepare->add_option("--pattern", pf.pattern, "Synthetic pattern")
      ->check(CLI::IsMember({"periodic", "interval"}))
      ->capture_default_str();
  prepare->add_option("--users", pf.users, "Synthetic users")->capture_default_str();
  prepare->add_option("--pois", pf.pois, "Synthetic POIs")->capture_default_str();
  prepare->add_option("--cycle", pf.cycle, "Synthetic cycle length")->capture_default_str();
  prepare->add_option("--checkins-per-user", pf.checkins_per_user, "Synthetic check-ins per user")
      ->capture_default_str();
  prepare->add_option("--jump-prob", pf.jump_prob, "Periodic pattern: far-jump probability")
      ->capture_default_str();
  prepare->add_option("--seed", pf.seed, "Synthetic seed")->capture_default_str();
  prepare->add_option("--min-user-checkins", pf.min_user_checkins, "Cleaning: minimum check-ins per user")
      ->capture_default_str();
  prepare->add_option("--min-poi-users", pf.min_poi_users, "Cleaning: minimum distinct users per POI")
      ->capture_default_str();
  prepare->add_option("--train-frac", pf.train_frac, "Chronological training fraction")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  prepare->add_option("--cold-threshold", pf.cold_threshold, "Reported cold-user threshold")
      ->capture_default_str();
  prepare->add_option("--out-dir", pf.out_dir, "Output directory")->required();

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a corpus cache");
  train_cmd->add_option("--corpus", tf.corpus, "Corpus cache")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out-dir", tf.out_dir, "Run directory")->required();
  train_cmd->add_option("--resume", tf.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_flag("--keep-checkpoints", tf.keep_checkpoints, "Keep one checkpoint per epoch");
  train_cmd->add_flag("--quiet", tf.quiet, "No per-epoch progress");
  add_model_flags(train_cmd, tf.model, true);
  add_optim_flags(train_cmd, tf.optim, true);

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "Rank test check-ins with a trained model");
  eval_cmd->add_option("--checkpoint", ef.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--corpus", ef.corpus, "Corpus cache")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out-dir", ef.out_dir, "Output directory")->required();
  eval_cmd->add_option("--cohort", ef.cohort, "all, cold or both")
      ->check(CLI::IsMember({"all", "cold", "both"}))
      ->capture_default_str();
  eval_cmd->add_option("--cold-threshold", ef.cold_threshold, "Cold users have fewer training check-ins")
      ->capture_default_str();
  eval_cmd->add_option("--topk", ef.topk, "Acc@K cutoffs")->delimiter(',')->capture_default_str();
  eval_cmd->add_flag("--exclude-visited", ef.exclude_visited, "Rank only POIs absent from the history");
  eval_cmd->add_flag("--ranks", ef.ranks, "Write per-instance ranks");
  eval_cmd->add_option("--threads", ef.threads, "Worker threads")->check(CLI::PositiveNumber);

  GridFlags gf;
  auto* grid = app.add_subcommand("grid", "Train and evaluate a cross product of configurations");
  grid->add_option("--corpus", gf.corpus, "Corpus cache")->required()->check(CLI::ExistingFile);
  grid->add_option("--out-dir", gf.out_dir, "Output directory")->required();
  grid->add_option("--variants", gf.variants, "Cell variants")
      ->delimiter(',')
      ->check(CLI::IsMember(kVariantNames))
      ->capture_default_str();
  grid->add_option("--ablations", gf.ablations, "Gate ablations (lstm legs use none only)")
      ->delimiter(',')
      ->capture_default_str();
  grid->add_option("--cell-sizes", gf.cell_sizes, "Cell sizes")->delimiter(',')->capture_default_str();
  grid->add_option("--batch-sizes", gf.batch_sizes, "Batch sizes")->delimiter(',')->capture_default_str();
  grid->add_option("--seeds", gf.seeds, "Seeds")->delimiter(',')->capture_default_str();
  grid->add_option("--cold-threshold", gf.cold_threshold, "Cold-user threshold")->capture_default_str();
  grid->add_flag("--exclude-visited", gf.exclude_visited, "Rank only POIs absent from the history");
  grid->add_option("--jobs", gf.jobs, "Legs trained concurrently")->check(CLI::PositiveNumber);
  add_model_flags(grid, gf.model, false);
  add_optim_flags(grid, gf.optim, false);

  GradcheckFlags cf;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the model gradients");
  gradcheck->add_option("--variants", cf.variants, "Cell variants")
      ->delimiter(',')
      ->check(CLI::IsMember(kVariantNames))
      ->capture_default_str();
  gradcheck->add_option("--ablations", cf.ablations, "Gate ablations")->delimiter(',')->capture_default_str();
  gradcheck->add_option("--embed-size", cf.embed_size, "Embedding size")->capture_default_str();
  gradcheck->add_option("--cell-size", cf.cell_size, "Cell size")->capture_default_str();
  gradcheck->add_option("--vocab", cf.vocab, "POIs")->capture_default_str();
  gradcheck->add_option("--length", cf.length, "Sequence length")->capture_default_str();
  gradcheck->add_option("--seed", cf.seed, "Seed")->capture_default_str();
  gradcheck->add_option("--eps", cf.eps, "Finite-difference step")->capture_default_str();
  gradcheck->add_option("--tol", cf.tol, "Relative-error tolerance")->capture_default_str();
  gradcheck->add_option("--samples", cf.samples, "Coordinates per tensor (0: all)")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (*prepare) return cmd_prepare(pf, args, out, err);
    if (*train_cmd) return cmd_train(tf, args, out, err);
    if (*eval_cmd) return cmd_eval(ef, args, out, err);
    if (*grid) return cmd_grid(gf, args, out, err);
    if (*gradcheck) return cmd_gradcheck(cf, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace stpoi::cli
