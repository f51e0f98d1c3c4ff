#include "stpoi/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <utility>
#include <sstream>
#include <thread>

#include "stpoi/errors.hpp"

namespace stpoi {

namespace {

struct SequenceJob {
  std::span<const TransitionTriple> inputs;
  std::vector<std::uint32_t> targets;
};

SequenceJob make_job(const UserSequence& user) {
  const auto records = user.train();
  return {records.first(records.size() - 1), next_poi_targets(records)};
}

std::string describe_batch(const Corpus& corpus, std::span<const std::size_t> batch,
                           std::span<const double> losses) {
  std::ostringstream out;
  out << "user\ttransitions\tloss\n";
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto& u = corpus.users[batch[k]];
    out << u.user << '\t' << u.train_transitions() << '\t' << losses[k] << '\n';
  }
  return out.str();
}

}  // namespace

TrainResult train(const Corpus& corpus, TrainConfig cfg, const TrainHooks& hooks,
                  const std::optional<Checkpoint>& resume) {
  if (cfg.model.vocab == 0) cfg.model.vocab = corpus.vocab_size();
  if (cfg.model.vocab != corpus.vocab_size()) {
    throw ConfigError("model vocabulary " + std::to_string(cfg.model.vocab) +
                      " does not match corpus vocabulary " +
                      std::to_string(corpus.vocab_size()));
  }
  if (cfg.batch_size == 0) throw PreconditionError("batch size must be positive");

  std::vector<std::size_t> trainable;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    if (corpus.users[u].train_transitions() > 0) trainable.push_back(u);
  }
  if (trainable.empty()) throw PreconditionError("corpus has no training transitions");

  TrainResult r;
  std::size_t start_epoch = 0;
  if (resume) {
    if (!(resume->config == cfg.model)) {
      throw ConfigError("resume checkpoint was trained with a different model configuration");
    }
    r.params = resume->params;
    start_epoch = resume->epoch;
    r.optimizer = resume->optimizer ? *resume->optimizer
                                    : AdamState::for_params(std::as_const(r.params).tensors(), cfg.adam);
  } else {
    r.params = ModelParams::initialized(cfg.model, cfg.seed);
    r.optimizer = AdamState::for_params(std::as_const(r.params).tensors(), cfg.adam);
  }
  r.epochs_completed = start_epoch;

  const ConstraintSet constraints{constrained_model_tensors(cfg.model)};
  const auto job_of = [&](std::size_t u) { return make_job(corpus.users[u]); };

  ModelParams batch_grads = ModelParams::zeros(cfg.model);
  std::vector<ModelParams> seq_grads(std::min(cfg.batch_size, trainable.size()),
                                     ModelParams::zeros(cfg.model));
  std::vector<double> seq_losses(seq_grads.size());

  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::size_t step = static_cast<std::size_t>(r.optimizer.t);

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = trainable;
    Rng shuffler(mix_seed(cfg.seed, epoch));
    shuffler.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t epoch_terms = 0;
    double max_norm = 0.0;

    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + begin, end - begin);

      auto run_one = [&](std::size_t k) {
        const SequenceJob job = job_of(batch[k]);
        seq_grads[k].set_zero();
        try {
          seq_losses[k] = accumulate_loss_gradients(r.params, job.inputs, job.targets, cfg.model,
                                                    seq_grads[k]);
        } catch (const NumericError&) {
          // Overflowed activations; reported below as a diverged batch.
          seq_losses[k] = std::numeric_limits<double>::quiet_NaN();
        }
      };
      const unsigned workers =
          std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(batch.size())));
      if (workers == 1) {
        for (std::size_t k = 0; k < batch.size(); ++k) run_one(k);
      } else {
        std::vector<std::exception_ptr> errors(workers);
        {
          std::vector<std::jthread> pool;
          for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
              try {
                for (std::size_t k = w; k < batch.size(); k += workers) run_one(k);
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

      std::size_t terms = 0;
      double batch_loss = 0.0;
      batch_grads.set_zero();
      for (std::size_t k = 0; k < batch.size(); ++k) {
        terms += corpus.users[batch[k]].train_transitions();
        batch_loss += seq_losses[k];
        batch_grads.add(seq_grads[k]);
      }
      batch_grads.scale(1.0 / static_cast<double>(terms));

      bool finite = std::isfinite(batch_loss);
      for (const auto& t : batch_grads.tensors()) finite = finite && all_finite(t.values);
      if (!finite) {
        throw TrainingDiverged("non-finite loss in epoch " + std::to_string(epoch + 1) +
                                   " at optimizer step " + std::to_string(step + 1),
                               describe_batch(corpus, batch, seq_losses));
      }

      const auto grad_refs = batch_grads.tensors();
      double norm = 0.0;
      if (cfg.clip_norm > 0.0) {
        norm = clip_global_norm(grad_refs, cfg.clip_norm);
      } else {
        for (const auto& t : grad_refs) norm += squared_norm(t.values);
        norm = std::sqrt(norm);
      }
      max_norm = std::max(max_norm, norm);

      const auto params = r.params.tensors();
      adam_step(params, std::as_const(batch_grads).tensors(), r.optimizer);
      project(params, constraints);
      ++step;
      if (!constraints.names.empty() &&
          max_constrained_entry(std::as_const(r.params).tensors(), constraints) > 0.0) {
        throw std::logic_error("projection left a constrained weight positive");
      }
      if (hooks.on_step) hooks.on_step(step, r.params);

      epoch_loss += batch_loss;
      epoch_terms += terms;
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.loss = epoch_loss / static_cast<double>(epoch_terms);
    stats.steps = step;
    stats.max_grad_norm = max_norm;
    stats.max_constrained =
        constraints.names.empty()
            ? 0.0
            : max_constrained_entry(std::as_const(r.params).tensors(), constraints);
    r.history.push_back(stats);
    r.epochs_completed = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(stats, r.params, r.optimizer);

    if (cfg.early_stop.enabled) {
      if (best_loss - stats.loss > cfg.early_stop.rel_tol * std::abs(best_loss) ||
          !std::isfinite(best_loss)) {
        best_loss = stats.loss;
        since_best = 0;
      } else if (++since_best >= cfg.early_stop.patience) {
        r.early_stopped = true;
        break;
      }
    }
  }
  return r;
}

}  // namespace stpoi
