#pragma once

// Mini-batch BPTT training over per-user sequences.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stpoi/checkpoint.hpp"
#include "stpoi/data.hpp"
#include "stpoi/model.hpp"
#include "stpoi/optim.hpp"

namespace stpoi {

struct EarlyStop {
  bool enabled = false;
  std::size_t patience = 10;
  double rel_tol = 1e-4;  // minimum relative improvement of the epoch loss
};

struct TrainConfig {
  ModelConfig model;
  AdamConfig adam;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::size_t epochs = 100;
  std::size_t batch_size = 10;  // user sequences per optimizer step
  std::uint64_t seed = 1;
  EarlyStop early_stop;
  // Worker threads for per-sequence gradients. The reduction order is fixed,
  // so results do not depend on this value.
  unsigned threads = 1;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean per-step cross-entropy over the epoch
  std::size_t steps = 0;  // optimizer steps taken so far
  double max_grad_norm = 0.0;
  double max_constrained = 0.0;  // largest constrained entry after the epoch
};

struct TrainHooks {
  // After every optimizer step (post-projection).
  std::function<void(std::size_t step, const ModelParams&)> on_step;
  std::function<void(const EpochStats&, const ModelParams&, const AdamState&)> on_epoch;
};

struct TrainResult {
  ModelParams params;
  AdamState optimizer;
  std::vector<EpochStats> history;
  std::size_t epochs_completed = 0;
  bool early_stopped = false;
};

// Raised when a batch produces a non-finite loss or gradient.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::string diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}
  const std::string& diagnostics() const { return diagnostics_; }

 private:
  std::string diagnostics_;
};

// cfg.model.vocab is taken from the corpus when zero and must match it
// otherwise. With `resume`, training continues from the checkpoint's
// parameters, optimizer state and epoch.
TrainResult train(const Corpus& corpus, TrainConfig cfg, const TrainHooks& hooks = {},
                  const std::optional<Checkpoint>& resume = std::nullopt);

}  // namespace stpoi
