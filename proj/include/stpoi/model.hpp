#pragma once

// Next-POI network: embedding lookup -> recurrent cell over a user's
// transition triples -> softmax(W_out h_t + b_out) over every POI.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "stpoi/cells.hpp"
#include "stpoi/data.hpp"
#include "stpoi/numkit.hpp"

namespace stpoi {

// Optional preprocessing of the raw intervals before they reach the cell.
struct IntervalScaling {
  bool clip = false;
  double max_dt_hours = 24.0 * 30.0;
  double max_dd_km = 100.0;
  bool log1p = false;  // applied after clipping

  bool operator==(const IntervalScaling&) const = default;
};

struct ModelConfig {
  Variant variant = Variant::st_clstm;
  std::size_t n_i = 128;  // embedding size
  std::size_t n_c = 128;  // cell / hidden size
  std::size_t vocab = 0;
  GateAblation ablation;
  // Truncated BPTT window in steps; 0 backpropagates through the whole
  // sequence. Gradients never cross a window boundary.
  std::size_t bptt_cap = 0;
  ConstraintTarget constraint_target = ConstraintTarget::interval_weights;
  IntervalScaling intervals;
  bool exclude_visited = false;  // for predict_topk

  bool operator==(const ModelConfig&) const = default;
};

struct ModelParams {
  Matrix embedding;  // vocab x n_i
  CellParams cell;
  Matrix w_out;      // vocab x n_c
  Vector b_out;      // vocab

  static ModelParams zeros(const ModelConfig& cfg);
  static ModelParams initialized(const ModelConfig& cfg, std::uint64_t seed);

  // Names: "embedding", "cell.<name>", "w_out", "b_out".
  std::vector<TensorRef> tensors();
  std::vector<ConstTensorRef> tensors() const;
  void set_zero();
  void add(const ModelParams& other);
  void scale(double factor);

  bool operator==(const ModelParams&) const = default;
};

// Fully qualified names of the constrained tensors for this config.
std::vector<std::string> constrained_model_tensors(const ModelConfig& cfg);

StepInput model_step_input(const ModelParams& p, const ModelConfig& cfg,
                           const TransitionTriple& triple);

struct ModelStep {
  CellState state;
  StepCache cache;
  Vector logits;
};

ModelStep model_step(const ModelParams& p, const ModelConfig& cfg, const TransitionTriple& triple,
                     const CellState& prev);

struct SequenceForward {
  std::vector<Vector> logits;  // one per step
  CellState final_state;
  std::vector<StepCache> caches;
};

// Runs from a zero state over the whole sequence.
SequenceForward forward_sequence(const ModelParams& p, std::span<const TransitionTriple> seq,
                                 const ModelConfig& cfg);

// Adds the gradient of `scale * (sum of per-step cross-entropies)` to
// `grads` and returns the unscaled sum of losses.
double accumulate_loss_gradients(const ModelParams& p, std::span<const TransitionTriple> seq,
                                 std::span<const std::uint32_t> targets,
                                 const ModelConfig& cfg, ModelParams& grads,
                                 double scale = 1.0);

struct LossAndGrads {
  double loss = 0.0;  // mean per-step cross-entropy
  ModelParams grads;  // gradient of the mean
};

LossAndGrads loss_and_grads(const ModelParams& p, std::span<const TransitionTriple> seq,
                            std::span<const std::uint32_t> targets, const ModelConfig& cfg);

// Mean per-step cross-entropy without gradients.
double sequence_loss(const ModelParams& p, std::span<const TransitionTriple> seq,
                     std::span<const std::uint32_t> targets, const ModelConfig& cfg);

// Ranks every POI by final-step logit (descending, ties by ascending id)
// and returns the first k. With cfg.exclude_visited, POIs in the history are
// left out.
std::vector<std::uint32_t> predict_topk(const ModelParams& p,
                                        std::span<const TransitionTriple> history, std::size_t k,
                                        const ModelConfig& cfg);

// Input/target views of a user's training split.
std::vector<std::uint32_t> next_poi_targets(std::span<const TransitionTriple> records);

}  // namespace stpoi
