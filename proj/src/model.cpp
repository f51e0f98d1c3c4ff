#include "stpoi/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_set>

#include "stpoi/errors.hpp"

namespace stpoi {

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
  if (cfg.vocab == 0) throw PreconditionError("model vocabulary must be non-empty");
  ModelParams p;
  p.embedding = Matrix(cfg.vocab, cfg.n_i);
  p.cell = CellParams::zeros(cfg.variant, cfg.n_i, cfg.n_c);
  p.w_out = Matrix(cfg.vocab, cfg.n_c);
  p.b_out = Vector(cfg.vocab);
  return p;
}

ModelParams ModelParams::initialized(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.vocab == 0) throw PreconditionError("model vocabulary must be non-empty");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.n_c));
  ModelParams p;
  p.embedding = Matrix(cfg.vocab, cfg.n_i);
  for (double& v : p.embedding.data) v = rng.uniform(-bound, bound);
  p.cell = CellParams::initialized(cfg.variant, cfg.n_i, cfg.n_c, cfg.constraint_target, rng);
  p.w_out = Matrix(cfg.vocab, cfg.n_c);
  for (double& v : p.w_out.data) v = rng.uniform(-bound, bound);
  p.b_out = Vector(cfg.vocab);
  return p;
}

namespace {

template <typename Self, typename Ref>
std::vector<Ref> model_tensors(Self& p) {
  std::vector<Ref> out;
  out.push_back(tensor_ref("embedding", p.embedding));
  for (auto& t : p.cell.tensors()) {
    t.name = "cell." + t.name;
    out.push_back(std::move(t));
  }
  out.push_back(tensor_ref("w_out", p.w_out));
  out.push_back(tensor_ref("b_out", p.b_out));
  return out;
}

}  // namespace

std::vector<TensorRef> ModelParams::tensors() {
  return model_tensors<ModelParams, TensorRef>(*this);
}

std::vector<ConstTensorRef> ModelParams::tensors() const {
  return model_tensors<const ModelParams, ConstTensorRef>(*this);
}

void ModelParams::set_zero() {
  for (auto& t : tensors()) std::fill(t.values.begin(), t.values.end(), 0.0);
}

void ModelParams::add(const ModelParams& other) {
  auto mine = tensors();
  const auto theirs = other.tensors();
  if (mine.size() != theirs.size()) throw DimensionError("ModelParams::add: layout mismatch");
  for (std::size_t k = 0; k < mine.size(); ++k) axpy(1.0, theirs[k].values, mine[k].values);
}

void ModelParams::scale(double factor) {
  for (auto& t : tensors()) {
    for (double& v : t.values) v *= factor;
  }
}

std::vector<std::string> constrained_model_tensors(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (const auto& n : constrained_tensor_names(cfg.variant, cfg.constraint_target)) {
    names.push_back("cell." + n);
  }
  return names;
}

StepInput model_step_input(const ModelParams& p, const ModelConfig& cfg,
                           const TransitionTriple& triple) {
  if (triple.poi >= p.embedding.rows) {
    throw IndexError("POI id " + std::to_string(triple.poi) + " outside vocabulary of " +
                     std::to_string(p.embedding.rows));
  }
  StepInput in;
  const auto row = p.embedding.row(triple.poi);
  in.x.data.assign(row.begin(), row.end());
  in.dt = triple.dt;
  in.dd = triple.dd;
  const auto& s = cfg.intervals;
  if (s.clip) {
    in.dt = std::min(in.dt, s.max_dt_hours);
    in.dd = std::min(in.dd, s.max_dd_km);
  }
  if (s.log1p) {
    in.dt = std::log1p(in.dt);
    in.dd = std::log1p(in.dd);
  }
  return in;
}

ModelStep model_step(const ModelParams& p, const ModelConfig& cfg, const TransitionTriple& triple,
                     const CellState& prev) {
  auto [state, cache] = cell_forward(p.cell, model_step_input(p, cfg, triple), prev, cfg.ablation);
  ModelStep out{std::move(state), std::move(cache), p.b_out};
  gemv_acc(p.w_out, out.state.h.span(), out.logits.span());
  return out;
}

SequenceForward forward_sequence(const ModelParams& p, std::span<const TransitionTriple> seq,
                                 const ModelConfig& cfg) {
  if (seq.empty()) throw PreconditionError("forward_sequence: empty sequence");
  SequenceForward out;
  out.logits.reserve(seq.size());
  out.caches.reserve(seq.size());
  CellState state = CellState::zeros(p.cell.n_c);
  for (const auto& triple : seq) {
    ModelStep step = model_step(p, cfg, triple, state);
    state = std::move(step.state);
    out.logits.push_back(std::move(step.logits));
    out.caches.push_back(std::move(step.cache));
  }
  out.final_state = std::move(state);
  return out;
}

namespace {

void check_targets(std::span<const TransitionTriple> seq, std::span<const std::uint32_t> targets) {
  if (seq.empty()) throw PreconditionError("empty training sequence");
  if (targets.size() != seq.size()) {
    throw DimensionError("got " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(seq.size()) + " steps");
  }
}

void check_grad_buffer(const ModelParams& p, const ModelParams& grads) {
  if (grads.embedding.rows != p.embedding.rows || grads.embedding.cols != p.embedding.cols ||
      grads.w_out.rows != p.w_out.rows || grads.w_out.cols != p.w_out.cols ||
      grads.b_out.size() != p.b_out.size() || grads.cell.variant != p.cell.variant ||
      grads.cell.n_i != p.cell.n_i || grads.cell.n_c != p.cell.n_c) {
    throw DimensionError("gradient buffer does not match model parameters");
  }
}

}  // namespace

double accumulate_loss_gradients(const ModelParams& p, std::span<const TransitionTriple> seq,
                                 std::span<const std::uint32_t> targets,
                                 const ModelConfig& cfg, ModelParams& grads, double scale) {
  check_targets(seq, targets);
  check_grad_buffer(p, grads);
  const SequenceForward fwd = forward_sequence(p, seq, cfg);
  const std::size_t n = p.cell.n_c;

  double loss = 0.0;
  Vector dh_next(n), dc_next(n);
  for (std::size_t t = seq.size(); t-- > 0;) {
    if (cfg.bptt_cap > 0 && (t + 1) % cfg.bptt_cap == 0) {
      dh_next.fill(0.0);
      dc_next.fill(0.0);
    }
    auto xent = softmax_xent(fwd.logits[t], targets[t]);
    loss += xent.loss;
    for (double& g : xent.grad.data) g *= scale;

    const Vector& h = t + 1 < seq.size() ? fwd.caches[t + 1].z : fwd.final_state.h;
    // h_t is the first n entries of the next step's z.
    const std::span<const double> h_t(h.data.data(), n);
    outer_acc(grads.w_out, xent.grad.span(), h_t);
    axpy(1.0, xent.grad.span(), grads.b_out.span());
    Vector dh = dh_next;
    gemv_t_acc(p.w_out, xent.grad.span(), dh.span());

    const StepGrads sg = cell_backward(p.cell, fwd.caches[t], dh, dc_next, grads.cell);
    axpy(1.0, sg.x.span(), grads.embedding.row(seq[t].poi));
    dh_next = sg.h_prev;
    dc_next = sg.c_prev;
  }
  return loss;
}

LossAndGrads loss_and_grads(const ModelParams& p, std::span<const TransitionTriple> seq,
                            std::span<const std::uint32_t> targets, const ModelConfig& cfg) {
  check_targets(seq, targets);
  LossAndGrads r;
  r.grads = ModelParams::zeros(cfg);
  const double inv = 1.0 / static_cast<double>(seq.size());
  r.loss = accumulate_loss_gradients(p, seq, targets, cfg, r.grads, inv) * inv;
  return r;
}

double sequence_loss(const ModelParams& p, std::span<const TransitionTriple> seq,
                     std::span<const std::uint32_t> targets, const ModelConfig& cfg) {
  check_targets(seq, targets);
  const SequenceForward fwd = forward_sequence(p, seq, cfg);
  double loss = 0.0;
  for (std::size_t t = 0; t < seq.size(); ++t) loss += softmax_xent(fwd.logits[t], targets[t]).loss;
  return loss / static_cast<double>(seq.size());
}

std::vector<std::uint32_t> predict_topk(const ModelParams& p,
                                        std::span<const TransitionTriple> history, std::size_t k,
                                        const ModelConfig& cfg) {
  if (history.empty()) throw PreconditionError("predict_topk: empty history");
  const std::size_t vocab = p.b_out.size();
  if (k > vocab) {
    throw PreconditionError("predict_topk: k=" + std::to_string(k) + " exceeds vocabulary " +
                            std::to_string(vocab));
  }
  const SequenceForward fwd = forward_sequence(p, history, cfg);
  const Vector& logits = fwd.logits.back();

  std::vector<std::uint32_t> ids;
  ids.reserve(vocab);
  std::unordered_set<std::uint32_t> visited;
  if (cfg.exclude_visited) {
    for (const auto& s : history) visited.insert(s.poi);
  }
  for (std::uint32_t id = 0; id < vocab; ++id) {
    if (!visited.contains(id)) ids.push_back(id);
  }
  const std::size_t take = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end(),
                    [&](std::uint32_t a, std::uint32_t b) {
                      if (logits[a] != logits[b]) return logits[a] > logits[b];
                      return a < b;
                    });
  ids.resize(take);
  return ids;
}

std::vector<std::uint32_t> next_poi_targets(std::span<const TransitionTriple> records) {
  std::vector<std::uint32_t> targets;
  for (std::size_t t = 1; t < records.size(); ++t) targets.push_back(records[t].poi);
  return targets;
}

}  // namespace stpoi
