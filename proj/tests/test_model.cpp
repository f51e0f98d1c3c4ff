#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "stpoi/errors.hpp"
#include "stpoi/model.hpp"
#include "stpoi/optim.hpp"
#include "test_support.hpp"

using namespace stpoi;
using stpoi::testing::random_model;
using stpoi::testing::random_sequence;

namespace {

ModelConfig tiny(Variant v, std::size_t vocab = 6) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.n_i = 3;
  cfg.n_c = 4;
  cfg.vocab = vocab;
  return cfg;
}

std::vector<std::uint32_t> random_targets(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<std::uint32_t> t(len);
  for (auto& x : t) x = static_cast<std::uint32_t>(rng.index(vocab));
  return t;
}

}  // namespace

TEST_CASE("zero parameters predict uniformly") {
  const ModelConfig cfg = tiny(Variant::st_clstm);
  const ModelParams p = ModelParams::zeros(cfg);
  const std::vector<TransitionTriple> seq = {{2, 1.0, 1.0}};
  const auto fwd = forward_sequence(p, seq, cfg);
  REQUIRE(fwd.logits.size() == 1);
  CHECK(fwd.logits[0] == Vector(6));
  const std::vector<std::uint32_t> target = {4};
  CHECK(sequence_loss(p, seq, target, cfg) == doctest::Approx(std::log(6.0)).epsilon(1e-14));
}

TEST_CASE("relabelling POIs permutes the logits") {
  Rng rng(3);
  for (Variant v : {Variant::lstm, Variant::st_lstm, Variant::st_clstm}) {
    const ModelConfig cfg = tiny(v, 7);
    const ModelParams p = random_model(cfg, 40);
    std::vector<std::uint32_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0u);
    rng.shuffle(perm);

    ModelParams q = p;
    for (std::size_t j = 0; j < 7; ++j) {
      std::copy(p.embedding.row(j).begin(), p.embedding.row(j).end(), q.embedding.row(perm[j]).begin());
      std::copy(p.w_out.row(j).begin(), p.w_out.row(j).end(), q.w_out.row(perm[j]).begin());
      q.b_out[perm[j]] = p.b_out[j];
    }
    auto seq = random_sequence(rng, 6, 7);
    auto mapped = seq;
    for (auto& s : mapped) s.poi = perm[s.poi];

    const auto a = forward_sequence(p, seq, cfg);
    const auto b = forward_sequence(q, mapped, cfg);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      for (std::size_t j = 0; j < 7; ++j) CHECK(b.logits[t][perm[j]] == a.logits[t][j]);
    }
  }
}

TEST_CASE("loss is the mean of per-step cross-entropies") {
  Rng rng(4);
  const ModelConfig cfg = tiny(Variant::st_lstm);
  const ModelParams p = random_model(cfg, 41);
  const auto seq = random_sequence(rng, 3, 6);
  const auto targets = random_targets(rng, 3, 6);
  const auto fwd = forward_sequence(p, seq, cfg);
  double expect = 0.0;
  for (std::size_t t = 0; t < 3; ++t) expect += softmax_xent(fwd.logits[t], targets[t]).loss;
  expect /= 3.0;
  CHECK(sequence_loss(p, seq, targets, cfg) == doctest::Approx(expect).epsilon(1e-15));
  CHECK(loss_and_grads(p, seq, targets, cfg).loss == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("model gradients match finite differences") {
  for (Variant v : {Variant::lstm, Variant::st_lstm, Variant::st_clstm}) {
    for (bool scaled : {false, true}) {
      CAPTURE(to_string(v));
      CAPTURE(scaled);
      Rng rng(50 + static_cast<int>(v));
      ModelConfig cfg = tiny(v);
      cfg.intervals.log1p = scaled;
      cfg.intervals.clip = scaled;
      cfg.intervals.max_dt_hours = 2.0;
      ModelParams p = random_model(cfg, rng.next());
      const auto seq = random_sequence(rng, 5, 6);
      const auto targets = random_targets(rng, 5, 6);
      const auto lg = loss_and_grads(p, seq, targets, cfg);
      const auto report = fd_check([&] { return sequence_loss(p, seq, targets, cfg); }, p.tensors(),
                                   std::as_const(lg.grads).tensors());
      CHECK_MESSAGE(report.passed, report.worst_tensor, "[", report.worst_index,
                    "] rel=", report.max_rel_error);
      std::size_t coords = 0;
      for (const auto& t : std::as_const(p).tensors()) coords += t.values.size();
      CHECK(report.checked == coords);
    }
  }
}

TEST_CASE("duplicated sequence doubles the summed gradient exactly") {
  Rng rng(6);
  const ModelConfig cfg = tiny(Variant::st_clstm);
  const ModelParams p = random_model(cfg, 42);
  const auto seq = random_sequence(rng, 5, 6);
  const auto targets = random_targets(rng, 5, 6);

  ModelParams one = ModelParams::zeros(cfg), two = ModelParams::zeros(cfg);
  accumulate_loss_gradients(p, seq, targets, cfg, one);
  accumulate_loss_gradients(p, seq, targets, cfg, two);
  ModelParams sum = one;
  sum.add(two);
  ModelParams doubled = one;
  doubled.scale(2.0);
  CHECK(sum == doubled);
}

TEST_CASE("bptt_cap=1 confines each step's gradient to its own loss") {
  const ModelConfig base = tiny(Variant::st_clstm);
  ModelConfig capped = base;
  capped.bptt_cap = 1;
  const ModelParams p = random_model(base, 43);
  const std::vector<TransitionTriple> seq = {{0, 1.0, 2.0}, {1, 0.5, 1.0}, {2, 2.0, 0.3}, {1, 1.0, 1.0}};
  const std::vector<std::uint32_t> targets = {1, 2, 1, 3};

  ModelParams full = ModelParams::zeros(capped);
  accumulate_loss_gradients(p, seq, targets, capped, full);
  ModelParams first = ModelParams::zeros(base);
  accumulate_loss_gradients(p, std::span(seq).first(1), std::span(targets).first(1), base, first);

  // POI 0 appears only at step 1, so its row sees the step-1 loss alone.
  const auto a = full.embedding.row(0);
  const auto b = first.embedding.row(0);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-14));
  CHECK(squared_norm(b) > 0.0);

  // Without the cap later losses also reach that row.
  ModelParams uncapped = ModelParams::zeros(base);
  accumulate_loss_gradients(p, seq, targets, base, uncapped);
  double diff = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) diff += std::abs(uncapped.embedding.row(0)[k] - b[k]);
  CHECK(diff > 1e-8);
}

TEST_CASE("windowed bptt matches full bptt inside a single window") {
  Rng rng(8);
  ModelConfig cfg = tiny(Variant::st_lstm);
  const ModelParams p = random_model(cfg, 44);
  const auto seq = random_sequence(rng, 5, 6);
  const auto targets = random_targets(rng, 5, 6);
  const auto full = loss_and_grads(p, seq, targets, cfg);
  cfg.bptt_cap = 5;
  CHECK(loss_and_grads(p, seq, targets, cfg).grads == full.grads);
}

TEST_CASE("predict_topk") {
  Rng rng(9);
  const ModelConfig cfg = tiny(Variant::st_clstm, 8);
  const ModelParams p = random_model(cfg, 45);
  const auto history = random_sequence(rng, 4, 8);

  const auto all = predict_topk(p, history, 8, cfg);
  CHECK(std::set<std::uint32_t>(all.begin(), all.end()).size() == 8);

  const auto fwd = forward_sequence(p, history, cfg);
  const auto& logits = fwd.logits.back().data;
  const auto argmax = std::max_element(logits.begin(), logits.end()) - logits.begin();
  CHECK(predict_topk(p, history, 1, cfg)[0] == argmax);
  for (std::size_t k = 1; k < all.size(); ++k) CHECK(logits[all[k - 1]] >= logits[all[k]]);

  const auto zero = predict_topk(ModelParams::zeros(cfg), history, 8, cfg);
  for (std::uint32_t j = 0; j < 8; ++j) CHECK(zero[j] == j);

  ModelConfig excl = cfg;
  excl.exclude_visited = true;
  const auto rest = predict_topk(p, history, 8, excl);
  for (auto id : rest) {
    for (const auto& h : history) CHECK(id != h.poi);
  }

  CHECK_THROWS_AS(predict_topk(p, {}, 1, cfg), PreconditionError);
  CHECK_THROWS_AS(predict_topk(p, history, 9, cfg), PreconditionError);
  const std::vector<TransitionTriple> bad = {{8, 0.0, 0.0}};
  CHECK_THROWS_AS(forward_sequence(p, bad, cfg), IndexError);
}

TEST_CASE("final softmax sums to one") {
  Rng rng(10);
  const ModelConfig cfg = tiny(Variant::st_lstm, 50);
  const ModelParams p = random_model(cfg, 46, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto fwd = forward_sequence(p, random_sequence(rng, 10, 50, 100.0), cfg);
    const Vector probs = softmax(fwd.logits.back());
    double s = 0.0;
    for (double x : probs.data) s += x;
    CHECK(std::abs(s - 1.0) <= 1e-9);
  }
}

TEST_CASE("fully ablated st-lstm trains like lstm") {
  ModelConfig lc = tiny(Variant::lstm, 6);
  ModelConfig sc = tiny(Variant::st_lstm, 6);
  sc.ablation = GateAblation::all();
  ModelParams sp = random_model(sc, 47);
  sp.cell.w_to.fill(0.0);
  sp.cell.w_do.fill(0.0);
  ModelParams lp = ModelParams::zeros(lc);
  lp.embedding = sp.embedding;
  lp.w_out = sp.w_out;
  lp.b_out = sp.b_out;
  lp.cell.w_i = sp.cell.w_i;
  lp.cell.w_f = sp.cell.w_f;
  lp.cell.w_c = sp.cell.w_c;
  lp.cell.w_o = sp.cell.w_o;
  lp.cell.b_i = sp.cell.b_i;
  lp.cell.b_f = sp.cell.b_f;
  lp.cell.b_c = sp.cell.b_c;
  lp.cell.b_o = sp.cell.b_o;

  AdamConfig hp;
  hp.lr = 0.01;
  AdamState ls = AdamState::for_params(std::as_const(lp).tensors(), hp);
  AdamState ss = AdamState::for_params(std::as_const(sp).tensors(), hp);

  Rng rng(11);
  std::vector<std::vector<TransitionTriple>> data;
  std::vector<std::vector<std::uint32_t>> targets;
  for (int k = 0; k < 4; ++k) {
    data.push_back(random_sequence(rng, 6, 6, 20.0));
    targets.push_back(random_targets(rng, 6, 6));
  }
  for (int step = 0; step < 60; ++step) {
    const auto& seq = data[step % data.size()];
    const auto& tg = targets[step % data.size()];
    const auto l = loss_and_grads(lp, seq, tg, lc);
    auto s = loss_and_grads(sp, seq, tg, sc);
    CHECK(std::abs(l.loss - s.loss) <= 1e-9);
    // The output-gate interval weights are part of the "zero interval
    // weights" premise, so they stay frozen.
    s.grads.cell.w_to.fill(0.0);
    s.grads.cell.w_do.fill(0.0);
    adam_step(lp.tensors(), std::as_const(l.grads).tensors(), ls);
    adam_step(sp.tensors(), std::as_const(s.grads).tensors(), ss);
  }
  CHECK(sp.cell.w_to == Vector(4));
}
