#pragma once

// Recurrent cells for next-POI modeling:
//
//   lstm      classic LSTM over z = [h_{t-1}, x_t]
//   st_lstm   LSTM plus two time gates (T1, T2) and two distance gates
//             (D1, D2). T1/D1 filter the candidate into the short-term state
//             c_hat that drives h_t; T2/D2 filter it into the long-term state
//             c_t that is carried to the next step.
//   st_clstm  st_lstm without a forget gate; forgetting is coupled to the
//             (gated) input gate.
//
// Gate equations for the spatio-temporal variants, with dt/dd the scalar
// time (hours) and distance (km) to the next check-in:
//
//   T1 = sigma(W_xt1 x + sigma(dt * w_t1) + b_t1)      (T2, D1, D2 alike)
//   o  = sigma(W_o z + dt * w_to + dd * w_do + b_o)
//   st_lstm:  c_hat = f*c_prev + i*T1*D1*g,  c = f*c_prev + i*T2*D2*g
//   st_clstm: c_hat = (1 - i*T1*D1)*c_prev + i*T1*D1*g
//             c     = (1 - i)*c_prev + i*T2*D2*g
//   h = o * tanh(c_hat)

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stpoi/numkit.hpp"

namespace stpoi {

enum class Variant : std::uint8_t { lstm = 0, st_lstm = 1, st_clstm = 2 };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);
bool has_interval_gates(Variant v);
bool has_forget_gate(Variant v);

// Which weights the non-positivity projection acts on.
//   interval_weights: w_t1, w_d1 (the scalar-interval weights)
//   input_weights:    W_xt1, W_xd1
enum class ConstraintTarget : std::uint8_t { interval_weights = 0, input_weights = 1 };

std::string_view to_string(ConstraintTarget t);
ConstraintTarget parse_constraint_target(std::string_view name);

// Replaces the selected gate outputs with the all-ones vector.
struct GateAblation {
  bool fix_t1 = false;
  bool fix_t2 = false;
  bool fix_d1 = false;
  bool fix_d2 = false;

  bool any() const { return fix_t1 || fix_t2 || fix_d1 || fix_d2; }
  static GateAblation all() { return {true, true, true, true}; }
  std::uint8_t bits() const;
  static GateAblation from_bits(std::uint8_t bits);

  bool operator==(const GateAblation&) const = default;
};

// "none", "time-only" (distance gates fixed), "distance-only" (time gates
// fixed), "short-term-only" (T2, D2 fixed), "long-term-only" (T1, D1 fixed),
// "all-fixed"; other combinations print as e.g. "fix-t1-d2".
std::string ablation_name(const GateAblation& ab);
GateAblation parse_ablation(std::string_view name);

struct CellParams {
  Variant variant = Variant::lstm;
  std::size_t n_i = 0;
  std::size_t n_c = 0;

  // Gates over [h_{t-1}, x_t]; each n_c x (n_c + n_i). w_f/b_f stay empty
  // for st_clstm.
  Matrix w_i, w_f, w_c, w_o;
  Vector b_i, b_f, b_c, b_o;

  // Interval gates (st variants only). W_x* are n_c x n_i; the rest n_c.
  Matrix w_xt1, w_xt2, w_xd1, w_xd2;
  Vector w_t1, w_t2, w_d1, w_d2;
  Vector b_t1, b_t2, b_d1, b_d2;
  Vector w_to, w_do;

  static CellParams zeros(Variant variant, std::size_t n_i, std::size_t n_c);

  // Weights ~ U(-1/sqrt(n_c), 1/sqrt(n_c)), biases zero, constrained
  // weights clamped to <= 0 after drawing.
  static CellParams initialized(Variant variant, std::size_t n_i, std::size_t n_c,
                                ConstraintTarget target, Rng& rng);

  // Every tensor that exists for this variant, in a fixed order.
  std::vector<TensorRef> tensors();
  std::vector<ConstTensorRef> tensors() const;

  std::size_t parameter_count() const;
  void set_zero();

  bool operator==(const CellParams&) const = default;
};

// Names of the tensors the projection keeps non-positive.
std::vector<std::string> constrained_tensor_names(Variant variant, ConstraintTarget target);

struct CellState {
  Vector c;      // long-term state, carried to the next step
  Vector h;      // hidden output, carried to the next step
  Vector c_hat;  // short-term state of this step; equals c for lstm

  static CellState zeros(std::size_t n_c);
};

struct StepInput {
  Vector x;         // embedded POI, length n_i
  double dt = 0.0;  // hours to the next check-in
  double dd = 0.0;  // km to the next check-in
};

// Everything the backward pass needs from one forward step.
struct StepCache {
  Variant variant = Variant::lstm;
  GateAblation ablation;
  Vector z;  // [h_prev, x]
  Vector c_prev;
  double dt = 0.0;
  double dd = 0.0;
  Vector i, f, g, o;
  Vector t1, t2, d1, d2;          // gate outputs, ones when ablated
  Vector s_t1, s_t2, s_d1, s_d2;  // inner sigma(interval * w)
  Vector c_hat, c, tanh_c_hat;
};

struct StepResult {
  CellState state;
  StepCache cache;
};

StepResult lstm_forward(const CellParams& p, const Vector& x, const CellState& prev);
StepResult stlstm_forward(const CellParams& p, const StepInput& in, const CellState& prev,
                          const GateAblation& ab);
StepResult stclstm_forward(const CellParams& p, const StepInput& in, const CellState& prev,
                           const GateAblation& ab);

// Dispatches on p.variant. dt/dd and the ablation are ignored for lstm.
StepResult cell_forward(const CellParams& p, const StepInput& in, const CellState& prev,
                        const GateAblation& ab);

struct StepGrads {
  Vector h_prev;
  Vector c_prev;
  Vector x;
  double dt = 0.0;
  double dd = 0.0;
};

// Reverse-mode step. Parameter gradients are accumulated into `grads`,
// which must have the shapes of `p`. grad_h is the upstream gradient at
// h_t, grad_c the one at the carried c_t.
StepGrads cell_backward(const CellParams& p, const StepCache& cache, const Vector& grad_h,
                        const Vector& grad_c, CellParams& grads);

struct CellBackward {
  CellParams grads;
  StepGrads inputs;
};

CellBackward cell_backward(const CellParams& p, const StepCache& cache, const Vector& grad_h,
                           const Vector& grad_c);

struct ParamCount {
  std::size_t cell = 0;    // enumerated recurrent-cell scalars
  std::size_t output = 0;  // n_c * n_o + n_o for the output projection
  std::size_t total() const { return cell + output; }
  // Closed-form per-weight complexity figures often quoted for LSTM and
  // ST-LSTM; absent for st_clstm. Reported only, not reconciled.
  std::optional<std::size_t> closed_form;
};

ParamCount count_params(Variant variant, std::size_t n_i, std::size_t n_c, std::size_t n_o);

}  // namespace stpoi
