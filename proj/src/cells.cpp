#include "stpoi/cells.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stpoi/errors.hpp"

namespace stpoi {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::lstm: return "lstm";
    case Variant::st_lstm: return "st-lstm";
    case Variant::st_clstm: return "st-clstm";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  if (name == "lstm") return Variant::lstm;
  if (name == "st-lstm" || name == "st_lstm") return Variant::st_lstm;
  if (name == "st-clstm" || name == "st_clstm") return Variant::st_clstm;
  throw ConfigError("unknown cell variant '" + std::string(name) + "'");
}

bool has_interval_gates(Variant v) { return v != Variant::lstm; }
bool has_forget_gate(Variant v) { return v != Variant::st_clstm; }

std::string_view to_string(ConstraintTarget t) {
  return t == ConstraintTarget::interval_weights ? "interval" : "input";
}

ConstraintTarget parse_constraint_target(std::string_view name) {
  if (name == "interval") return ConstraintTarget::interval_weights;
  if (name == "input") return ConstraintTarget::input_weights;
  throw ConfigError("unknown constraint target '" + std::string(name) + "'");
}

std::uint8_t GateAblation::bits() const {
  return static_cast<std::uint8_t>((fix_t1 ? 1 : 0) | (fix_t2 ? 2 : 0) | (fix_d1 ? 4 : 0) |
                                   (fix_d2 ? 8 : 0));
}

GateAblation GateAblation::from_bits(std::uint8_t bits) {
  return {(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0, (bits & 8) != 0};
}

namespace {

struct NamedAblation {
  std::string_view name;
  std::uint8_t bits;
};

// Named configurations: which gates stay active.
constexpr NamedAblation kNamedAblations[] = {
    {"none", 0},
    {"time-only", 4 | 8},        // distance gates fixed
    {"distance-only", 1 | 2},    // time gates fixed
    {"short-term-only", 2 | 8},  // T2, D2 fixed
    {"long-term-only", 1 | 4},   // T1, D1 fixed
    {"all-fixed", 15},
};

}  // namespace

std::string ablation_name(const GateAblation& ab) {
  for (const auto& n : kNamedAblations) {
    if (n.bits == ab.bits()) return std::string(n.name);
  }
  std::string out = "fix";
  if (ab.fix_t1) out += "-t1";
  if (ab.fix_t2) out += "-t2";
  if (ab.fix_d1) out += "-d1";
  if (ab.fix_d2) out += "-d2";
  return out;
}

GateAblation parse_ablation(std::string_view name) {
  for (const auto& n : kNamedAblations) {
    if (n.name == name) return GateAblation::from_bits(n.bits);
  }
  throw ConfigError("unknown ablation '" + std::string(name) +
                    "' (none, time-only, distance-only, short-term-only, long-term-only, "
                    "all-fixed)");
}

CellState CellState::zeros(std::size_t n_c) {
  return {Vector(n_c), Vector(n_c), Vector(n_c)};
}

CellParams CellParams::zeros(Variant variant, std::size_t n_i, std::size_t n_c) {
  if (n_i == 0 || n_c == 0) throw PreconditionError("cell sizes must be positive");
  CellParams p;
  p.variant = variant;
  p.n_i = n_i;
  p.n_c = n_c;
  const std::size_t nz = n_c + n_i;
  p.w_i = Matrix(n_c, nz);
  p.w_c = Matrix(n_c, nz);
  p.w_o = Matrix(n_c, nz);
  p.b_i = Vector(n_c);
  p.b_c = Vector(n_c);
  p.b_o = Vector(n_c);
  if (has_forget_gate(variant)) {
    p.w_f = Matrix(n_c, nz);
    p.b_f = Vector(n_c);
  }
  if (has_interval_gates(variant)) {
    for (Matrix* m : {&p.w_xt1, &p.w_xt2, &p.w_xd1, &p.w_xd2}) *m = Matrix(n_c, n_i);
    for (Vector* v : {&p.w_t1, &p.w_t2, &p.w_d1, &p.w_d2, &p.b_t1, &p.b_t2, &p.b_d1, &p.b_d2,
                      &p.w_to, &p.w_do}) {
      *v = Vector(n_c);
    }
  }
  return p;
}

namespace {

template <typename Self, typename Ref>
std::vector<Ref> collect_tensors(Self& p) {
  std::vector<Ref> out;
  out.push_back(tensor_ref("w_i", p.w_i));
  out.push_back(tensor_ref("b_i", p.b_i));
  if (has_forget_gate(p.variant)) {
    out.push_back(tensor_ref("w_f", p.w_f));
    out.push_back(tensor_ref("b_f", p.b_f));
  }
  out.push_back(tensor_ref("w_c", p.w_c));
  out.push_back(tensor_ref("b_c", p.b_c));
  out.push_back(tensor_ref("w_o", p.w_o));
  out.push_back(tensor_ref("b_o", p.b_o));
  if (has_interval_gates(p.variant)) {
    out.push_back(tensor_ref("w_xt1", p.w_xt1));
    out.push_back(tensor_ref("w_t1", p.w_t1));
    out.push_back(tensor_ref("b_t1", p.b_t1));
    out.push_back(tensor_ref("w_xt2", p.w_xt2));
    out.push_back(tensor_ref("w_t2", p.w_t2));
    out.push_back(tensor_ref("b_t2", p.b_t2));
    out.push_back(tensor_ref("w_xd1", p.w_xd1));
    out.push_back(tensor_ref("w_d1", p.w_d1));
    out.push_back(tensor_ref("b_d1", p.b_d1));
    out.push_back(tensor_ref("w_xd2", p.w_xd2));
    out.push_back(tensor_ref("w_d2", p.w_d2));
    out.push_back(tensor_ref("b_d2", p.b_d2));
    out.push_back(tensor_ref("w_to", p.w_to));
    out.push_back(tensor_ref("w_do", p.w_do));
  }
  return out;
}

}  // namespace

std::vector<TensorRef> CellParams::tensors() {
  return collect_tensors<CellParams, TensorRef>(*this);
}

std::vector<ConstTensorRef> CellParams::tensors() const {
  return collect_tensors<const CellParams, ConstTensorRef>(*this);
}

std::size_t CellParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.values.size();
  return n;
}

void CellParams::set_zero() {
  for (auto& t : tensors()) std::fill(t.values.begin(), t.values.end(), 0.0);
}

std::vector<std::string> constrained_tensor_names(Variant variant, ConstraintTarget target) {
  if (!has_interval_gates(variant)) return {};
  if (target == ConstraintTarget::interval_weights) return {"w_t1", "w_d1"};
  return {"w_xt1", "w_xd1"};
}

CellParams CellParams::initialized(Variant variant, std::size_t n_i, std::size_t n_c,
                                   ConstraintTarget target, Rng& rng) {
  CellParams p = zeros(variant, n_i, n_c);
  const double bound = 1.0 / std::sqrt(static_cast<double>(n_c));
  const auto constrained = constrained_tensor_names(variant, target);
  for (auto& t : p.tensors()) {
    if (t.name.starts_with("b_")) continue;
    const bool clamp =
        std::find(constrained.begin(), constrained.end(), t.name) != constrained.end();
    for (double& v : t.values) {
      v = rng.uniform(-bound, bound);
      if (clamp) v = std::min(v, 0.0);
    }
  }
  return p;
}

namespace {

void check_param_shapes(const CellParams& p) {
  const CellParams ref = CellParams::zeros(p.variant, p.n_i, p.n_c);
  const auto want = ref.tensors();
  const auto have = p.tensors();
  for (std::size_t k = 0; k < want.size(); ++k) {
    if (have[k].rows != want[k].rows || have[k].cols != want[k].cols ||
        have[k].values.size() != want[k].values.size()) {
      throw DimensionError("cell tensor " + want[k].name + " has shape " +
                           std::to_string(have[k].rows) + "x" + std::to_string(have[k].cols) +
                           ", expected " + std::to_string(want[k].rows) + "x" +
                           std::to_string(want[k].cols));
    }
  }
}

void check_step_shapes(const CellParams& p, std::size_t x_len, const CellState& prev) {
  check_param_shapes(p);
  if (x_len != p.n_i) {
    throw DimensionError("cell input has length " + std::to_string(x_len) + ", expected " +
                         std::to_string(p.n_i));
  }
  if (prev.c.size() != p.n_c || prev.h.size() != p.n_c) {
    throw DimensionError("previous cell state does not match cell size " +
                         std::to_string(p.n_c));
  }
}

Vector concat(const Vector& a, const Vector& b) {
  Vector out(a.size() + b.size());
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// gate = sigma(W_x x + sigma(interval * w) + b); `inner` receives sigma(interval * w).
void interval_gate(const Matrix& w_x, const Vector& w, const Vector& b,
                   std::span<const double> x, double interval, Vector& gate, Vector& inner) {
  Vector scaled(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) scaled[k] = interval * w[k];
  inner = sigmoid(scaled);
  Vector pre = b;
  gemv_acc(w_x, x, pre.span());
  for (std::size_t k = 0; k < pre.size(); ++k) pre[k] += inner[k];
  gate = sigmoid(pre);
}

StepResult forward_impl(const CellParams& p, const StepInput& in, const CellState& prev,
                        const GateAblation& ab) {
  check_step_shapes(p, in.x.size(), prev);
  const bool st = has_interval_gates(p.variant);
  if (st) {
    if (!std::isfinite(in.dt) || !std::isfinite(in.dd) || in.dt < 0.0 || in.dd < 0.0) {
      throw PreconditionError("intervals must be finite and non-negative (dt=" +
                              std::to_string(in.dt) + ", dd=" + std::to_string(in.dd) + ")");
    }
  }
  const std::size_t n = p.n_c;

  StepResult r;
  StepCache& k = r.cache;
  k.variant = p.variant;
  k.ablation = st ? ab : GateAblation{};
  k.z = concat(prev.h, in.x);
  k.c_prev = prev.c;
  k.dt = st ? in.dt : 0.0;
  k.dd = st ? in.dd : 0.0;

  k.i = sigmoid(affine(p.w_i, k.z, p.b_i));
  if (has_forget_gate(p.variant)) k.f = sigmoid(affine(p.w_f, k.z, p.b_f));
  k.g = tanh_v(affine(p.w_c, k.z, p.b_c));
  Vector o_pre = affine(p.w_o, k.z, p.b_o);
  if (st) {
    for (std::size_t j = 0; j < n; ++j) o_pre[j] += k.dt * p.w_to[j] + k.dd * p.w_do[j];
  }
  k.o = sigmoid(o_pre);

  if (!st) {
    k.c = Vector(n);
    for (std::size_t j = 0; j < n; ++j) k.c[j] = k.f[j] * k.c_prev[j] + k.i[j] * k.g[j];
    k.c_hat = k.c;
  } else {
    const std::span<const double> x = in.x.span();
    auto gate = [&](bool fixed, const Matrix& w_x, const Vector& w, const Vector& b,
                    double interval, Vector& out, Vector& inner) {
      if (fixed) {
        out = Vector(n, 1.0);
        inner = Vector();
      } else {
        interval_gate(w_x, w, b, x, interval, out, inner);
      }
    };
    gate(k.ablation.fix_t1, p.w_xt1, p.w_t1, p.b_t1, k.dt, k.t1, k.s_t1);
    gate(k.ablation.fix_t2, p.w_xt2, p.w_t2, p.b_t2, k.dt, k.t2, k.s_t2);
    gate(k.ablation.fix_d1, p.w_xd1, p.w_d1, p.b_d1, k.dd, k.d1, k.s_d1);
    gate(k.ablation.fix_d2, p.w_xd2, p.w_d2, p.b_d2, k.dd, k.d2, k.s_d2);

    k.c_hat = Vector(n);
    k.c = Vector(n);
    if (p.variant == Variant::st_lstm) {
      for (std::size_t j = 0; j < n; ++j) {
        const double kept = k.f[j] * k.c_prev[j];
        k.c_hat[j] = kept + k.i[j] * k.t1[j] * k.d1[j] * k.g[j];
        k.c[j] = kept + k.i[j] * k.t2[j] * k.d2[j] * k.g[j];
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        const double a1 = k.i[j] * k.t1[j] * k.d1[j];
        k.c_hat[j] = (1.0 - a1) * k.c_prev[j] + a1 * k.g[j];
        k.c[j] = (1.0 - k.i[j]) * k.c_prev[j] + k.i[j] * k.t2[j] * k.d2[j] * k.g[j];
      }
    }
  }

  k.tanh_c_hat = tanh_v(k.c_hat);
  r.state.c = k.c;
  r.state.c_hat = k.c_hat;
  r.state.h = hadamard(k.o, k.tanh_c_hat);
  return r;
}

void require_variant(const CellParams& p, Variant v, const char* op) {
  if (p.variant != v) {
    throw UsageError(std::string(op) + " called with " + std::string(to_string(p.variant)) +
                     " parameters");
  }
}

}  // namespace

StepResult lstm_forward(const CellParams& p, const Vector& x, const CellState& prev) {
  require_variant(p, Variant::lstm, "lstm_forward");
  return forward_impl(p, StepInput{x, 0.0, 0.0}, prev, GateAblation{});
}

StepResult stlstm_forward(const CellParams& p, const StepInput& in, const CellState& prev,
                          const GateAblation& ab) {
  require_variant(p, Variant::st_lstm, "stlstm_forward");
  return forward_impl(p, in, prev, ab);
}

StepResult stclstm_forward(const CellParams& p, const StepInput& in, const CellState& prev,
                           const GateAblation& ab) {
  require_variant(p, Variant::st_clstm, "stclstm_forward");
  return forward_impl(p, in, prev, ab);
}

StepResult cell_forward(const CellParams& p, const StepInput& in, const CellState& prev,
                        const GateAblation& ab) {
  return forward_impl(p, in, prev, ab);
}

namespace {

// Backprop through gate = sigma(W_x x + sigma(interval * w) + b).
void interval_gate_backward(const Matrix& w_x, const Vector& w, const Vector& gate,
                            const Vector& inner, const Vector& d_gate,
                            std::span<const double> x, double interval, Matrix& g_wx,
                            Vector& g_w, Vector& g_b, std::span<double> dx,
                            double& d_interval) {
  const std::size_t n = gate.size();
  Vector du(n);
  for (std::size_t j = 0; j < n; ++j) du[j] = d_gate[j] * gate[j] * (1.0 - gate[j]);
  outer_acc(g_wx, du.span(), x);
  axpy(1.0, du.span(), g_b.span());
  gemv_t_acc(w_x, du.span(), dx);
  for (std::size_t j = 0; j < n; ++j) {
    const double ds = du[j] * inner[j] * (1.0 - inner[j]);
    g_w[j] += ds * interval;
    d_interval += ds * w[j];
  }
}

}  // namespace

StepGrads cell_backward(const CellParams& p, const StepCache& k, const Vector& grad_h,
                        const Vector& grad_c, CellParams& grads) {
  if (k.variant != p.variant) {
    throw UsageError("cell_backward: cache from " + std::string(to_string(k.variant)) +
                     " step used with " + std::string(to_string(p.variant)) + " parameters");
  }
  if (grads.variant != p.variant || grads.n_i != p.n_i || grads.n_c != p.n_c) {
    throw UsageError("cell_backward: gradient buffer does not match parameters");
  }
  check_param_shapes(p);
  check_param_shapes(grads);
  const std::size_t n = p.n_c;
  const std::size_t nz = p.n_c + p.n_i;
  if (k.z.size() != nz || k.c_prev.size() != n) {
    throw UsageError("cell_backward: cache shapes do not match parameters");
  }
  if (grad_h.size() != n || grad_c.size() != n) {
    throw DimensionError("cell_backward: upstream gradients must have length n_c");
  }

  const bool st = has_interval_gates(p.variant);
  StepGrads out;
  out.x = Vector(p.n_i);

  Vector d_chat(n), d_ao(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double th = k.tanh_c_hat[j];
    d_chat[j] = grad_h[j] * k.o[j] * (1.0 - th * th);
    const double d_o = grad_h[j] * th;
    d_ao[j] = d_o * k.o[j] * (1.0 - k.o[j]);
  }

  Vector di(n), df(n), dg(n);
  Vector dt1(n), dt2(n), dd1(n), dd2(n);
  out.c_prev = Vector(n);

  switch (p.variant) {
    case Variant::lstm:
      for (std::size_t j = 0; j < n; ++j) {
        const double dc = grad_c[j] + d_chat[j];
        df[j] = dc * k.c_prev[j];
        di[j] = dc * k.g[j];
        dg[j] = dc * k.i[j];
        out.c_prev[j] = dc * k.f[j];
      }
      break;
    case Variant::st_lstm:
      for (std::size_t j = 0; j < n; ++j) {
        const double both = d_chat[j] + grad_c[j];
        df[j] = both * k.c_prev[j];
        out.c_prev[j] = both * k.f[j];
        const double short_gate = k.t1[j] * k.d1[j];
        const double long_gate = k.t2[j] * k.d2[j];
        dg[j] = d_chat[j] * k.i[j] * short_gate + grad_c[j] * k.i[j] * long_gate;
        di[j] = d_chat[j] * short_gate * k.g[j] + grad_c[j] * long_gate * k.g[j];
        dt1[j] = d_chat[j] * k.i[j] * k.d1[j] * k.g[j];
        dd1[j] = d_chat[j] * k.i[j] * k.t1[j] * k.g[j];
        dt2[j] = grad_c[j] * k.i[j] * k.d2[j] * k.g[j];
        dd2[j] = grad_c[j] * k.i[j] * k.t2[j] * k.g[j];
      }
      break;
    case Variant::st_clstm:
      for (std::size_t j = 0; j < n; ++j) {
        const double short_gate = k.t1[j] * k.d1[j];
        const double long_gate = k.t2[j] * k.d2[j];
        const double a1 = k.i[j] * short_gate;
        // c_hat = c_prev + a1 * (g - c_prev)
        const double d_a1 = d_chat[j] * (k.g[j] - k.c_prev[j]);
        dg[j] = d_chat[j] * a1 + grad_c[j] * k.i[j] * long_gate;
        di[j] = d_a1 * short_gate + grad_c[j] * (long_gate * k.g[j] - k.c_prev[j]);
        dt1[j] = d_a1 * k.i[j] * k.d1[j];
        dd1[j] = d_a1 * k.i[j] * k.t1[j];
        dt2[j] = grad_c[j] * k.i[j] * k.d2[j] * k.g[j];
        dd2[j] = grad_c[j] * k.i[j] * k.t2[j] * k.g[j];
        out.c_prev[j] = d_chat[j] * (1.0 - a1) + grad_c[j] * (1.0 - k.i[j]);
      }
      break;
  }

  Vector dz(nz);
  auto gate_backward = [&](const Vector& d_pre, const Matrix& w, Matrix& g_w, Vector& g_b) {
    outer_acc(g_w, d_pre.span(), k.z.span());
    axpy(1.0, d_pre.span(), g_b.span());
    gemv_t_acc(w, d_pre.span(), dz.span());
  };

  Vector d_ai(n), d_ag(n);
  for (std::size_t j = 0; j < n; ++j) {
    d_ai[j] = di[j] * k.i[j] * (1.0 - k.i[j]);
    d_ag[j] = dg[j] * (1.0 - k.g[j] * k.g[j]);
  }
  gate_backward(d_ai, p.w_i, grads.w_i, grads.b_i);
  if (has_forget_gate(p.variant)) {
    Vector d_af(n);
    for (std::size_t j = 0; j < n; ++j) d_af[j] = df[j] * k.f[j] * (1.0 - k.f[j]);
    gate_backward(d_af, p.w_f, grads.w_f, grads.b_f);
  }
  gate_backward(d_ag, p.w_c, grads.w_c, grads.b_c);
  gate_backward(d_ao, p.w_o, grads.w_o, grads.b_o);

  if (st) {
    for (std::size_t j = 0; j < n; ++j) {
      grads.w_to[j] += d_ao[j] * k.dt;
      grads.w_do[j] += d_ao[j] * k.dd;
      out.dt += d_ao[j] * p.w_to[j];
      out.dd += d_ao[j] * p.w_do[j];
    }
    const std::span<const double> x(k.z.data.data() + n, p.n_i);
    const auto& ab = k.ablation;
    if (!ab.fix_t1) {
      interval_gate_backward(p.w_xt1, p.w_t1, k.t1, k.s_t1, dt1, x, k.dt, grads.w_xt1,
                             grads.w_t1, grads.b_t1, out.x.span(), out.dt);
    }
    if (!ab.fix_t2) {
      interval_gate_backward(p.w_xt2, p.w_t2, k.t2, k.s_t2, dt2, x, k.dt, grads.w_xt2,
                             grads.w_t2, grads.b_t2, out.x.span(), out.dt);
    }
    if (!ab.fix_d1) {
      interval_gate_backward(p.w_xd1, p.w_d1, k.d1, k.s_d1, dd1, x, k.dd, grads.w_xd1,
                             grads.w_d1, grads.b_d1, out.x.span(), out.dd);
    }
    if (!ab.fix_d2) {
      interval_gate_backward(p.w_xd2, p.w_d2, k.d2, k.s_d2, dd2, x, k.dd, grads.w_xd2,
                             grads.w_d2, grads.b_d2, out.x.span(), out.dd);
    }
  }

  out.h_prev = Vector(n);
  std::copy(dz.data.begin(), dz.data.begin() + static_cast<std::ptrdiff_t>(n),
            out.h_prev.data.begin());
  for (std::size_t j = 0; j < p.n_i; ++j) out.x[j] += dz[n + j];
  return out;
}

CellBackward cell_backward(const CellParams& p, const StepCache& cache, const Vector& grad_h,
                           const Vector& grad_c) {
  CellBackward r;
  r.grads = CellParams::zeros(p.variant, p.n_i, p.n_c);
  r.inputs = cell_backward(p, cache, grad_h, grad_c, r.grads);
  return r;
}

ParamCount count_params(Variant variant, std::size_t n_i, std::size_t n_c, std::size_t n_o) {
  ParamCount count;
  count.cell = CellParams::zeros(variant, n_i, n_c).parameter_count();
  count.output = n_c * n_o + n_o;
  switch (variant) {
    case Variant::lstm:
      count.closed_form = n_c * n_c * 4 + n_i * n_c * 4 + n_c * n_o + n_c * 3;
      break;
    case Variant::st_lstm:
      count.closed_form = n_c * n_c * 5 + n_i * n_c * 8 + n_c * n_o + n_c * 9;
      break;
    case Variant::st_clstm:
      break;
  }
  return count;
}

}  // namespace stpoi
