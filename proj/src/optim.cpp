#include "stpoi/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stpoi/errors.hpp"

namespace stpoi {

AdamState AdamState::for_params(std::span<const ConstTensorRef> params, AdamConfig hp) {
  AdamState s;
  s.hp = hp;
  for (const auto& p : params) {
    s.m.emplace_back(p.values.size(), 0.0);
    s.v.emplace_back(p.values.size(), 0.0);
  }
  return s;
}

void adam_step(std::span<const TensorRef> params, std::span<const ConstTensorRef> grads,
               AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment lists differ in length");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::size_t n = params[k].values.size();
    if (grads[k].values.size() != n || state.m[k].size() != n || state.v[k].size() != n) {
      throw DimensionError("adam_step: shape mismatch for tensor " + params[k].name);
    }
  }

  ++state.t;
  const auto& hp = state.hp;
  const double t = static_cast<double>(state.t);
  const double correct1 = 1.0 - std::pow(hp.beta1, t);
  const double correct2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].values;
    const auto g = grads[k].values;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
      v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correct1;
      const double v_hat = v[j] / correct2;
      p[j] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
    }
  }
}

namespace {

template <typename Ref>
const Ref& find_tensor(std::span<const Ref> params, const std::string& name) {
  const auto it = std::find_if(params.begin(), params.end(),
                               [&](const Ref& t) { return t.name == name; });
  if (it == params.end()) throw ConfigError("constraint names unknown tensor '" + name + "'");
  return *it;
}

}  // namespace

void project(std::span<const TensorRef> params, const ConstraintSet& constraints) {
  for (const auto& name : constraints.names) {
    for (double& v : find_tensor(params, name).values) v = std::min(v, 0.0);
  }
}

double max_constrained_entry(std::span<const ConstTensorRef> params,
                             const ConstraintSet& constraints) {
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& name : constraints.names) {
    for (double v : find_tensor(params, name).values) worst = std::max(worst, v);
  }
  return worst;
}

double clip_global_norm(std::span<const TensorRef> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw PreconditionError("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads) sq += squared_norm(g.values);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& g : grads) {
      for (double& v : g.values) v *= factor;
    }
  }
  return norm;
}

FdCheckReport fd_check(const std::function<double()>& loss, std::span<const TensorRef> params,
                       std::span<const ConstTensorRef> analytic, const FdCheckOptions& opts) {
  if (params.size() != analytic.size()) {
    throw DimensionError("fd_check: parameter and gradient lists differ in length");
  }
  FdCheckReport report;
  Rng rng(opts.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].values;
    const auto grad = analytic[k].values;
    if (grad.size() != values.size()) {
      throw DimensionError("fd_check: gradient shape mismatch for " + params[k].name);
    }
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_tensor > 0 && coords.size() > opts.max_coords_per_tensor) {
      rng.shuffle(coords);
      coords.resize(opts.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t j : coords) {
      const double saved = values[j];
      values[j] = saved + opts.eps;
      const double up = loss();
      values[j] = saved - opts.eps;
      const double down = loss();
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double a = grad[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        report.worst_tensor = params[k].name;
        report.worst_index = j;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= opts.tol;
  return report;
}

}  // namespace stpoi
