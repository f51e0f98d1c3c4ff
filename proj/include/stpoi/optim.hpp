#pragma once

// Adam with a post-step non-positivity projection, global-norm clipping and
// a central finite-difference gradient oracle.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stpoi/numkit.hpp"

namespace stpoi {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
  AdamConfig hp;
  std::uint64_t t = 0;
  // One moment buffer per parameter tensor, in the tensors() order.
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(std::span<const ConstTensorRef> params, AdamConfig hp = {});

  bool operator==(const AdamState&) const = default;
};

// p -= lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments.
void adam_step(std::span<const TensorRef> params, std::span<const ConstTensorRef> grads,
               AdamState& state);

struct ConstraintSet {
  std::vector<std::string> names;  // tensors whose entries must stay <= 0
};

// Replaces every entry of each listed tensor by min(entry, 0). Unknown names
// raise ConfigError.
void project(std::span<const TensorRef> params, const ConstraintSet& constraints);

// Largest entry over the constrained tensors (-inf when there are none).
double max_constrained_entry(std::span<const ConstTensorRef> params,
                             const ConstraintSet& constraints);

// Rescales all gradients by max_norm / g when their global L2 norm g exceeds
// max_norm. Returns g.
double clip_global_norm(std::span<const TensorRef> grads, double max_norm);

struct FdCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Coordinates checked per tensor; 0 checks every coordinate, otherwise a
  // seeded random subset.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  // Relative error is |a - n| / max(|a|, |n|, floor), so gradients far below
  // floor are compared in absolute terms.
  double floor = 1e-6;
};

struct FdCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

// Central differences of `loss` against `analytic`, perturbing `params` in
// place (each coordinate is restored afterwards). `analytic` must list the
// same tensors as `params`, in the same order.
FdCheckReport fd_check(const std::function<double()>& loss, std::span<const TensorRef> params,
                       std::span<const ConstTensorRef> analytic, const FdCheckOptions& opts = {});

}  // namespace stpoi
