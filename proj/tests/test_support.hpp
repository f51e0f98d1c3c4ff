#pragma once

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "stpoi/cells.hpp"
#include "stpoi/data.hpp"
#include "stpoi/model.hpp"
#include "stpoi/numkit.hpp"

namespace stpoi::testing {

// Every tensor (biases included) drawn from U(-scale, scale); constrained
// tensors are clamped to <= 0 so they look like trained weights.
inline void randomize(std::vector<TensorRef> tensors, Rng& rng, double scale,
                      const std::vector<std::string>& constrained = {}) {
  for (auto& t : tensors) {
    const bool clamp = std::find(constrained.begin(), constrained.end(), t.name) != constrained.end();
    for (double& v : t.values) {
      v = rng.uniform(-scale, scale);
      if (clamp) v = std::min(v, 0.0);
    }
  }
}

inline CellParams random_cell(Variant variant, std::size_t n_i, std::size_t n_c, std::uint64_t seed,
                              double scale = 0.5) {
  Rng rng(seed);
  CellParams p = CellParams::zeros(variant, n_i, n_c);
  randomize(p.tensors(), rng, scale,
            constrained_tensor_names(variant, ConstraintTarget::interval_weights));
  return p;
}

inline ModelParams random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  ModelParams p = ModelParams::zeros(cfg);
  randomize(p.tensors(), rng, scale, constrained_model_tensors(cfg));
  return p;
}

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (double& x : v.data) x = rng.uniform(-scale, scale);
  return v;
}

inline std::vector<TransitionTriple> random_sequence(Rng& rng, std::size_t len, std::size_t vocab,
                                                     double max_interval = 3.0) {
  std::vector<TransitionTriple> seq;
  for (std::size_t t = 0; t < len; ++t) {
    seq.push_back({static_cast<std::uint32_t>(rng.index(vocab)), rng.uniform(0.0, max_interval),
                   rng.uniform(0.0, max_interval)});
  }
  return seq;
}

class TempDir {
 public:
  TempDir() {
    const auto base = std::filesystem::temp_directory_path();
    std::random_device entropy;
    for (;;) {
      path_ = base / ("stpoi_test_" + std::to_string(entropy()));
      if (std::filesystem::create_directory(path_)) break;
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace stpoi::testing
