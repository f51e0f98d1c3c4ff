#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>

#include "stpoi/model.hpp"
#include "stpoi/optim.hpp"

namespace stpoi {

// Self-describing parameter container. Layout (little-endian):
//
//   "STPOICKP"  u32 version
//   u8 variant  u8 ablation bits (t1=1, t2=2, d1=4, d2=8)  u8 constraint target
//   u64 n_i  u64 n_c  u64 vocab  u64 bptt_cap
//   u8 clip  f64 max_dt  f64 max_dd  u8 log1p  u8 exclude_visited
//   u64 epoch
//   u32 tensor count, then per tensor:
//     u32 name length, name bytes, u64 rows, u64 cols, rows*cols f64
//   u8 has_optimizer; if 1:
//     f64 lr  f64 beta1  f64 beta2  f64 eps  u64 t
//     per tensor (same order): size f64 first moments, size f64 second moments
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::optional<AdamState> optimizer;
  std::uint64_t epoch = 0;

  bool operator==(const Checkpoint&) const = default;
};

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out);
Checkpoint read_checkpoint(std::istream& in);

// Writes to a temporary sibling and renames, so readers never see a partial file.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stpoi
