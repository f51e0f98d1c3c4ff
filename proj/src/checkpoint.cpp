#include "stpoi/checkpoint.hpp"

#include <fstream>

#include "binio.hpp"
#include "stpoi/errors.hpp"

namespace stpoi {

namespace {
constexpr char kMagic[9] = "STPOICKP";
constexpr std::uint32_t kVersion = 1;
}  // namespace

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
  using namespace binio;
  const ModelConfig& c = ckpt.config;
  write_magic(out, kMagic);
  write_u32(out, kVersion);
  write_u8(out, static_cast<std::uint8_t>(c.variant));
  write_u8(out, c.ablation.bits());
  write_u8(out, static_cast<std::uint8_t>(c.constraint_target));
  write_u64(out, c.n_i);
  write_u64(out, c.n_c);
  write_u64(out, c.vocab);
  write_u64(out, c.bptt_cap);
  write_u8(out, c.intervals.clip ? 1 : 0);
  write_f64(out, c.intervals.max_dt_hours);
  write_f64(out, c.intervals.max_dd_km);
  write_u8(out, c.intervals.log1p ? 1 : 0);
  write_u8(out, c.exclude_visited ? 1 : 0);
  write_u64(out, ckpt.epoch);

  const auto tensors = ckpt.params.tensors();
  write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    write_string(out, t.name);
    write_u64(out, t.rows);
    write_u64(out, t.cols);
    write_f64s(out, t.values.data(), t.values.size());
  }

  write_u8(out, ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const AdamState& s = *ckpt.optimizer;
    if (s.m.size() != tensors.size() || s.v.size() != tensors.size()) {
      throw DimensionError("optimizer state does not match parameter tensors");
    }
    write_f64(out, s.hp.lr);
    write_f64(out, s.hp.beta1);
    write_f64(out, s.hp.beta2);
    write_f64(out, s.hp.eps);
    write_u64(out, s.t);
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      write_f64s(out, s.m[k].data(), s.m[k].size());
      write_f64s(out, s.v[k].data(), s.v[k].size());
    }
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  using namespace binio;
  expect_magic(in, kMagic, "checkpoint");
  const auto version = read_u32(in, "checkpoint version");
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  const auto variant = read_u8(in, "variant");
  if (variant > 2) throw FormatError("unknown variant tag " + std::to_string(variant));
  c.variant = static_cast<Variant>(variant);
  c.ablation = GateAblation::from_bits(read_u8(in, "ablation"));
  const auto target = read_u8(in, "constraint target");
  if (target > 1) throw FormatError("unknown constraint target tag");
  c.constraint_target = static_cast<ConstraintTarget>(target);
  c.n_i = read_u64(in, "n_i");
  c.n_c = read_u64(in, "n_c");
  c.vocab = read_u64(in, "vocab");
  c.bptt_cap = read_u64(in, "bptt_cap");
  c.intervals.clip = read_u8(in, "interval clip") != 0;
  c.intervals.max_dt_hours = read_f64(in, "max dt");
  c.intervals.max_dd_km = read_f64(in, "max dd");
  c.intervals.log1p = read_u8(in, "log1p") != 0;
  c.exclude_visited = read_u8(in, "exclude visited") != 0;
  ckpt.epoch = read_u64(in, "epoch");

  ckpt.params = ModelParams::zeros(c);
  auto tensors = ckpt.params.tensors();
  const auto count = read_u32(in, "tensor count");
  if (count != tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, " +
                      std::string(to_string(c.variant)) + " needs " +
                      std::to_string(tensors.size()));
  }
  for (auto& t : tensors) {
    const auto name = read_string(in, "tensor name");
    const auto rows = read_u64(in, "tensor rows");
    const auto cols = read_u64(in, "tensor cols");
    if (name != t.name || rows != t.rows || cols != t.cols) {
      throw FormatError("tensor '" + name + "' does not match expected '" + t.name + "' " +
                        std::to_string(t.rows) + "x" + std::to_string(t.cols));
    }
    read_f64s(in, t.values.data(), t.values.size(), "tensor values");
  }

  if (read_u8(in, "optimizer flag") != 0) {
    AdamState s;
    s.hp.lr = read_f64(in, "lr");
    s.hp.beta1 = read_f64(in, "beta1");
    s.hp.beta2 = read_f64(in, "beta2");
    s.hp.eps = read_f64(in, "eps");
    s.t = read_u64(in, "adam step");
    for (const auto& t : tensors) {
      s.m.emplace_back(t.values.size());
      read_f64s(in, s.m.back().data(), t.values.size(), "first moments");
      s.v.emplace_back(t.values.size());
      read_f64s(in, s.v.back().data(), t.values.size(), "second moments");
    }
    ckpt.optimizer = std::move(s);
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    write_checkpoint(ckpt, out);
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace stpoi
