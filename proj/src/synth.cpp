#include <algorithm>
#include <cmath>
#include <string>

#include "stpoi/data.hpp"
#include "stpoi/errors.hpp"
#include "stpoi/numkit.hpp"

namespace stpoi {

SynthPattern parse_synth_pattern(std::string_view name) {
  if (name == "periodic") return SynthPattern::periodic;
  if (name == "interval") return SynthPattern::interval;
  throw ConfigError("unknown synthetic pattern '" + std::string(name) + "'");
}

std::string_view to_string(SynthPattern p) {
  return p == SynthPattern::periodic ? "periodic" : "interval";
}

namespace {

constexpr std::int64_t kEpochStart = 1262304000;  // 2010-01-01T00:00:00Z

struct World {
  std::vector<GeoPoint> poi_location;
  std::vector<std::vector<std::size_t>> clusters;  // POI indices per cluster
  std::vector<std::size_t> cluster_of;
};

// Cluster centers sit on a grid 0.5 degrees apart (~55 km), POIs within
// ~0.3 km of their center, so intra-cluster moves are short and
// inter-cluster moves long.
World make_world(std::size_t n_pois, std::size_t cluster_size, Rng& rng) {
  World w;
  const std::size_t n_clusters = std::max<std::size_t>(1, n_pois / cluster_size);
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_clusters))));
  w.clusters.resize(n_clusters);
  w.cluster_of.resize(n_pois);
  for (std::size_t p = 0; p < n_pois; ++p) {
    const std::size_t c = p % n_clusters;
    w.clusters[c].push_back(p);
    w.cluster_of[p] = c;
    const double lat = 30.0 + 0.5 * static_cast<double>(c / side) + rng.uniform(-0.003, 0.003);
    const double lon = -98.0 + 0.5 * static_cast<double>(c % side) + rng.uniform(-0.003, 0.003);
    w.poi_location.push_back({lat, lon});
  }
  return w;
}

std::vector<std::size_t> make_cycle(const std::vector<std::size_t>& members, std::size_t length,
                                    Rng& rng) {
  std::vector<std::size_t> cycle = members;
  rng.shuffle(cycle);
  cycle.resize(std::min(length, cycle.size()));
  return cycle;
}

std::string poi_name(std::size_t p) { return "p" + std::to_string(p); }

}  // namespace

std::vector<CheckIn> synth_checkins(const SynthOptions& opts) {
  if (opts.n_users == 0 || opts.n_pois == 0 || opts.cycle_length == 0) {
    throw PreconditionError("synthetic corpus sizes must be at least 1");
  }
  if (opts.checkins_per_user < 2) {
    throw PreconditionError("synthetic users need at least two check-ins");
  }
  Rng rng(opts.seed);
  const World world = make_world(opts.n_pois, opts.cycle_length + 1, rng);
  const std::size_t n_clusters = world.clusters.size();

  std::vector<CheckIn> out;
  out.reserve(opts.n_users * opts.checkins_per_user);
  for (std::size_t u = 0; u < opts.n_users; ++u) {
    const std::string user = "u" + std::to_string(u);
    double hours = static_cast<double>(rng.index(24 * 30));
    auto emit = [&](std::size_t poi) {
      const GeoPoint g = world.poi_location[poi];
      const auto ts = kEpochStart + static_cast<std::int64_t>(std::llround(hours * 3600.0));
      out.push_back(CheckIn{user, poi_name(poi), ts, g.lat, g.lon});
    };

    if (opts.pattern == SynthPattern::periodic) {
      const std::size_t home = rng.index(n_clusters);
      const auto cycle = make_cycle(world.clusters[home], opts.cycle_length, rng);
      const double period = rng.uniform(3.0, 6.0);
      std::size_t pos = rng.index(cycle.size());
      for (std::size_t k = 0; k < opts.checkins_per_user; ++k) {
        if (k > 0) hours += period * rng.uniform(0.95, 1.05);
        if (k > 0 && n_clusters > 1 && rng.bernoulli(opts.jump_prob)) {
          std::size_t away = rng.index(n_clusters - 1);
          if (away >= home) ++away;
          const auto& members = world.clusters[away];
          emit(members[rng.index(members.size())]);
          continue;
        }
        emit(cycle[pos]);
        pos = (pos + 1) % cycle.size();
      }
    } else {
      if (n_clusters < 2) {
        throw PreconditionError("interval pattern needs at least two POI clusters");
      }
      const std::size_t home = rng.index(n_clusters);
      std::size_t away = rng.index(n_clusters - 1);
      if (away >= home) ++away;
      const std::vector<std::size_t> cycles[2] = {
          make_cycle(world.clusters[home], opts.cycle_length, rng),
          make_cycle(world.clusters[away], opts.cycle_length, rng)};
      std::size_t pos[2] = {rng.index(cycles[0].size()), rng.index(cycles[1].size())};
      std::size_t side = 0;
      for (std::size_t k = 0; k < opts.checkins_per_user; ++k) {
        if (k > 0) {
          const bool jump = rng.bernoulli(0.5);
          hours += jump ? rng.uniform(24.0, 48.0) : rng.uniform(0.5, 3.0);
          if (jump) side = 1 - side;
        }
        emit(cycles[side][pos[side]]);
        pos[side] = (pos[side] + 1) % cycles[side].size();
      }
    }
  }
  return out;
}

Corpus synth_corpus(const SynthOptions& opts) {
  const auto checkins = synth_checkins(opts);
  return build_corpus(checkins, opts.train_frac).corpus;
}

}  // namespace stpoi
