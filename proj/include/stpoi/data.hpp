#pragma once

// Check-in ingestion and the per-user transition sequences the models
// consume.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stpoi {

struct GeoPoint {
  double lat = 0.0;  // degrees, [-90, 90]
  double lon = 0.0;  // degrees, [-180, 180]

  bool operator==(const GeoPoint&) const = default;
};

inline constexpr double kEarthRadiusKm = 6371.0;

// Great-circle distance in kilometers.
double haversine_km(GeoPoint a, GeoPoint b);

struct CheckIn {
  std::string user;
  std::string poi;
  std::int64_t ts = 0;  // seconds since the Unix epoch, UTC
  double lat = 0.0;
  double lon = 0.0;

  GeoPoint location() const { return {lat, lon}; }
  bool operator==(const CheckIn&) const = default;
};

enum class CheckinFormat { snap, csv };

CheckinFormat parse_checkin_format(std::string_view name);

// Parses "YYYY-MM-DDTHH:MM:SSZ" (fractional seconds and a "+00:00" suffix
// are accepted too).
std::optional<std::int64_t> parse_iso8601_utc(std::string_view text);

// One record, or nullopt when the line is malformed.
//   snap: user \t time(ISO-8601 Z) \t lat \t lon \t poi
//   csv:  user,poi,timestamp,lat,lon   (timestamp: epoch seconds or ISO-8601)
std::optional<CheckIn> parse_checkin_line(std::string_view line, CheckinFormat format);

struct LoadResult {
  std::vector<CheckIn> checkins;
  std::size_t lines = 0;      // non-blank lines seen (header excluded)
  std::size_t malformed = 0;
  std::vector<std::size_t> malformed_lines;  // first few 1-based line numbers
  std::vector<std::string> warnings;
};

// Throws IoError if the file cannot be read and FormatError when more than
// half of the lines are malformed.
LoadResult load_checkins(const std::filesystem::path& path, CheckinFormat format);
LoadResult parse_checkins(std::istream& in, CheckinFormat format);

struct CleanOptions {
  std::size_t min_user_checkins = 10;
  std::size_t min_poi_users = 10;
};

// Drops users with too few check-ins and POIs with too few distinct users,
// repeating until neither rule removes anything. Record order is kept.
std::vector<CheckIn> clean(std::vector<CheckIn> checkins, const CleanOptions& opts = {});

struct DatasetStats {
  std::size_t users = 0;
  std::size_t pois = 0;
  std::size_t checkins = 0;
  double density = 0.0;  // checkins / (users * pois)
};

DatasetStats dataset_stats(std::span<const CheckIn> checkins);

struct TransitionTriple {
  std::uint32_t poi = 0;
  double dt = 0.0;  // hours until the next record of the same user
  double dd = 0.0;  // km to the next record of the same user

  bool operator==(const TransitionTriple&) const = default;
};

// One user's chronologically ordered records. steps[t] carries the POI of
// record t and the intervals toward record t + 1; the last step only ever
// serves as a target and carries zero intervals. The first n_train records
// form the training split, the rest the test split.
struct UserSequence {
  std::string user;
  std::vector<TransitionTriple> steps;
  std::size_t n_train = 0;

  std::span<const TransitionTriple> train() const { return {steps.data(), n_train}; }
  std::span<const TransitionTriple> test() const {
    return {steps.data() + n_train, steps.size() - n_train};
  }
  std::size_t train_checkins() const { return n_train; }
  // Model input/target pairs inside the training split.
  std::size_t train_transitions() const { return n_train < 2 ? 0 : n_train - 1; }

  bool operator==(const UserSequence&) const = default;
};

struct Corpus {
  std::vector<std::string> vocab;        // dense POI index -> raw id
  std::vector<GeoPoint> poi_locations;   // first observed location per POI
  std::vector<UserSequence> users;

  std::size_t vocab_size() const { return vocab.size(); }
  std::size_t test_instances() const;

  bool operator==(const Corpus&) const = default;
};

// Size of the training split for a user with `records` check-ins:
// ceil(train_frac * records) clamped to [1, records - 1], so every user keeps
// at least one record on each side. 10 -> 7, 2 -> 1.
std::size_t split_point(std::size_t records, double train_frac);

struct BuildResult {
  Corpus corpus;
  std::vector<std::string> warnings;
};

// Groups by user (first-appearance order), stable-sorts each user's records
// by timestamp, splits chronologically and emits transition triples. Dense
// POI indices are assigned in order of first appearance in `checkins`.
BuildResult build_corpus(std::span<const CheckIn> checkins, double train_frac = 0.7);

enum class SynthPattern {
  // Each user cycles through a few POIs of a home cluster at a near-constant
  // period, with rare jumps to a distant POI.
  periodic,
  // Each user alternates between a home and an away cluster. Short, local
  // gaps continue the current cluster's cycle; long, distant gaps switch to
  // the other cluster. The next POI is only predictable from the intervals.
  interval,
};

SynthPattern parse_synth_pattern(std::string_view name);
std::string_view to_string(SynthPattern p);

struct SynthOptions {
  std::uint64_t seed = 1;
  std::size_t n_users = 50;
  std::size_t n_pois = 40;
  SynthPattern pattern = SynthPattern::periodic;
  std::size_t cycle_length = 3;
  std::size_t checkins_per_user = 30;
  double jump_prob = 0.01;  // periodic only
  double train_frac = 0.7;
};

// Deterministic synthetic check-ins; the same options give identical output.
std::vector<CheckIn> synth_checkins(const SynthOptions& opts);
Corpus synth_corpus(const SynthOptions& opts);

// Corpus cache: versioned little-endian binary, see README.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);
void write_corpus(const Corpus& corpus, std::ostream& out);
Corpus read_corpus(std::istream& in);

// FNV-1a over the serialized corpus, as 16 hex digits.
std::string corpus_hash(const Corpus& corpus);

}  // namespace stpoi
