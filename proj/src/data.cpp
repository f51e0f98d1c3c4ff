#include "stpoi/data.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "binio.hpp"
#include "stpoi/errors.hpp"

namespace stpoi {

double haversine_km(GeoPoint a, GeoPoint b) {
  constexpr double deg = 3.14159265358979323846 / 180.0;
  const double lat1 = a.lat * deg;
  const double lat2 = b.lat * deg;
  const double s_lat = std::sin((lat2 - lat1) / 2.0);
  const double s_lon = std::sin((b.lon - a.lon) * deg / 2.0);
  const double h = s_lat * s_lat + std::cos(lat1) * std::cos(lat2) * s_lon * s_lon;
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(std::min(1.0, h)));
}

CheckinFormat parse_checkin_format(std::string_view name) {
  if (name == "snap") return CheckinFormat::snap;
  if (name == "csv") return CheckinFormat::csv;
  throw ConfigError("unknown check-in format '" + std::string(name) + "'");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t' ||
                        s.back() == '\n')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<int> parse_digits(std::string_view s) {
  if (s.empty()) return std::nullopt;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
  }
  return parse_number<int>(s);
}

std::optional<CheckIn> make_checkin(std::string_view user, std::string_view poi,
                                    std::optional<std::int64_t> ts, std::string_view lat_s,
                                    std::string_view lon_s) {
  user = trim(user);
  poi = trim(poi);
  const auto lat = parse_number<double>(lat_s);
  const auto lon = parse_number<double>(lon_s);
  if (user.empty() || poi.empty() || !ts || !lat || !lon) return std::nullopt;
  if (!std::isfinite(*lat) || !std::isfinite(*lon)) return std::nullopt;
  if (*lat < -90.0 || *lat > 90.0 || *lon < -180.0 || *lon > 180.0) return std::nullopt;
  return CheckIn{std::string(user), std::string(poi), *ts, *lat, *lon};
}

}  // namespace

std::optional<std::int64_t> parse_iso8601_utc(std::string_view text) {
  using namespace std::chrono;
  const std::string_view s = trim(text);
  // YYYY-MM-DDTHH:MM:SS at minimum
  if (s.size() < 19 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ') ||
      s[13] != ':' || s[16] != ':') {
    return std::nullopt;
  }
  const auto y = parse_digits(s.substr(0, 4));
  const auto mo = parse_digits(s.substr(5, 2));
  const auto d = parse_digits(s.substr(8, 2));
  const auto hh = parse_digits(s.substr(11, 2));
  const auto mm = parse_digits(s.substr(14, 2));
  const auto ss = parse_digits(s.substr(17, 2));
  if (!y || !mo || !d || !hh || !mm || !ss) return std::nullopt;
  if (*hh > 23 || *mm > 59 || *ss > 60) return std::nullopt;

  std::string_view rest = s.substr(19);
  if (!rest.empty() && rest.front() == '.') {
    rest.remove_prefix(1);
    while (!rest.empty() && rest.front() >= '0' && rest.front() <= '9') rest.remove_prefix(1);
  }
  if (!(rest == "Z" || rest.empty() || rest == "+00:00" || rest == "+0000")) return std::nullopt;

  const year_month_day ymd{year{*y}, month{static_cast<unsigned>(*mo)},
                           day{static_cast<unsigned>(*d)}};
  if (!ymd.ok()) return std::nullopt;
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400 + *hh * 3600 + *mm * 60 + *ss;
}

std::optional<CheckIn> parse_checkin_line(std::string_view line, CheckinFormat format) {
  line = trim(line);
  if (format == CheckinFormat::snap) {
    const auto f = split(line, '\t');
    if (f.size() != 5) return std::nullopt;
    return make_checkin(f[0], f[4], parse_iso8601_utc(f[1]), f[2], f[3]);
  }
  const auto f = split(line, ',');
  if (f.size() != 5) return std::nullopt;
  std::optional<std::int64_t> ts = parse_number<std::int64_t>(f[2]);
  if (!ts) ts = parse_iso8601_utc(f[2]);
  return make_checkin(f[0], f[1], ts, f[3], f[4]);
}

LoadResult parse_checkins(std::istream& in, CheckinFormat format) {
  LoadResult r;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto rec = parse_checkin_line(line, format);
    if (first && !rec && format == CheckinFormat::csv) {
      first = false;  // header row
      continue;
    }
    first = false;
    ++r.lines;
    if (rec) {
      r.checkins.push_back(std::move(*rec));
    } else {
      ++r.malformed;
      if (r.malformed_lines.size() < 10) r.malformed_lines.push_back(line_no);
    }
  }
  if (in.bad()) throw IoError("read error after line " + std::to_string(line_no));

  if (r.lines == 0) {
    r.warnings.push_back("input contains no check-in records");
    return r;
  }
  if (r.malformed * 2 > r.lines) {
    std::ostringstream msg;
    msg << r.malformed << " of " << r.lines << " lines are malformed (e.g. line";
    for (std::size_t n : r.malformed_lines) msg << ' ' << n;
    msg << ')';
    throw FormatError(msg.str());
  }
  if (r.malformed > 0) {
    std::ostringstream msg;
    msg << "skipped " << r.malformed << " malformed line(s), first at line "
        << r.malformed_lines.front();
    r.warnings.push_back(msg.str());
  }
  return r;
}

LoadResult load_checkins(const std::filesystem::path& path, CheckinFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_checkins(in, format);
}

std::vector<CheckIn> clean(std::vector<CheckIn> checkins, const CleanOptions& opts) {
  while (true) {
    std::unordered_map<std::string, std::size_t> per_user;
    std::unordered_map<std::string, std::unordered_set<std::string>> poi_users;
    for (const auto& c : checkins) {
      ++per_user[c.user];
      poi_users[c.poi].insert(c.user);
    }
    const auto before = checkins.size();
    std::erase_if(checkins, [&](const CheckIn& c) {
      return per_user[c.user] < opts.min_user_checkins ||
             poi_users[c.poi].size() < opts.min_poi_users;
    });
    if (checkins.size() == before) return checkins;
  }
}

DatasetStats dataset_stats(std::span<const CheckIn> checkins) {
  std::unordered_set<std::string_view> users, pois;
  for (const auto& c : checkins) {
    users.insert(c.user);
    pois.insert(c.poi);
  }
  DatasetStats s;
  s.users = users.size();
  s.pois = pois.size();
  s.checkins = checkins.size();
  if (s.users > 0 && s.pois > 0) {
    s.density = static_cast<double>(s.checkins) /
                (static_cast<double>(s.users) * static_cast<double>(s.pois));
  }
  return s;
}

std::size_t Corpus::test_instances() const {
  std::size_t n = 0;
  for (const auto& u : users) n += u.test().size();
  return n;
}

std::size_t split_point(std::size_t records, double train_frac) {
  if (records < 2) throw PreconditionError("a split needs at least two records");
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw PreconditionError("train fraction must lie in (0, 1)");
  }
  // The epsilon keeps exact products such as 0.7 * 10 from rounding up.
  const double raw = std::ceil(train_frac * static_cast<double>(records) - 1e-9);
  const auto n = static_cast<std::size_t>(std::max(raw, 1.0));
  return std::clamp<std::size_t>(n, 1, records - 1);
}

BuildResult build_corpus(std::span<const CheckIn> checkins, double train_frac) {
  BuildResult r;
  std::unordered_map<std::string_view, std::size_t> user_index;
  std::vector<std::vector<std::size_t>> records;
  for (std::size_t k = 0; k < checkins.size(); ++k) {
    const auto [it, inserted] = user_index.try_emplace(checkins[k].user, records.size());
    if (inserted) records.emplace_back();
    records[it->second].push_back(k);
  }

  std::vector<bool> keep(checkins.size(), false);
  std::size_t dropped = 0;
  for (const auto& recs : records) {
    if (recs.size() < 2) {
      ++dropped;
      continue;
    }
    for (std::size_t k : recs) keep[k] = true;
  }
  if (dropped > 0) {
    r.warnings.push_back("dropped " + std::to_string(dropped) +
                         " user(s) with fewer than two records");
  }

  std::unordered_map<std::string_view, std::uint32_t> poi_index;
  for (std::size_t k = 0; k < checkins.size(); ++k) {
    if (!keep[k]) continue;
    const auto [it, inserted] =
        poi_index.try_emplace(checkins[k].poi, static_cast<std::uint32_t>(r.corpus.vocab.size()));
    if (inserted) {
      r.corpus.vocab.push_back(checkins[k].poi);
      r.corpus.poi_locations.push_back(checkins[k].location());
    }
  }

  for (auto recs : records) {
    if (recs.size() < 2) continue;
    std::stable_sort(recs.begin(), recs.end(), [&](std::size_t a, std::size_t b) {
      return checkins[a].ts < checkins[b].ts;
    });
    UserSequence seq;
    seq.user = checkins[recs.front()].user;
    seq.steps.reserve(recs.size());
    for (std::size_t t = 0; t < recs.size(); ++t) {
      const CheckIn& cur = checkins[recs[t]];
      TransitionTriple step{poi_index.at(cur.poi), 0.0, 0.0};
      if (t + 1 < recs.size()) {
        const CheckIn& next = checkins[recs[t + 1]];
        step.dt = static_cast<double>(next.ts - cur.ts) / 3600.0;
        step.dd = haversine_km(cur.location(), next.location());
      }
      seq.steps.push_back(step);
    }
    seq.n_train = split_point(recs.size(), train_frac);
    r.corpus.users.push_back(std::move(seq));
  }
  return r;
}

namespace {
constexpr char kCorpusMagic[9] = "STPOICRP";
constexpr std::uint32_t kCorpusVersion = 1;
}  // namespace

void write_corpus(const Corpus& corpus, std::ostream& out) {
  using namespace binio;
  write_magic(out, kCorpusMagic);
  write_u32(out, kCorpusVersion);
  write_u64(out, corpus.vocab.size());
  for (std::size_t p = 0; p < corpus.vocab.size(); ++p) {
    write_string(out, corpus.vocab[p]);
    write_f64(out, corpus.poi_locations[p].lat);
    write_f64(out, corpus.poi_locations[p].lon);
  }
  write_u64(out, corpus.users.size());
  for (const auto& u : corpus.users) {
    write_string(out, u.user);
    write_u64(out, u.n_train);
    write_u64(out, u.steps.size());
    for (const auto& s : u.steps) {
      write_u32(out, s.poi);
      write_f64(out, s.dt);
      write_f64(out, s.dd);
    }
  }
}

Corpus read_corpus(std::istream& in) {
  using namespace binio;
  expect_magic(in, kCorpusMagic, "corpus cache");
  const auto version = read_u32(in, "corpus version");
  if (version != kCorpusVersion) {
    throw FormatError("unsupported corpus cache version " + std::to_string(version));
  }
  Corpus c;
  const auto n_vocab = read_u64(in, "vocabulary size");
  c.vocab.reserve(n_vocab);
  for (std::uint64_t p = 0; p < n_vocab; ++p) {
    c.vocab.push_back(read_string(in, "vocabulary entry"));
    const double lat = read_f64(in, "POI latitude");
    const double lon = read_f64(in, "POI longitude");
    c.poi_locations.push_back({lat, lon});
  }
  const auto n_users = read_u64(in, "user count");
  for (std::uint64_t u = 0; u < n_users; ++u) {
    UserSequence seq;
    seq.user = read_string(in, "user id");
    seq.n_train = read_u64(in, "train split");
    const auto n_steps = read_u64(in, "sequence length");
    if (seq.n_train > n_steps) throw FormatError("train split exceeds sequence length");
    seq.steps.resize(n_steps);
    for (auto& s : seq.steps) {
      s.poi = read_u32(in, "POI index");
      s.dt = read_f64(in, "time interval");
      s.dd = read_f64(in, "distance interval");
      if (s.poi >= n_vocab) throw FormatError("POI index outside vocabulary");
    }
    c.users.push_back(std::move(seq));
  }
  return c;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    write_corpus(corpus, out);
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_corpus(in);
}

std::string corpus_hash(const Corpus& corpus) {
  std::ostringstream buf(std::ios::binary);
  write_corpus(corpus, buf);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : buf.str()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace stpoi
