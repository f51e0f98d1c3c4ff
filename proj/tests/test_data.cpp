#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "stpoi/data.hpp"
#include "stpoi/errors.hpp"
#include "stpoi/eval.hpp"
#include "test_support.hpp"

using namespace stpoi;

namespace {

CheckIn rec(std::string user, std::string poi, std::int64_t ts, double lat = 0.0, double lon = 0.0) {
  return {std::move(user), std::move(poi), ts, lat, lon};
}

std::vector<CheckIn> visits(const std::string& user, const std::vector<std::string>& pois,
                            std::int64_t start = 0) {
  std::vector<CheckIn> out;
  for (std::size_t k = 0; k < pois.size(); ++k) {
    out.push_back(rec(user, pois[k], start + static_cast<std::int64_t>(k) * 3600));
  }
  return out;
}

void append(std::vector<CheckIn>& a, const std::vector<CheckIn>& b) { a.insert(a.end(), b.begin(), b.end()); }

std::set<std::string> users_of(const std::vector<CheckIn>& c) {
  std::set<std::string> s;
  for (const auto& r : c) s.insert(r.user);
  return s;
}

// Ranks POIs by how often the user visited them in the training split.
class FrequencyRecommender : public Recommender {
 public:
  explicit FrequencyRecommender(const Corpus& c) : corpus_(c) {}
  std::size_t vocab_size() const override { return corpus_.vocab_size(); }
  std::unique_ptr<ScoringSession> start(std::size_t user) const override {
    std::vector<double> counts(vocab_size(), 0.0);
    for (const auto& s : corpus_.users[user].train()) counts[s.poi] += 1.0;
    return std::make_unique<Session>(std::move(counts));
  }

 private:
  struct Session : ScoringSession {
    explicit Session(std::vector<double> c) : counts(std::move(c)) {}
    void observe(const TransitionTriple&, std::span<double> scores) override {
      std::copy(counts.begin(), counts.end(), scores.begin());
    }
    std::vector<double> counts;
  };
  const Corpus& corpus_;
};

}  // namespace

TEST_CASE("parse a SNAP line") {
  const auto r = parse_checkin_line("0\t2010-10-19T23:55:27Z\t30.23\t-97.79\t22847", CheckinFormat::snap);
  REQUIRE(r.has_value());
  CHECK(r->user == "0");
  CHECK(r->poi == "22847");
  CHECK(r->ts == 1287532527);
  CHECK(r->lat == 30.23);
  CHECK(r->lon == -97.79);

  CHECK_FALSE(parse_checkin_line("0\t2010-10-19T23:55:27Z\t91.0\t-97.79\t22847", CheckinFormat::snap));
  CHECK_FALSE(parse_checkin_line("0\t2010-10-19T23:55:27Z\t30.0\t-180.5\t22847", CheckinFormat::snap));
  CHECK_FALSE(parse_checkin_line("0\t2010-13-19T23:55:27Z\t30.0\t-97.0\t22847", CheckinFormat::snap));
  CHECK_FALSE(parse_checkin_line("0\t2010-10-19T23:55:27Z\t30.0\t-97.0", CheckinFormat::snap));
  CHECK_FALSE(parse_checkin_line("0\t2010-10-19T23:55:27Z\tnan\t-97.0\t1", CheckinFormat::snap));
}

TEST_CASE("ISO-8601 timestamps") {
  CHECK(parse_iso8601_utc("1970-01-01T00:00:00Z") == 0);
  CHECK(parse_iso8601_utc("2010-10-19T23:55:27Z") == 1287532527);
  CHECK(parse_iso8601_utc("2010-10-19T23:55:27.250Z") == 1287532527);
  CHECK(parse_iso8601_utc("2010-10-19T23:55:27+00:00") == 1287532527);
  CHECK(parse_iso8601_utc("2012-02-29T00:00:00Z") == 1330473600);
  CHECK_FALSE(parse_iso8601_utc("2011-02-29T00:00:00Z"));
  CHECK_FALSE(parse_iso8601_utc("2010-10-19T23:55:27+02:00"));
  CHECK_FALSE(parse_iso8601_utc("yesterday"));
}

TEST_CASE("loading check-in streams") {
  std::istringstream ok(
      "0\t2010-10-19T23:55:27Z\t30.23\t-97.79\t22847\n"
      "\n"
      "0\t2010-10-18T22:17:43Z\t30.26\t-97.76\t420315\n"
      "1\t2010-10-17T23:42:03Z\t91.0\t-97.76\t316637\n");
  const auto r = parse_checkins(ok, CheckinFormat::snap);
  CHECK(r.checkins.size() == 2);
  CHECK(r.lines == 3);
  CHECK(r.malformed == 1);
  CHECK(r.malformed_lines == std::vector<std::size_t>{4});
  CHECK(r.warnings.size() == 1);

  std::istringstream empty("");
  const auto e = parse_checkins(empty, CheckinFormat::snap);
  CHECK(e.checkins.empty());
  CHECK(e.warnings.size() == 1);

  std::istringstream bad("garbage\nmore garbage\n0\t2010-10-19T23:55:27Z\t30.23\t-97.79\t1\n");
  try {
    parse_checkins(bad, CheckinFormat::snap);
    FAIL("expected a format error");
  } catch (const FormatError& err) {
    CHECK(std::string(err.what()).find("line 1 2") != std::string::npos);
  }

  std::istringstream csv(
      "user,poi,timestamp,lat,lon\n"
      "u1,p9,1287532527,1.30,103.8\n"
      "u1,p8,2010-10-19T23:55:27Z,1.31,103.9\n");
  const auto c = parse_checkins(csv, CheckinFormat::csv);
  REQUIRE(c.checkins.size() == 2);
  CHECK(c.malformed == 0);
  CHECK(c.checkins[0] == rec("u1", "p9", 1287532527, 1.30, 103.8));
  CHECK(c.checkins[1].ts == 1287532527);

  CHECK_THROWS_AS(load_checkins("/nonexistent/checkins.txt", CheckinFormat::snap), IoError);
}

TEST_CASE("cleaning with the default thresholds") {
  std::vector<CheckIn> data;
  std::vector<std::string> ten;
  for (int k = 0; k < 10; ++k) ten.push_back("q" + std::to_string(k));
  for (int u = 0; u < 10; ++u) append(data, visits("u" + std::to_string(u), ten));
  const auto settled = clean(data);
  CHECK(settled == data);

  append(data, visits("short", std::vector<std::string>(ten.begin(), ten.begin() + 9)));
  const auto cleaned = clean(data);
  CHECK(users_of(cleaned).count("short") == 0);
  CHECK(cleaned.size() == 100);
}

TEST_CASE("cleaning iterates to a fixed point") {
  // p3 and p5 fail the POI rule, which leaves D with one record; losing D
  // leaves p4 with a single user, which in turn drops C. Only A and B remain.
  std::vector<CheckIn> data;
  append(data, visits("A", {"p1", "p2", "p1"}));
  append(data, visits("B", {"p1", "p2", "p2"}));
  append(data, visits("C", {"p2", "p3", "p4", "p4"}));
  append(data, visits("D", {"p4", "p5", "p5"}));
  const CleanOptions opts{3, 2};
  const auto out = clean(data, opts);
  CHECK(users_of(out) == std::set<std::string>{"A", "B"});
  CHECK(out.size() == 6);
  CHECK(clean(out, opts) == out);

  std::map<std::string, std::size_t> per_user;
  std::map<std::string, std::set<std::string>> poi_users;
  for (const auto& r : out) {
    ++per_user[r.user];
    poi_users[r.poi].insert(r.user);
  }
  for (const auto& [u, n] : per_user) CHECK(n >= 3);
  for (const auto& [p, us] : poi_users) CHECK(us.size() >= 2);
}

TEST_CASE("haversine") {
  const GeoPoint a{30.23, -97.79}, b{1.3, 103.8};
  CHECK(haversine_km(a, a) == 0.0);
  CHECK(std::abs(haversine_km({0, 0}, {90, 0}) - 10007.543398010286) < 1e-6);
  CHECK(haversine_km(a, b) == haversine_km(b, a));
  CHECK(haversine_km({0, 0}, {0, 180}) == doctest::Approx(6371.0 * M_PI).epsilon(1e-12));
}

TEST_CASE("split rule") {
  CHECK(split_point(10, 0.7) == 7);
  CHECK(split_point(2, 0.7) == 1);
  CHECK(split_point(3, 0.7) == 2);
  CHECK(split_point(100, 0.7) == 70);
  CHECK(split_point(5, 0.99) == 4);
  CHECK_THROWS_AS(split_point(5, 1.0), PreconditionError);
}

TEST_CASE("building a corpus") {
  std::vector<CheckIn> data;
  for (int k = 9; k >= 0; --k) data.push_back(rec("ten", "v" + std::to_string(k % 4), k * 7200, 0.0, 0.01 * k));
  data.push_back(rec("pair", "a", 0, 10.0, 10.0));
  data.push_back(rec("pair", "b", 5 * 3600, 10.0, 10.0));
  data.push_back(rec("solo", "z", 0));
  // Equal timestamps keep input order.
  data.push_back(rec("tie", "a", 100));
  data.push_back(rec("tie", "b", 100));
  data.push_back(rec("tie", "v1", 50));

  const auto built = build_corpus(data);
  const Corpus& c = built.corpus;
  CHECK(built.warnings.size() == 1);
  REQUIRE(c.users.size() == 3);

  const auto& ten = c.users[0];
  CHECK(ten.user == "ten");
  CHECK(ten.steps.size() == 10);
  CHECK(ten.n_train == 7);
  CHECK(ten.test().size() == 3);
  for (std::size_t t = 0; t + 1 < ten.steps.size(); ++t) {
    CHECK(ten.steps[t].dt == 2.0);
    CHECK(ten.steps[t].dd > 0.0);
  }
  CHECK(ten.steps.back().dt == 0.0);

  const auto& pair = c.users[1];
  CHECK(pair.n_train == 1);
  CHECK(pair.test().size() == 1);
  CHECK(pair.steps[0].dt == 5.0);
  CHECK(pair.steps[0].dd == 0.0);

  const auto& tie = c.users[2];
  CHECK(c.vocab[tie.steps[0].poi] == "v1");
  CHECK(c.vocab[tie.steps[1].poi] == "a");
  CHECK(c.vocab[tie.steps[2].poi] == "b");

  // Vocabulary by first appearance in the input; "z" belongs to a dropped user.
  CHECK(c.vocab == std::vector<std::string>{"v1", "v0", "v3", "v2", "a", "b"});
  for (const auto& u : c.users) {
    for (const auto& s : u.steps) {
      CHECK(s.poi < c.vocab_size());
      CHECK(s.dt >= 0.0);
      CHECK(s.dd >= 0.0);
    }
  }

  CHECK(build_corpus(data).corpus == c);
}

TEST_CASE("corpus cache round trip") {
  const Corpus c = synth_corpus({.seed = 3, .n_users = 12, .n_pois = 20});
  std::stringstream buf;
  write_corpus(c, buf);
  CHECK(read_corpus(buf) == c);

  testing::TempDir dir;
  save_corpus(c, dir / "c.bin");
  CHECK(load_corpus(dir / "c.bin") == c);
  CHECK(corpus_hash(c).size() == 16);
  CHECK(corpus_hash(c) == corpus_hash(load_corpus(dir / "c.bin")));

  std::stringstream junk("not a corpus");
  CHECK_THROWS_AS(read_corpus(junk), FormatError);
}

TEST_CASE("synthetic corpora") {
  const SynthOptions opts{.seed = 7};
  const Corpus a = synth_corpus(opts);
  const Corpus b = synth_corpus(opts);
  CHECK(a == b);
  std::stringstream sa, sb;
  write_corpus(a, sa);
  write_corpus(b, sb);
  CHECK(sa.str() == sb.str());
  CHECK(a.users.size() == 50);
  CHECK(a.vocab_size() <= 40);
  CHECK(synth_corpus({.seed = 8}) != a);

  const Corpus single = synth_corpus({.seed = 1, .n_users = 1, .n_pois = 1});
  CHECK(single.vocab_size() == 1);
  for (const auto& s : single.users.at(0).steps) CHECK(s.poi == 0);

  const Corpus inter = synth_corpus({.seed = 2, .pattern = SynthPattern::interval});
  CHECK(inter.users.size() == 50);
}

TEST_CASE("training-frequency predictor on the periodic corpus") {
  const Corpus c = synth_corpus({.seed = 5, .n_users = 50, .n_pois = 40, .cycle_length = 3});
  const auto m = evaluate(FrequencyRecommender(c), c, {});
  CHECK(std::abs(m.acc_at(1) - 1.0 / 3.0) < 0.05);
}
