#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "shine/dataset.hpp"
#include "shine/signal.hpp"
#include "test_util.hpp"

#include <filesystem>
#include <fstream>
#include <set>

using namespace shine;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("shine_ds_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

SessionRecord random_session(Rng& rng, const std::string& id, Eigen::Index C, Eigen::Index T,
                             double rate, bool with_aux) {
  SessionRecord s;
  s.session_id = id;
  s.rate_hz = rate;
  s.meg = test::random_matrix_f(rng, C, T);
  s.labels.resize(static_cast<std::size_t>(T));
  for (auto& l : s.labels) l = rng.uniform() < 0.6 ? 1 : 0;
  s.labels[0] = 0;
  s.labels[1] = 1;  // both classes present
  if (with_aux) {
    s.envelope = test::random_matrix_f(rng, T, 1).col(0);
    s.mel = test::random_matrix_f(rng, kMelBands, T);
  }
  return s;
}

}  // namespace

TEST_CASE("session write/load round trip is bit exact") {
  Rng rng(1);
  const auto dir = temp_dir("roundtrip");
  const auto s = random_session(rng, "sess-a", 8, 5000, 250.0, true);
  write_session(s, dir / "sess-a");
  const auto r = load_session(dir / "sess-a");

  CHECK(r.session_id == s.session_id);
  CHECK(r.rate_hz == s.rate_hz);
  CHECK(r.meg == s.meg);
  CHECK(r.labels == s.labels);
  REQUIRE(r.envelope.has_value());
  CHECK(*r.envelope == *s.envelope);
  REQUIRE(r.mel.has_value());
  CHECK(*r.mel == *s.mel);
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt and missing session files") {
  Rng rng(2);
  const auto dir = temp_dir("corrupt");
  const auto s = random_session(rng, "sess-b", 4, 1000, 250.0, false);
  write_session(s, dir / "sess-b");

  SUBCASE("meg size mismatch is CorruptFile") {
    std::ofstream(dir / "sess-b" / "meg.f32", std::ios::binary) << "tiny";
    CHECK_THROWS_WITH_AS(load_session(dir / "sess-b"), doctest::Contains("CorruptFile"), Error);
  }
  SUBCASE("missing labels is MissingField") {
    std::filesystem::remove(dir / "sess-b" / "labels.u8");
    CHECK_THROWS_WITH_AS(load_session(dir / "sess-b"), doctest::Contains("MissingField"), Error);
  }
  SUBCASE("missing meta key is MissingField") {
    std::ofstream(dir / "sess-b" / "meta.json") << "{\"session_id\": \"x\"}";
    CHECK_THROWS_WITH_AS(load_session(dir / "sess-b"), doctest::Contains("MissingField"), Error);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("make_windows start enumeration") {
  Rng rng(3);

  SUBCASE("100 s at stride 30 gives starts 0/30/60 plus end-anchored 70") {
    const auto s = random_session(rng, "w", 2, 100 * 250, 250.0, false);
    const auto windows = make_windows(s, 30.0, 30.0, TargetMode::kStandard);
    REQUIRE(windows.size() == 4);
    CHECK(windows[0].start_sample == 0);
    CHECK(windows[1].start_sample == 30 * 250);
    CHECK(windows[2].start_sample == 60 * 250);
    CHECK(windows[3].start_sample == 70 * 250);
    for (const auto& w : windows) {
      CHECK(w.meg.cols() == 30 * 250);
      CHECK(w.target.cols() == 30 * 250);
      CHECK(w.target.rows() == 1);
      CHECK(w.session_id == "w");
    }
  }
  SUBCASE("exactly one window for a 30 s session") {
    const auto s = random_session(rng, "w1", 2, 30 * 250, 250.0, false);
    const auto windows = make_windows(s, 30.0, 30.0, TargetMode::kStandard);
    REQUIRE(windows.size() == 1);
    CHECK(windows[0].start_sample == 0);
  }
  SUBCASE("20 s session is too short") {
    const auto s = random_session(rng, "w2", 2, 20 * 250, 250.0, false);
    CHECK_THROWS_WITH_AS(make_windows(s, 30.0, 30.0, TargetMode::kStandard),
                         doctest::Contains("SessionTooShort"), Error);
  }
}

TEST_CASE("every sample appears in at least one window when stride <= window") {
  Rng rng(4);
  for (const double dur : {31.7, 45.0, 61.2, 90.0}) {
    const auto T = static_cast<Eigen::Index>(dur * 50.0);
    const auto s = random_session(rng, "cov", 2, T, 50.0, false);
    const auto windows = make_windows(s, 30.0, 17.0, TargetMode::kStandard);
    std::vector<int> hits(static_cast<std::size_t>(T), 0);
    for (const auto& w : windows)
      for (Eigen::Index i = 0; i < w.meg.cols(); ++i) ++hits[static_cast<std::size_t>(w.start_sample + i)];
    CHECK(*std::min_element(hits.begin(), hits.end()) >= 1);
  }
}

TEST_CASE("extended windows carry the 12-row composite target") {
  Rng rng(5);
  const auto s = random_session(rng, "ext", 3, 40 * 250, 250.0, true);
  const auto windows = make_windows(s, 30.0, 30.0, TargetMode::kExtended);
  REQUIRE(!windows.empty());
  for (const auto& w : windows) {
    CHECK(w.target.rows() == 12);
    // Binary row is the last and matches the labels slice exactly.
    for (Eigen::Index i = 0; i < w.target.cols(); ++i)
      CHECK(w.target(11, i) == static_cast<float>(s.labels[static_cast<std::size_t>(w.start_sample + i)]));
  }

  SessionRecord no_aux = s;
  no_aux.envelope.reset();
  CHECK_THROWS_WITH_AS(make_windows(no_aux, 30.0, 30.0, TargetMode::kExtended),
                       doctest::Contains("MissingField"), Error);
}

TEST_CASE("leave_session_out_split fixture: 92 sessions, 8 held out") {
  std::vector<std::string> ids;
  for (int i = 0; i < 92; ++i) ids.push_back("sess" + std::to_string(1000 + i));
  const auto plan = leave_session_out_split(ids, 8, 7);
  CHECK(plan.val_sessions.size() == 8);
  CHECK(plan.train_sessions.size() == 84);

  const auto again = leave_session_out_split(ids, 8, 7);
  CHECK(again.val_sessions == plan.val_sessions);
  CHECK(again.train_sessions == plan.train_sessions);

  std::vector<std::string> five(ids.begin(), ids.begin() + 5);
  CHECK_THROWS_WITH_AS(leave_session_out_split(five, 8, 7), doctest::Contains("TooFewSessions"),
                       Error);
}

TEST_CASE("split is disjoint and exhaustive for 100 seeds") {
  std::vector<std::string> ids;
  for (int i = 0; i < 92; ++i) ids.push_back("s" + std::to_string(i));
  std::set<std::string> all(ids.begin(), ids.end());

  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto plan = leave_session_out_split(ids, 8, seed);
    REQUIRE(plan.val_sessions.size() == 8);
    std::set<std::string> seen;
    for (const auto& id : plan.val_sessions) CHECK(seen.insert(id).second);
    for (const auto& id : plan.train_sessions) CHECK(seen.insert(id).second);
    CHECK(seen == all);
  }
}

TEST_CASE("split round trip through JSON") {
  const auto dir = temp_dir("split");
  std::vector<std::string> ids = {"a", "b", "c", "d"};
  const auto plan = leave_session_out_split(ids, 1, 99);
  write_split(plan, dir / "split.json");
  const auto loaded = load_split(dir / "split.json");
  CHECK(loaded.seed == plan.seed);
  CHECK(loaded.train_sessions == plan.train_sessions);
  CHECK(loaded.val_sessions == plan.val_sessions);
  std::filesystem::remove_all(dir);
}

TEST_CASE("synth_session shapes and determinism") {
  SynthConfig cfg;
  cfg.session_id = "synth-0";
  cfg.channels = 32;
  cfg.duration_s = 120.0;
  cfg.rate_hz = 250.0;
  cfg.snr = 10.0;

  const auto a = synth_session(cfg, 17);
  CHECK(a.meg.rows() == 32);
  CHECK(a.meg.cols() == 30000);
  CHECK(a.labels.size() == 30000);
  CHECK(a.envelope.has_value());
  CHECK(a.mel.has_value());
  CHECK(a.meg.allFinite());

  const auto b = synth_session(cfg, 17);
  CHECK(a.meg == b.meg);
  CHECK(a.labels == b.labels);

  const auto c = synth_session(cfg, 18);
  CHECK(a.meg != c.meg);

  SynthConfig bad = cfg;
  bad.duration_s = 10.0;
  CHECK_THROWS_WITH_AS(synth_session(bad, 17), doctest::Contains("InvalidConfig"), Error);
}

TEST_CASE("synthetic speech fraction stays within [0.3, 0.9] for default config") {
  SynthConfig cfg;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = synth_session(cfg, seed);
    double frac = 0.0;
    for (const auto l : s.labels) frac += l;
    frac /= static_cast<double>(s.labels.size());
    CHECK(frac >= 0.3);
    CHECK(frac <= 0.9);
  }
}

// At infinite SNR the channels are a lag-mixed linear image of the latents,
// one of which is the label track, so a lagged least-squares decode must
// recover the labels almost perfectly.
TEST_CASE("noiseless synthetic sessions are linearly decodable") {
  SynthConfig cfg;
  cfg.channels = 32;
  cfg.duration_s = 60.0;
  cfg.rate_hz = 100.0;
  cfg.snr = std::numeric_limits<double>::infinity();
  const auto s = synth_session(cfg, 23);

  const auto T = s.n_samples();
  const auto C = s.n_channels();
  const auto max_lag = static_cast<Eigen::Index>(std::llround(0.04 * cfg.rate_hz));
  const Eigen::Index n_feat = C * (max_lag + 1);
  const Eigen::Index rows = T - max_lag;

  // Design matrix of future-shifted channel copies undoes the mixing lags.
  MatD design(rows, n_feat);
  VecD target(rows);
  for (Eigen::Index t = 0; t < rows; ++t) {
    target[t] = s.labels[static_cast<std::size_t>(t)];
    for (Eigen::Index lag = 0; lag <= max_lag; ++lag)
      for (Eigen::Index c = 0; c < C; ++c)
        design(t, lag * C + c) = s.meg(c, t + lag);
  }
  const MatD gram = design.transpose() * design + 1e-8 * MatD::Identity(n_feat, n_feat);
  const VecD w = gram.ldlt().solve(design.transpose() * target);
  const VecD decoded = design * w;
  CHECK(pearson_corr(decoded, target) > 0.99);
}
