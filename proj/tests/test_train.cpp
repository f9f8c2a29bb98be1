#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "shine/train.hpp"
#include "test_util.hpp"

#include <filesystem>
#include <fstream>

using namespace shine;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("shine_train_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small fast corpus: 25 Hz, 8 channels, 60 s sessions.
std::filesystem::path make_corpus(const std::string& name, int n_sessions, double snr = 20.0) {
  const auto root = temp_dir(name);
  for (int i = 0; i < n_sessions; ++i) {
    SynthConfig cfg;
    cfg.session_id = "s" + std::to_string(100 + i);
    cfg.channels = 8;
    cfg.duration_s = 60.0;
    cfg.rate_hz = 25.0;
    cfg.snr = snr;
    write_session(synth_session(cfg, 1000 + static_cast<std::uint64_t>(i)), root / cfg.session_id);
  }
  return root;
}

ModelConfig small_model(int in_channels) {
  ModelConfig cfg;
  cfg.in_channels = in_channels;
  cfg.d_init = 8;
  cfg.n_blocks = 2;
  cfg.block_width = 8;
  cfg.lstm_hidden = 6;
  cfg.seed = 5;
  return cfg;
}

TrainConfig small_train() {
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.batch_size = 4;
  cfg.n_val_sessions = 1;
  cfg.seed = 9;
  return cfg;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("mean_binary_pearson fixtures") {
  VecF t(4);
  t << 0, 1, 0, 1;

  SUBCASE("exact prediction gives 1") {
    CHECK(mean_binary_pearson({t}, {t}) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("negated prediction gives -1") {
    CHECK(mean_binary_pearson({(-t).eval()}, {t}) == doctest::Approx(-1.0).epsilon(1e-6));
  }
  SUBCASE("window mean: 0.6 and 1.0 average to 0.8") {
    // corr(p, t) = 0.6 by construction: p = 0.6*z(t) + 0.8*orthogonal unit
    VecF z(4), orth(4);
    z << -1, 1, -1, 1;
    orth << -1, -1, 1, 1;  // orthogonal to z, zero mean
    const VecF p = 0.6f * z + 0.8f * orth;
    const double expected = 0.5 * (0.6 + 1.0);
    CHECK(mean_binary_pearson({p, t}, {t, t}) == doctest::Approx(expected).epsilon(1e-5));
  }
  SUBCASE("constant-target windows are skipped and counted") {
    const VecF flat = VecF::Ones(4);
    int skipped = -1;
    CHECK(mean_binary_pearson({t, t}, {t, flat}, &skipped) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(skipped == 1);
  }
  SUBCASE("all windows degenerate") {
    const VecF flat = VecF::Ones(4);
    CHECK_THROWS_WITH_AS(mean_binary_pearson({t}, {flat}), doctest::Contains("AllWindowsDegenerate"),
                         Error);
  }
}

TEST_CASE("one AdamW step at small lr strictly decreases a batch's loss") {
  const auto cfg = small_model(6);
  ShineModel model(cfg);
  Rng rng(13);
  std::vector<MatF> megs, targets;
  for (int i = 0; i < 3; ++i) {
    megs.push_back(test::random_matrix_f(rng, 6, 128));
    MatF t = test::random_matrix_f(rng, 1, 128);
    // piecewise-constant target so it resembles labels
    for (Eigen::Index j = 0; j < t.cols(); ++j) t(0, j) = (j / 16) % 2 == 0 ? 0.0f : 1.0f;
    targets.push_back(t);
  }

  const auto batch_loss = [&]() {
    double sum = 0.0;
    for (std::size_t i = 0; i < megs.size(); ++i)
      sum += neg_pearson_loss<float>(model.forward(megs[i]), targets[i]);
    return sum / static_cast<double>(megs.size());
  };

  const double before = batch_loss();
  AdamW opt(model.parameters(), 1e-4, 0.0);
  model.zero_grad();
  for (std::size_t i = 0; i < megs.size(); ++i) {
    const MatF out = model.forward(megs[i], true);
    const auto loss = neg_pearson_loss_grad<float>(out, targets[i]);
    model.backward((loss.grad / 3.0f).eval());
  }
  clip_grad_norm(model.parameters(), 1.0);
  opt.step();
  const double after = batch_loss();
  CHECK(after < before);
}

TEST_CASE("clip_grad_norm bounds the global norm") {
  auto cfg = small_model(6);
  ShineModel model(cfg);
  Rng rng(3);
  for (auto* t : model.parameters()) {
    t->zero_grad();
    t->grad.setConstant(0.5f);
  }
  const double before = clip_grad_norm(model.parameters(), 1.0);
  CHECK(before > 1.0);
  double sq = 0.0;
  for (const auto* t : model.parameters()) sq += t->grad.cast<double>().squaredNorm();
  CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.max_epochs = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("InvalidConfig"), Error);
  cfg = TrainConfig{};
  cfg.lr = 0.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("InvalidConfig"), Error);

  const std::string round_trip = train_config_to_json(TrainConfig{});
  const TrainConfig parsed = train_config_from_json(round_trip);
  CHECK(parsed.lr == 1e-3);
  CHECK(parsed.weight_decay == 0.01);
  CHECK(parsed.max_epochs == 20);
}

TEST_CASE("training requires enough sessions") {
  const auto root = make_corpus("toofew", 2);
  const auto run = temp_dir("toofew_run");
  TrainConfig tc = small_train();
  tc.n_val_sessions = 8;
  CHECK_THROWS_WITH_AS(train(small_model(8), tc, root, run), doctest::Contains("TooFewSessions"),
                       Error);
  std::filesystem::remove_all(root);
  std::filesystem::remove_all(run);
}

TEST_CASE("training runs, writes artifacts, and is deterministic") {
  const auto root = make_corpus("det", 4);
  const auto run1 = temp_dir("det_run1");
  const auto run2 = temp_dir("det_run2");

  const auto report1 = train(small_model(8), small_train(), root, run1);
  const auto report2 = train(small_model(8), small_train(), root, run2);

  CHECK(report1.epochs_run == 2);
  CHECK(report1.train_loss == report2.train_loss);
  CHECK(report1.val_pearson == report2.val_pearson);
  CHECK(report1.best_epoch == report2.best_epoch);
  CHECK(file_bytes(run1 / "best.ckpt") == file_bytes(run2 / "best.ckpt"));
  CHECK(file_bytes(run1 / "last.ckpt") == file_bytes(run2 / "last.ckpt"));
  CHECK(file_bytes(run1 / "metrics.csv") == file_bytes(run2 / "metrics.csv"));

  CHECK(std::filesystem::exists(run1 / "config.json"));

  // Validation split never feeds training windows.
  std::vector<std::string> overlap;
  for (const auto& id : report1.split.val_sessions)
    for (const auto& t : report1.split.train_sessions)
      if (id == t) overlap.push_back(id);
  CHECK(overlap.empty());

  // Checkpoint reload reproduces the best validation Pearson bit-for-bit.
  ShineModel best = ShineModel::load(run1 / "best.ckpt");
  std::vector<TrainingWindow> val_windows;
  for (const auto& id : report1.split.val_sessions) {
    auto s = load_session(root / id);
    zscore_channels(s);
    auto w = make_windows(s, 30.0, 30.0, TargetMode::kStandard);
    val_windows.insert(val_windows.end(), w.begin(), w.end());
  }
  const double replayed = validate(best, val_windows);
  CHECK(replayed == report1.val_pearson[static_cast<std::size_t>(report1.best_epoch)]);

  std::filesystem::remove_all(root);
  std::filesystem::remove_all(run1);
  std::filesystem::remove_all(run2);
}

// Auxiliary rows must not be able to silently replace the primary signal:
// with pure-noise aux rows, extended-mode binary validation converges to
// standard-mode behavior. Both arms share config and run to a budget where
// the noise arm has converged.
TEST_CASE("extended mode with noise aux rows degrades to standard behavior") {
  const auto root = temp_dir("noiseaux");
  Rng noise_rng(5);
  for (int i = 0; i < 4; ++i) {
    SynthConfig cfg;
    cfg.session_id = "s" + std::to_string(i);
    cfg.channels = 8;
    cfg.duration_s = 90.0;
    cfg.rate_hz = 25.0;
    cfg.snr = 20.0;
    auto s = synth_session(cfg, 300 + static_cast<std::uint64_t>(i));
    for (Eigen::Index t = 0; t < s.envelope->size(); ++t)
      (*s.envelope)[t] = static_cast<float>(noise_rng.normal());
    for (Eigen::Index r = 0; r < s.mel->rows(); ++r)
      for (Eigen::Index t = 0; t < s.mel->cols(); ++t)
        (*s.mel)(r, t) = static_cast<float>(noise_rng.normal());
    write_session(s, root / cfg.session_id);
  }

  ModelConfig mc = small_model(8);
  mc.seed = 3;
  TrainConfig tc;
  tc.max_epochs = 24;
  tc.lr = 2e-3;
  tc.batch_size = 4;
  tc.n_val_sessions = 1;
  tc.seed = 3;
  tc.patience = 0;
  tc.stride_seconds = 15.0;

  const auto run_std = temp_dir("noiseaux_std");
  const auto std_report = train(mc, tc, root, run_std);
  tc.mode = TargetMode::kExtended;
  const auto run_ext = temp_dir("noiseaux_ext");
  const auto ext_report = train(mc, tc, root, run_ext);

  CAPTURE(std_report.best_val);
  CAPTURE(ext_report.best_val);
  CHECK(std::abs(std_report.best_val - ext_report.best_val) <= 0.05);

  std::filesystem::remove_all(root);
  std::filesystem::remove_all(run_std);
  std::filesystem::remove_all(run_ext);
}

TEST_CASE("extended mode trains against 12-row targets") {
  const auto root = make_corpus("ext", 3);
  const auto run = temp_dir("ext_run");
  TrainConfig tc = small_train();
  tc.max_epochs = 1;
  tc.mode = TargetMode::kExtended;
  const auto report = train(small_model(8), tc, root, run);
  CHECK(report.epochs_run == 1);
  ShineModel m = ShineModel::load(report.last_checkpoint);
  CHECK(m.config().out_channels == 12);
  std::filesystem::remove_all(root);
  std::filesystem::remove_all(run);
}
