#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "shine/model.hpp"
#include "shine/signal.hpp"
#include "test_util.hpp"

#include <filesystem>
#include <fstream>

using namespace shine;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.in_channels = 4;
  cfg.d_init = 6;
  cfg.n_blocks = 2;
  cfg.block_width = 8;
  cfg.tconv_kernel = 3;
  cfg.context_kernel = 9;
  cfg.attn_heads = 1;
  cfg.lstm_hidden = 5;
  cfg.out_channels = 1;
  cfg.seed = 11;
  return cfg;
}

MatF params_snapshot(ShineModel& m) {
  std::size_t total = 0;
  for (const auto* t : m.parameters()) total += static_cast<std::size_t>(t->size());
  MatF flat(static_cast<Eigen::Index>(total), 1);
  Eigen::Index at = 0;
  for (const auto* t : m.parameters()) {
    flat.middleRows(at, t->size()) = Eigen::Map<const VecF>(t->value.data(), t->size());
    at += t->size();
  }
  return flat;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());

  cfg.cnn_stack_layers = 4;
  CHECK_THROWS_WITH_AS(ShineModel{cfg}, doctest::Contains("InvalidConfig"), Error);

  cfg = tiny_config();
  cfg.out_channels = 3;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("InvalidConfig"), Error);

  cfg = tiny_config();
  cfg.attn_heads = 3;  // does not divide block_width 8
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("InvalidConfig"), Error);
}

TEST_CASE("initialization is deterministic per seed") {
  const auto cfg = tiny_config();
  ShineModel a(cfg), b(cfg);
  CHECK(params_snapshot(a) == params_snapshot(b));

  ModelConfig other = cfg;
  other.seed = 12;
  ShineModel c(other);
  CHECK(params_snapshot(a) != params_snapshot(c));
}

TEST_CASE("initial projection compresses in_channels through 2*d_init to d_init") {
  ModelConfig cfg = tiny_config();
  cfg.in_channels = 306;
  cfg.d_init = 64;
  ShineModel m(cfg);
  bool found_l1 = false, found_l2 = false;
  for (const auto* t : m.parameters()) {
    if (t->name == "init.l1.w") {
      CHECK(t->value.rows() == 128);
      CHECK(t->value.cols() == 306);
      found_l1 = true;
    }
    if (t->name == "init.l2.w") {
      CHECK(t->value.rows() == 64);
      CHECK(t->value.cols() == 128);
      found_l2 = true;
    }
  }
  CHECK(found_l1);
  CHECK(found_l2);
}

TEST_CASE("block input channels follow the closed-form concat arithmetic") {
  ModelConfig cfg;
  cfg.in_channels = 16;  // construction only, no forward
  cfg.seed = 1;
  ShineModel m(cfg);
  const auto channels = m.block_input_channels();
  REQUIRE(channels.size() == 6);
  CHECK(channels[0] == 64);
  for (std::size_t i = 1; i < channels.size(); ++i) CHECK(channels[i] == 192);
}

TEST_CASE("forward preserves the time dimension and output rows") {
  auto cfg = tiny_config();
  ShineModel m(cfg);
  Rng rng(3);
  for (const Eigen::Index T : {64, 200, 1000}) {
    const MatF x = test::random_matrix_f(rng, cfg.in_channels, T);
    const MatF y = m.forward(x);
    CHECK(y.rows() == 1);
    CHECK(y.cols() == T);
    CHECK(y.allFinite());
  }

  cfg.out_channels = 12;
  ShineModel ext(cfg);
  const MatF x = test::random_matrix_f(rng, cfg.in_channels, 128);
  const MatF y = ext.forward(x);
  CHECK(y.rows() == 12);
  CHECK(y.cols() == 128);
}

TEST_CASE("forward rejects bad inputs") {
  const auto cfg = tiny_config();
  ShineModel m(cfg);
  Rng rng(4);
  CHECK_THROWS_WITH_AS(m.forward(test::random_matrix_f(rng, 3, 64)),
                       doctest::Contains("ShapeMismatch"), Error);
  CHECK_THROWS_WITH_AS(m.forward(test::random_matrix_f(rng, 4, 8)),
                       doctest::Contains("SequenceTooShort"), Error);
}

TEST_CASE("forward is deterministic in inference mode") {
  const auto cfg = tiny_config();
  ShineModel m(cfg);
  Rng rng(5);
  const MatF x = test::random_matrix_f(rng, cfg.in_channels, 128);
  const MatF y1 = m.forward(x);
  const MatF y2 = m.forward(x);
  CHECK(y1 == y2);

  ShineModel m2(cfg);
  CHECK(m2.forward(x) == y1);
}

TEST_CASE("depthwise parameter count matches the closed form") {
  Rng rng(0);
  nn::Conv1d conv("probe", 192, 192, 3, /*depthwise=*/true, rng);
  std::vector<nn::Tensor*> tensors;
  conv.collect(tensors);
  long n = 0;
  for (const auto* t : tensors) n += t->size();
  CHECK(n == 192 * 3 + 192);  // weights + bias = 768

  // The model's own depthwise layers follow channels*kernel + channels.
  const auto cfg = tiny_config();
  ShineModel m(cfg);
  for (auto* t : m.parameters()) {
    if (t->name.find("tconv") != std::string::npos && t->name.ends_with(".w") &&
        t->name.find(".ln") == std::string::npos) {
      CHECK(t->value.cols() == cfg.tconv_kernel);
    }
  }
}

TEST_CASE("param_count is deterministic and monotone in lstm_hidden") {
  const auto cfg = tiny_config();
  ShineModel a(cfg), b(cfg);
  CHECK(a.param_count() == b.param_count());
  CHECK(count_params(a) == a.param_count());

  ModelConfig wider = cfg;
  wider.lstm_hidden *= 2;
  ShineModel c(wider);
  CHECK(c.param_count() > a.param_count());
}

TEST_CASE("output head is exactly linear in the final weights") {
  const auto cfg = tiny_config();
  ShineModel m(cfg);
  Rng rng(6);
  const MatF x = test::random_matrix_f(rng, cfg.in_channels, 64);
  const MatF y = m.forward(x);

  // Doubling is exact in binary floating point, so equality is bitwise.
  for (auto* t : m.parameters()) {
    if (t->name == "head.out.w" || t->name == "head.out.b") t->value *= 2.0f;
  }
  const MatF y2 = m.forward(x);
  CHECK(y2 == (2.0f * y).eval());
}

TEST_CASE("checkpoint round trip is bit exact and InvalidConfig on corrupt data") {
  const auto dir = std::filesystem::temp_directory_path() / "shine_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto cfg = tiny_config();
  ShineModel m(cfg);
  Rng rng(7);
  const MatF x = test::random_matrix_f(rng, cfg.in_channels, 96);
  const MatF y = m.forward(x);

  m.save(dir / "model.ckpt");
  ShineModel r = ShineModel::load(dir / "model.ckpt");
  CHECK(params_snapshot(m) == params_snapshot(r));
  CHECK(r.forward(x) == y);

  // Saving the reload gives identical bytes.
  r.save(dir / "model2.ckpt");
  std::ifstream f1(dir / "model.ckpt", std::ios::binary), f2(dir / "model2.ckpt", std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  std::ofstream(dir / "junk.ckpt", std::ios::binary) << "not a checkpoint";
  CHECK_THROWS_WITH_AS(ShineModel::load(dir / "junk.ckpt"), doctest::Contains("CorruptFile"), Error);
  std::filesystem::remove_all(dir);
}

// Gradients through the full network, checked as a directional derivative
// along the normalized analytic gradient of every parameter jointly. The
// loss surface is sharply curved at init, so per-entry steps large enough to
// beat float32 evaluation noise sit deep in truncation territory; the
// aligned directional probe concentrates the whole gradient's signal into
// one finite difference and resolves it to ~1e-5 relative.
TEST_CASE("model gradient matches finite differences through the tiny network") {
  const auto cfg = tiny_config();
  ShineModel m(cfg);
  Rng rng(8);
  const MatF x = test::random_matrix_f(rng, cfg.in_channels, 64);
  MatF target = test::random_matrix_f(rng, 1, 64);

  const auto loss_at = [&]() {
    return neg_pearson_loss<float>(m.forward(x, false), target);
  };

  m.zero_grad();
  const MatF out = m.forward(x, /*training=*/true);
  const auto loss = neg_pearson_loss_grad<float>(out, target);
  CHECK(loss.value == doctest::Approx(loss_at()).epsilon(1e-6));
  m.backward(loss.grad);

  const auto params = m.parameters();
  double grad_sq = 0.0;
  for (const auto* t : params) grad_sq += t->grad.cast<double>().squaredNorm();
  const double grad_norm = std::sqrt(grad_sq);
  REQUIRE(grad_norm > 0.0);

  const double h = 1e-5;
  const auto shift = [&](double amount) {
    const auto scale = static_cast<float>(amount / grad_norm);
    for (auto* t : params) t->value += scale * t->grad;
  };
  shift(h);
  const double lp = loss_at();
  shift(-2.0 * h);
  const double lm = loss_at();
  shift(h);

  const double fd = (lp - lm) / (2.0 * h);
  const double rel = std::abs(fd - grad_norm) / grad_norm;
  CAPTURE(rel);
  CHECK(rel < 1e-3);
}

// Every layer's backward formula against per-entry central differences.
// Objective: sum(weights .* layer(x)).
namespace {

template <class Fwd, class Bwd>
double layer_dx_rel_err(MatF x, const Fwd& fwd, const Bwd& bwd, const MatF& wsum) {
  fwd(x, true);
  const MatF dx = bwd(wsum);
  double num = 0.0, den = 0.0;
  Rng pick(1);
  for (int probe = 0; probe < 30; ++probe) {
    const Eigen::Index i = pick.uniform_int(x.size());
    const float orig = x.data()[i];
    const float h = 1e-3f * std::max(1.0f, std::abs(orig));
    x.data()[i] = orig + h;
    const double lp = (fwd(x, false).array() * wsum.array()).sum();
    x.data()[i] = orig - h;
    const double lm = (fwd(x, false).array() * wsum.array()).sum();
    x.data()[i] = orig;
    const double fd = (lp - lm) / (2.0 * static_cast<double>(h));
    const double an = dx.data()[i];
    num += (an - fd) * (an - fd);
    den += std::max(an * an, fd * fd);
  }
  return std::sqrt(num / std::max(den, 1e-30));
}

template <class LayerT>
double layer_param_rel_err(LayerT& layer, const MatF& x, const MatF& wsum) {
  std::vector<nn::Tensor*> tensors;
  layer.collect(tensors);
  for (auto* t : tensors) t->zero_grad();
  layer.forward(x, true);
  layer.backward(wsum);
  double num = 0.0, den = 0.0;
  Rng pick(2);
  for (auto* t : tensors) {
    for (int probe = 0; probe < 8; ++probe) {
      const Eigen::Index i = pick.uniform_int(t->value.size());
      const float orig = t->value.data()[i];
      const float h = 1e-3f * std::max(1.0f, std::abs(orig));
      t->value.data()[i] = orig + h;
      const double lp = (layer.forward(x, false).array() * wsum.array()).sum();
      t->value.data()[i] = orig - h;
      const double lm = (layer.forward(x, false).array() * wsum.array()).sum();
      t->value.data()[i] = orig;
      const double fd = (lp - lm) / (2.0 * static_cast<double>(h));
      const double an = t->grad.data()[i];
      num += (an - fd) * (an - fd);
      den += std::max(an * an, fd * fd);
    }
  }
  return std::sqrt(num / std::max(den, 1e-30));
}

}  // namespace

TEST_CASE("every layer type passes a per-entry gradient check") {
  Rng rng(7);
  constexpr double kTol = 5e-3;  // float32 central-difference noise floor

  SUBCASE("linear") {
    nn::Linear lin("lin", 5, 7, rng);
    const MatF x = test::random_matrix_f(rng, 5, 20), w = test::random_matrix_f(rng, 7, 20);
    CHECK(layer_dx_rel_err(
              x, [&](const MatF& a, bool t) { return lin.forward(a, t); },
              [&](const MatF& g) { return lin.backward(g); }, w) < kTol);
    CHECK(layer_param_rel_err(lin, x, w) < kTol);
  }
  SUBCASE("dense conv") {
    nn::Conv1d conv("c", 6, 4, 3, false, rng);
    const MatF x = test::random_matrix_f(rng, 6, 20), w = test::random_matrix_f(rng, 4, 20);
    CHECK(layer_dx_rel_err(
              x, [&](const MatF& a, bool t) { return conv.forward(a, t); },
              [&](const MatF& g) { return conv.backward(g); }, w) < kTol);
    CHECK(layer_param_rel_err(conv, x, w) < kTol);
  }
  SUBCASE("depthwise conv") {
    nn::Conv1d conv("dw", 6, 6, 5, true, rng);
    const MatF x = test::random_matrix_f(rng, 6, 20), w = test::random_matrix_f(rng, 6, 20);
    CHECK(layer_dx_rel_err(
              x, [&](const MatF& a, bool t) { return conv.forward(a, t); },
              [&](const MatF& g) { return conv.backward(g); }, w) < kTol);
    CHECK(layer_param_rel_err(conv, x, w) < kTol);
  }
  SUBCASE("layer norm") {
    nn::LayerNorm ln("ln", 6, rng);
    const MatF x = test::random_matrix_f(rng, 6, 15), w = test::random_matrix_f(rng, 6, 15);
    CHECK(layer_dx_rel_err(
              x, [&](const MatF& a, bool t) { return ln.forward(a, t); },
              [&](const MatF& g) { return ln.backward(g); }, w) < kTol);
    CHECK(layer_param_rel_err(ln, x, w) < kTol);
  }
  SUBCASE("self attention, two heads") {
    nn::SelfAttention attn("at", 8, 2, rng);
    const MatF x = test::random_matrix_f(rng, 8, 12), w = test::random_matrix_f(rng, 8, 12);
    CHECK(layer_dx_rel_err(
              x, [&](const MatF& a, bool t) { return attn.forward(a, t); },
              [&](const MatF& g) { return attn.backward(g); }, w) < kTol);
    CHECK(layer_param_rel_err(attn, x, w) < kTol);
  }
  SUBCASE("bidirectional lstm") {
    nn::BiLstm lstm("bl", 5, 4, rng);
    const MatF x = test::random_matrix_f(rng, 5, 12), w = test::random_matrix_f(rng, 8, 12);
    CHECK(layer_dx_rel_err(
              x, [&](const MatF& a, bool t) { return lstm.forward(a, t); },
              [&](const MatF& g) { return lstm.backward(g); }, w) < kTol);
    CHECK(layer_param_rel_err(lstm, x, w) < kTol);
  }
}
