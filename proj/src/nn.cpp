#include "shine/nn.hpp"

#include <cmath>

namespace shine::nn {

namespace {

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Query rows are processed in chunks during inference so the T x T score
// matrix is never fully materialized on long sequences.
constexpr Eigen::Index kAttnChunk = 1024;

}  // namespace

void init_fan_in(Tensor& t, Eigen::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Eigen::Index c = 0; c < t.value.cols(); ++c)
    for (Eigen::Index r = 0; r < t.value.rows(); ++r)
      t.value(r, c) = static_cast<float>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(const std::string& name, Eigen::Index in_dim, Eigen::Index out_dim, Rng& rng) {
  w_.name = name + ".w";
  w_.value.resize(out_dim, in_dim);
  b_.name = name + ".b";
  b_.value = MatF::Zero(out_dim, 1);
  init_fan_in(w_, in_dim, rng);
  w_.zero_grad();
  b_.zero_grad();
}

MatF Linear::forward(const MatF& x, bool training) {
  if (training) x_ = x;
  MatF y = w_.value * x;
  y.colwise() += b_.value.col(0);
  return y;
}

MatF Linear::backward(const MatF& dy) {
  w_.grad.noalias() += dy * x_.transpose();
  b_.grad.col(0) += dy.rowwise().sum();
  return w_.value.transpose() * dy;
}

void Linear::collect(std::vector<Tensor*>& out) {
  out.push_back(&w_);
  out.push_back(&b_);
}

// ---------------------------------------------------------------------------
// Conv1d
// ---------------------------------------------------------------------------

Conv1d::Conv1d(const std::string& name, Eigen::Index in_ch, Eigen::Index out_ch, int kernel,
               bool depthwise, Rng& rng)
    : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), depthwise_(depthwise) {
  require(kernel >= 1 && kernel % 2 == 1, errc::invalid_config,
          "conv kernel must be odd for symmetric padding");
  if (depthwise_) {
    require(in_ch == out_ch, errc::invalid_config, "depthwise conv requires in == out channels");
    w_.value.resize(in_ch, kernel);
    init_fan_in(w_, kernel, rng);
  } else {
    w_.value.resize(out_ch, in_ch * kernel);
    init_fan_in(w_, in_ch * kernel, rng);
  }
  w_.name = name + ".w";
  b_.name = name + ".b";
  b_.value = MatF::Zero(out_ch, 1);
  w_.zero_grad();
  b_.zero_grad();
}

MatF Conv1d::forward(const MatF& x, bool training) {
  if (training) x_ = x;
  const Eigen::Index T = x.cols();
  const Eigen::Index pad = (kernel_ - 1) / 2;
  MatF y(out_ch_, T);
  y.colwise() = b_.value.col(0);
  for (int j = 0; j < kernel_; ++j) {
    const Eigen::Index shift = j - pad;
    const Eigen::Index t0 = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index t1 = std::min<Eigen::Index>(T, T - shift);
    if (t1 <= t0) continue;
    const Eigen::Index len = t1 - t0;
    if (depthwise_) {
      y.middleCols(t0, len).array() +=
          x.middleCols(t0 + shift, len).array().colwise() * w_.value.col(j).array();
    } else {
      y.middleCols(t0, len).noalias() +=
          w_.value.middleCols(j * in_ch_, in_ch_) * x.middleCols(t0 + shift, len);
    }
  }
  return y;
}

MatF Conv1d::backward(const MatF& dy) {
  const Eigen::Index T = dy.cols();
  const Eigen::Index pad = (kernel_ - 1) / 2;
  MatF dx = MatF::Zero(in_ch_, T);
  b_.grad.col(0) += dy.rowwise().sum();
  for (int j = 0; j < kernel_; ++j) {
    const Eigen::Index shift = j - pad;
    const Eigen::Index t0 = std::max<Eigen::Index>(0, -shift);
    const Eigen::Index t1 = std::min<Eigen::Index>(T, T - shift);
    if (t1 <= t0) continue;
    const Eigen::Index len = t1 - t0;
    if (depthwise_) {
      w_.grad.col(j) +=
          (dy.middleCols(t0, len).array() * x_.middleCols(t0 + shift, len).array()).rowwise().sum().matrix();
      dx.middleCols(t0 + shift, len).array() +=
          dy.middleCols(t0, len).array().colwise() * w_.value.col(j).array();
    } else {
      w_.grad.middleCols(j * in_ch_, in_ch_).noalias() +=
          dy.middleCols(t0, len) * x_.middleCols(t0 + shift, len).transpose();
      dx.middleCols(t0 + shift, len).noalias() +=
          w_.value.middleCols(j * in_ch_, in_ch_).transpose() * dy.middleCols(t0, len);
    }
  }
  return dx;
}

void Conv1d::collect(std::vector<Tensor*>& out) {
  out.push_back(&w_);
  out.push_back(&b_);
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(const std::string& name, Eigen::Index channels, Rng&) {
  gamma_.name = name + ".gamma";
  gamma_.value = MatF::Ones(channels, 1);
  beta_.name = name + ".beta";
  beta_.value = MatF::Zero(channels, 1);
  gamma_.zero_grad();
  beta_.zero_grad();
}

MatF LayerNorm::forward(const MatF& x, bool training) {
  const Eigen::RowVectorXf mu = x.colwise().mean();
  MatF xc = x.rowwise() - mu;
  const Eigen::RowVectorXf inv_std =
      (xc.array().square().colwise().mean() + kEps).sqrt().inverse().matrix();
  MatF xhat = (xc.array().rowwise() * inv_std.array()).matrix();
  MatF y = (xhat.array().colwise() * gamma_.value.col(0).array()).matrix();
  y.colwise() += beta_.value.col(0);
  if (training) {
    xhat_ = std::move(xhat);
    inv_std_ = inv_std;
  }
  return y;
}

MatF LayerNorm::backward(const MatF& dy) {
  gamma_.grad.col(0) += (dy.array() * xhat_.array()).rowwise().sum().matrix();
  beta_.grad.col(0) += dy.rowwise().sum();
  const MatF dxhat = (dy.array().colwise() * gamma_.value.col(0).array()).matrix();
  const Eigen::RowVectorXf m1 = dxhat.colwise().mean();
  const Eigen::RowVectorXf m2 = (dxhat.array() * xhat_.array()).colwise().mean().matrix();
  MatF dx = dxhat;
  dx.rowwise() -= m1;
  dx.array() -= xhat_.array().rowwise() * m2.array();
  dx.array().rowwise() *= inv_std_.array();
  return dx;
}

void LayerNorm::collect(std::vector<Tensor*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

// ---------------------------------------------------------------------------
// LeakyRelu
// ---------------------------------------------------------------------------

MatF LeakyRelu::forward(const MatF& x, bool training) {
  if (training) x_ = x;
  return (x.array() > 0.0f).select(x.array(), slope_ * x.array()).matrix();
}

MatF LeakyRelu::backward(const MatF& dy) const {
  return (x_.array() > 0.0f).select(dy.array(), slope_ * dy.array()).matrix();
}

// ---------------------------------------------------------------------------
// SelfAttention
// ---------------------------------------------------------------------------

SelfAttention::SelfAttention(const std::string& name, Eigen::Index dim, int heads, Rng& rng)
    : dim_(dim), heads_(heads) {
  require(heads >= 1 && dim % heads == 0, errc::invalid_config,
          "attention heads must divide the model width");
  for (auto [t, suffix] : {std::pair{&wq_, ".wq"}, {&wk_, ".wk"}, {&wv_, ".wv"}}) {
    t->name = name + suffix;
    t->value.resize(dim, dim);
    init_fan_in(*t, dim, rng);
    t->zero_grad();
  }
}

MatF SelfAttention::forward(const MatF& x, bool training) {
  const Eigen::Index T = x.cols();
  const Eigen::Index dh = dim_ / heads_;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  MatF q = wq_.value * x;
  MatF k = wk_.value * x;
  MatF v = wv_.value * x;
  MatF y(dim_, T);

  std::vector<MatF> probs;
  if (training) probs.resize(static_cast<std::size_t>(heads_));

  for (int h = 0; h < heads_; ++h) {
    const auto qh = q.middleRows(h * dh, dh);
    const auto kh = k.middleRows(h * dh, dh);
    const auto vh = v.middleRows(h * dh, dh);
    if (training) {
      MatF scores = (qh.transpose() * kh) * scale;  // T x T, rows = queries
      for (Eigen::Index r = 0; r < T; ++r) {
        auto row = scores.row(r).array();
        row -= row.maxCoeff();
        row = row.exp();
        row /= row.sum();
      }
      y.middleRows(h * dh, dh).noalias() = vh * scores.transpose();
      probs[static_cast<std::size_t>(h)] = std::move(scores);
    } else {
      for (Eigen::Index a = 0; a < T; a += kAttnChunk) {
        const Eigen::Index len = std::min(kAttnChunk, T - a);
        MatF scores = (qh.middleCols(a, len).transpose() * kh) * scale;  // len x T
        for (Eigen::Index r = 0; r < len; ++r) {
          auto row = scores.row(r).array();
          row -= row.maxCoeff();
          row = row.exp();
          row /= row.sum();
        }
        y.block(h * dh, a, dh, len).noalias() = vh * scores.transpose();
      }
    }
  }

  if (training) {
    x_ = x;
    q_ = std::move(q);
    k_ = std::move(k);
    v_ = std::move(v);
    probs_ = std::move(probs);
  }
  return y;
}

MatF SelfAttention::backward(const MatF& dy) {
  const Eigen::Index T = dy.cols();
  const Eigen::Index dh = dim_ / heads_;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  MatF dq(dim_, T), dk(dim_, T), dv(dim_, T);
  for (int h = 0; h < heads_; ++h) {
    const auto& p = probs_[static_cast<std::size_t>(h)];
    const auto dyh = dy.middleRows(h * dh, dh);
    const auto qh = q_.middleRows(h * dh, dh);
    const auto kh = k_.middleRows(h * dh, dh);
    const auto vh = v_.middleRows(h * dh, dh);

    dv.middleRows(h * dh, dh).noalias() = dyh * p;
    MatF dp = dyh.transpose() * vh;  // T x T
    const VecF row_dot = (dp.array() * p.array()).rowwise().sum().matrix();
    MatF ds = (p.array() * (dp.colwise() - row_dot).array()).matrix();
    ds *= scale;
    dq.middleRows(h * dh, dh).noalias() = kh * ds.transpose();
    dk.middleRows(h * dh, dh).noalias() = qh * ds;
  }

  wq_.grad.noalias() += dq * x_.transpose();
  wk_.grad.noalias() += dk * x_.transpose();
  wv_.grad.noalias() += dv * x_.transpose();

  MatF dx = wq_.value.transpose() * dq;
  dx.noalias() += wk_.value.transpose() * dk;
  dx.noalias() += wv_.value.transpose() * dv;
  return dx;
}

void SelfAttention::collect(std::vector<Tensor*>& out) {
  out.push_back(&wq_);
  out.push_back(&wk_);
  out.push_back(&wv_);
}

// ---------------------------------------------------------------------------
// Lstm
// ---------------------------------------------------------------------------

Lstm::Lstm(const std::string& name, Eigen::Index in_dim, Eigen::Index hidden, bool reverse, Rng& rng)
    : in_dim_(in_dim), hidden_(hidden), reverse_(reverse) {
  wx_.name = name + ".wx";
  wx_.value.resize(4 * hidden, in_dim);
  init_fan_in(wx_, in_dim, rng);
  wh_.name = name + ".wh";
  wh_.value.resize(4 * hidden, hidden);
  init_fan_in(wh_, hidden, rng);
  b_.name = name + ".b";
  b_.value = MatF::Zero(4 * hidden, 1);
  wx_.zero_grad();
  wh_.zero_grad();
  b_.zero_grad();
}

MatF Lstm::forward(const MatF& x, bool training) {
  const Eigen::Index T = x.cols();
  const Eigen::Index H = hidden_;

  MatF pre = wx_.value * x;  // 4h x T
  pre.colwise() += b_.value.col(0);

  MatF gates(4 * H, T), cells(H, T), tanh_c(H, T), hs(H, T);
  VecF h = VecF::Zero(H), c = VecF::Zero(H);
  VecF z(4 * H);

  for (Eigen::Index step = 0; step < T; ++step) {
    const Eigen::Index t = reverse_ ? T - 1 - step : step;
    z = pre.col(t);
    z.noalias() += wh_.value * h;
    for (Eigen::Index r = 0; r < H; ++r) {
      const float i = sigmoid(z[r]);
      const float f = sigmoid(z[H + r]);
      const float g = std::tanh(z[2 * H + r]);
      const float o = sigmoid(z[3 * H + r]);
      const float cc = f * c[r] + i * g;
      const float tc = std::tanh(cc);
      c[r] = cc;
      h[r] = o * tc;
      gates(r, t) = i;
      gates(H + r, t) = f;
      gates(2 * H + r, t) = g;
      gates(3 * H + r, t) = o;
      cells(r, t) = cc;
      tanh_c(r, t) = tc;
    }
    hs.col(t) = h;
  }

  if (training) {
    x_ = x;
    gates_ = std::move(gates);
    cells_ = std::move(cells);
    tanh_c_ = std::move(tanh_c);
    hidden_states_ = hs;
  }
  return hs;
}

MatF Lstm::backward(const MatF& dy) {
  const Eigen::Index T = dy.cols();
  const Eigen::Index H = hidden_;

  MatF dx(in_dim_, T);
  MatF da_all(4 * H, T);
  VecF dh_next = VecF::Zero(H), dc_next = VecF::Zero(H);
  VecF da(4 * H);

  for (Eigen::Index step = T - 1; step >= 0; --step) {
    const Eigen::Index t = reverse_ ? T - 1 - step : step;
    const Eigen::Index t_prev = reverse_ ? t + 1 : t - 1;
    const bool has_prev = step > 0;

    for (Eigen::Index r = 0; r < H; ++r) {
      const float i = gates_(r, t);
      const float f = gates_(H + r, t);
      const float g = gates_(2 * H + r, t);
      const float o = gates_(3 * H + r, t);
      const float tc = tanh_c_(r, t);
      const float c_prev = has_prev ? cells_(r, t_prev) : 0.0f;

      const float dh = dy(r, t) + dh_next[r];
      const float dc = dh * o * (1.0f - tc * tc) + dc_next[r];

      da[r] = dc * g * i * (1.0f - i);
      da[H + r] = dc * c_prev * f * (1.0f - f);
      da[2 * H + r] = dc * i * (1.0f - g * g);
      da[3 * H + r] = dh * tc * o * (1.0f - o);
      dc_next[r] = dc * f;
    }
    da_all.col(t) = da;
    dh_next.noalias() = wh_.value.transpose() * da;
    if (has_prev) wh_.grad.noalias() += da * hidden_states_.col(t_prev).transpose();
    dx.col(t).noalias() = wx_.value.transpose() * da;
  }

  wx_.grad.noalias() += da_all * x_.transpose();
  b_.grad.col(0) += da_all.rowwise().sum();
  return dx;
}

void Lstm::collect(std::vector<Tensor*>& out) {
  out.push_back(&wx_);
  out.push_back(&wh_);
  out.push_back(&b_);
}

// ---------------------------------------------------------------------------
// BiLstm
// ---------------------------------------------------------------------------

BiLstm::BiLstm(const std::string& name, Eigen::Index in_dim, Eigen::Index hidden, Rng& rng)
    : fwd_(name + ".fwd", in_dim, hidden, false, rng), bwd_(name + ".bwd", in_dim, hidden, true, rng) {}

MatF BiLstm::forward(const MatF& x, bool training) {
  const MatF yf = fwd_.forward(x, training);
  const MatF yb = bwd_.forward(x, training);
  MatF y(yf.rows() + yb.rows(), x.cols());
  y.topRows(yf.rows()) = yf;
  y.bottomRows(yb.rows()) = yb;
  return y;
}

MatF BiLstm::backward(const MatF& dy) {
  const Eigen::Index H = fwd_.hidden();
  MatF dx = fwd_.backward(dy.topRows(H));
  dx += bwd_.backward(dy.bottomRows(H));
  return dx;
}

void BiLstm::collect(std::vector<Tensor*>& out) {
  fwd_.collect(out);
  bwd_.collect(out);
}

}  // namespace shine::nn
