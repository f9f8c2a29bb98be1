#pragma once

// Neural-network building blocks operating on channels x time float32
// matrices, with hand-written backward passes. Layers cache forward
// intermediates only when training=true; inference-mode forward does not
// mutate layer state beyond scratch allocations, so a model can serve
// concurrent read-only forward calls.

#include "shine/common.hpp"

#include <string>
#include <utility>
#include <vector>

namespace shine::nn {

struct Tensor {
  std::string name;
  MatF value;
  MatF grad;

  void zero_grad() {
    grad.resize(value.rows(), value.cols());
    grad.setZero();
  }
  Eigen::Index size() const { return value.size(); }
};

// Uniform fan-in initialization, U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
void init_fan_in(Tensor& t, Eigen::Index fan_in, Rng& rng);

// Per-time-step affine map; also serves as the pointwise (kernel-1)
// convolution Sconv.
class Linear {
 public:
  Linear(const std::string& name, Eigen::Index in_dim, Eigen::Index out_dim, Rng& rng);

  MatF forward(const MatF& x, bool training);
  MatF backward(const MatF& dy);
  void collect(std::vector<Tensor*>& out);

  Eigen::Index in_dim() const { return w_.value.cols(); }
  Eigen::Index out_dim() const { return w_.value.rows(); }
  Tensor& weight() { return w_; }

 private:
  Tensor w_;  // out x in
  Tensor b_;  // out x 1
  MatF x_;
};

// Temporal convolution with symmetric zero padding (length preserving).
// groups == 1 (dense) or groups == channels (depthwise); these are the only
// variants the model uses.
class Conv1d {
 public:
  Conv1d(const std::string& name, Eigen::Index in_ch, Eigen::Index out_ch, int kernel,
         bool depthwise, Rng& rng);

  MatF forward(const MatF& x, bool training);
  MatF backward(const MatF& dy);
  void collect(std::vector<Tensor*>& out);

  Eigen::Index in_channels() const { return in_ch_; }
  Eigen::Index out_channels() const { return out_ch_; }

 private:
  Eigen::Index in_ch_, out_ch_;
  int kernel_;
  bool depthwise_;
  Tensor w_;  // dense: out x (in*kernel); depthwise: ch x kernel
  Tensor b_;  // out x 1
  MatF x_;
};

// Normalization over the channel dimension at each time step.
class LayerNorm {
 public:
  LayerNorm(const std::string& name, Eigen::Index channels, Rng& rng);

  MatF forward(const MatF& x, bool training);
  MatF backward(const MatF& dy);
  void collect(std::vector<Tensor*>& out);

 private:
  Tensor gamma_, beta_;  // channels x 1
  MatF xhat_;
  Eigen::RowVectorXf inv_std_;
  static constexpr float kEps = 1e-5f;
};

class LeakyRelu {
 public:
  explicit LeakyRelu(float slope = 0.01f) : slope_(slope) {}
  MatF forward(const MatF& x, bool training);
  MatF backward(const MatF& dy) const;

 private:
  float slope_;
  MatF x_;
};

// Scaled dot-product self-attention over time steps with learned Q/K/V
// projections, no positional encoding. Multi-head by splitting channels.
class SelfAttention {
 public:
  SelfAttention(const std::string& name, Eigen::Index dim, int heads, Rng& rng);

  MatF forward(const MatF& x, bool training);
  MatF backward(const MatF& dy);
  void collect(std::vector<Tensor*>& out);

 private:
  Eigen::Index dim_;
  int heads_;
  Tensor wq_, wk_, wv_;  // dim x dim
  MatF x_, q_, k_, v_;
  std::vector<MatF> probs_;  // per-head T x T softmax, kept for backward
};

// Single-direction LSTM; reverse=true scans time back-to-front (used as the
// second half of the bidirectional pair).
class Lstm {
 public:
  Lstm(const std::string& name, Eigen::Index in_dim, Eigen::Index hidden, bool reverse, Rng& rng);

  MatF forward(const MatF& x, bool training);
  MatF backward(const MatF& dy);
  void collect(std::vector<Tensor*>& out);

  Eigen::Index hidden() const { return hidden_; }

 private:
  Eigen::Index in_dim_, hidden_;
  bool reverse_;
  Tensor wx_;  // 4h x in, gate row order i,f,g,o
  Tensor wh_;  // 4h x h
  Tensor b_;   // 4h x 1
  MatF x_, gates_, cells_, tanh_c_, hidden_states_;
};

class BiLstm {
 public:
  BiLstm(const std::string& name, Eigen::Index in_dim, Eigen::Index hidden, Rng& rng);

  MatF forward(const MatF& x, bool training);  // (2*hidden) x T
  MatF backward(const MatF& dy);
  void collect(std::vector<Tensor*>& out);

  Eigen::Index hidden() const { return fwd_.hidden(); }

 private:
  Lstm fwd_, bwd_;
};

}  // namespace shine::nn
