#pragma once

// The SHINE sequence-to-sequence network: an initial two-layer channel
// projection, a stack of hierarchical blocks wired by channel-wise
// concatenation, and a CNN + bidirectional-LSTM head emitting one score row
// per target band. All convolutions are length preserving, so the output
// always has exactly as many time steps as the input.
//
// Block wiring: block 1 consumes the initial features alone; every later
// block consumes concat(initial features, previous context output, previous
// attention output). Inside a block: a five-layer CNN stack (four
// Sconv/Tconv pairs, where each Tconv reads concat(stack input, Sconv
// output), then one plain temporal convolution), a per-time-step linear
// layer, the output context layer (conv -> LeakyReLU -> layer norm), and a
// self-attention layer applied to the context output.

#include "shine/common.hpp"
#include "shine/nn.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace shine {

struct ModelConfig {
  int in_channels = 306;
  int d_init = 64;
  int n_blocks = 6;
  int block_width = 64;
  int cnn_stack_layers = 5;  // fixed by the architecture
  int tconv_kernel = 3;
  int context_kernel = 9;
  int attn_heads = 1;
  int lstm_hidden = 64;      // per direction
  int out_channels = 1;      // 1 standard, 12 extended
  std::uint64_t seed = 0;

  void validate() const;  // raises InvalidConfig
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

class ShineBlock {
 public:
  ShineBlock(int index, Eigen::Index in_ch, const ModelConfig& cfg, Rng& rng);

  struct Outputs {
    MatF context;    // block_width x T
    MatF attention;  // block_width x T
  };

  Outputs forward(const MatF& x, bool training);
  // d_context excludes the path through this block's own attention layer;
  // that route is folded in here. Returns the gradient w.r.t. the block input.
  MatF backward(const MatF& d_context, const MatF& d_attention);
  void collect(std::vector<nn::Tensor*>& out);

  Eigen::Index in_channels() const { return in_ch_; }

 private:
  Eigen::Index in_ch_;
  Eigen::Index width_;
  std::vector<nn::Linear> sconv_;       // pointwise convolutions, 4
  std::vector<nn::LayerNorm> sconv_ln_;
  std::vector<nn::LeakyRelu> sconv_act_;
  std::vector<nn::Conv1d> tconv_;       // depthwise temporal convolutions, 4
  std::vector<nn::LayerNorm> tconv_ln_;
  std::vector<nn::LeakyRelu> tconv_act_;
  std::unique_ptr<nn::Conv1d> conv5_;
  std::unique_ptr<nn::LayerNorm> conv5_ln_;
  nn::LeakyRelu conv5_act_;
  std::unique_ptr<nn::Linear> linear_;
  std::unique_ptr<nn::Conv1d> context_conv_;
  nn::LeakyRelu context_act_;
  std::unique_ptr<nn::LayerNorm> context_ln_;
  std::unique_ptr<nn::SelfAttention> attention_;
};

class ShineModel {
 public:
  explicit ShineModel(const ModelConfig& cfg);

  // meg: in_channels x T -> out_channels x T.
  // Errors: ShapeMismatch (wrong channel count), SequenceTooShort.
  MatF forward(const MatF& meg, bool training = false);
  // Consumes d(loss)/d(output); parameter gradients accumulate.
  void backward(const MatF& d_out);

  const ModelConfig& config() const { return cfg_; }
  std::vector<nn::Tensor*> parameters();
  long param_count() const;
  void zero_grad();

  // Input channel count of every block; closed form d_init then
  // d_init + 2*block_width, asserted against the built layers.
  std::vector<Eigen::Index> block_input_channels() const;

  void save(const std::filesystem::path& path) const;
  static ShineModel load(const std::filesystem::path& path);

 private:
  ModelConfig cfg_;
  std::unique_ptr<nn::Linear> init1_, init2_;
  nn::LeakyRelu init_act_;
  std::vector<ShineBlock> blocks_;
  std::unique_ptr<nn::Conv1d> head_conv_;
  std::unique_ptr<nn::BiLstm> head_lstm_;
  std::unique_ptr<nn::Linear> out_linear_;

  // training-mode caches for gradient routing across blocks
  MatF f0_;
};

long count_params(const ShineModel& m);

}  // namespace shine
