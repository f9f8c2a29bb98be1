#include "shine/model.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace shine {

using nlohmann::json;

namespace {
constexpr char kCheckpointMagic[8] = {'S', 'H', 'I', 'N', 'E', 'C', 'K', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void ModelConfig::validate() const {
  require(in_channels >= 1, errc::invalid_config, "in_channels must be >= 1");
  require(d_init >= 1, errc::invalid_config, "d_init must be >= 1");
  require(n_blocks >= 1, errc::invalid_config, "n_blocks must be >= 1");
  require(block_width >= 1, errc::invalid_config, "block_width must be >= 1");
  require(cnn_stack_layers == 5, errc::invalid_config,
          "cnn_stack_layers is fixed to 5, got " + std::to_string(cnn_stack_layers));
  require(tconv_kernel >= 1 && tconv_kernel % 2 == 1, errc::invalid_config,
          "tconv_kernel must be odd");
  require(context_kernel >= 1 && context_kernel % 2 == 1, errc::invalid_config,
          "context_kernel must be odd");
  require(attn_heads >= 1 && block_width % attn_heads == 0, errc::invalid_config,
          "attn_heads must divide block_width");
  require(lstm_hidden >= 1, errc::invalid_config, "lstm_hidden must be >= 1");
  require(out_channels == 1 || out_channels == 12, errc::invalid_config,
          "out_channels must be 1 (standard) or 12 (extended)");
}

std::string model_config_to_json(const ModelConfig& cfg) {
  const json j = {
      {"in_channels", cfg.in_channels},
      {"d_init", cfg.d_init},
      {"n_blocks", cfg.n_blocks},
      {"block_width", cfg.block_width},
      {"cnn_stack_layers", cfg.cnn_stack_layers},
      {"tconv_kernel", cfg.tconv_kernel},
      {"context_kernel", cfg.context_kernel},
      {"attn_heads", cfg.attn_heads},
      {"lstm_hidden", cfg.lstm_hidden},
      {"out_channels", cfg.out_channels},
      {"seed", cfg.seed},
  };
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(errc::config_parse, std::string("model config: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg.in_channels = j.value("in_channels", cfg.in_channels);
    cfg.d_init = j.value("d_init", cfg.d_init);
    cfg.n_blocks = j.value("n_blocks", cfg.n_blocks);
    cfg.block_width = j.value("block_width", cfg.block_width);
    cfg.cnn_stack_layers = j.value("cnn_stack_layers", cfg.cnn_stack_layers);
    cfg.tconv_kernel = j.value("tconv_kernel", cfg.tconv_kernel);
    cfg.context_kernel = j.value("context_kernel", cfg.context_kernel);
    cfg.attn_heads = j.value("attn_heads", cfg.attn_heads);
    cfg.lstm_hidden = j.value("lstm_hidden", cfg.lstm_hidden);
    cfg.out_channels = j.value("out_channels", cfg.out_channels);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    raise(errc::config_parse, std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// ShineBlock
// ---------------------------------------------------------------------------

ShineBlock::ShineBlock(int index, Eigen::Index in_ch, const ModelConfig& cfg, Rng& rng)
    : in_ch_(in_ch), width_(cfg.block_width) {
  const std::string prefix = "block" + std::to_string(index);
  const Eigen::Index cat_ch = in_ch_ + width_;

  for (int j = 0; j < 4; ++j) {
    const Eigen::Index s_in = j == 0 ? in_ch_ : cat_ch;
    sconv_.emplace_back(prefix + ".sconv" + std::to_string(j), s_in, width_, rng);
    sconv_ln_.emplace_back(prefix + ".sconv" + std::to_string(j) + ".ln", width_, rng);
    sconv_act_.emplace_back();
    tconv_.emplace_back(prefix + ".tconv" + std::to_string(j), cat_ch, cat_ch, cfg.tconv_kernel,
                        /*depthwise=*/true, rng);
    tconv_ln_.emplace_back(prefix + ".tconv" + std::to_string(j) + ".ln", cat_ch, rng);
    tconv_act_.emplace_back();
  }
  conv5_ = std::make_unique<nn::Conv1d>(prefix + ".conv5", cat_ch, width_, cfg.tconv_kernel,
                                        /*depthwise=*/false, rng);
  conv5_ln_ = std::make_unique<nn::LayerNorm>(prefix + ".conv5.ln", width_, rng);
  linear_ = std::make_unique<nn::Linear>(prefix + ".linear", width_, width_, rng);
  context_conv_ = std::make_unique<nn::Conv1d>(prefix + ".context", width_, width_,
                                               cfg.context_kernel, /*depthwise=*/false, rng);
  context_ln_ = std::make_unique<nn::LayerNorm>(prefix + ".context.ln", width_, rng);
  attention_ = std::make_unique<nn::SelfAttention>(prefix + ".attn", width_, cfg.attn_heads, rng);
}

ShineBlock::Outputs ShineBlock::forward(const MatF& x, bool training) {
  const Eigen::Index T = x.cols();
  MatF cur = x;
  for (int j = 0; j < 4; ++j) {
    const MatF s = sconv_act_[static_cast<std::size_t>(j)].forward(
        sconv_ln_[static_cast<std::size_t>(j)].forward(
            sconv_[static_cast<std::size_t>(j)].forward(cur, training), training),
        training);
    MatF cat(in_ch_ + width_, T);
    cat.topRows(in_ch_) = x;
    cat.bottomRows(width_) = s;
    cur = tconv_act_[static_cast<std::size_t>(j)].forward(
        tconv_ln_[static_cast<std::size_t>(j)].forward(
            tconv_[static_cast<std::size_t>(j)].forward(cat, training), training),
        training);
  }
  cur = conv5_act_.forward(conv5_ln_->forward(conv5_->forward(cur, training), training), training);
  cur = linear_->forward(cur, training);

  Outputs out;
  out.context =
      context_ln_->forward(context_act_.forward(context_conv_->forward(cur, training), training), training);
  out.attention = attention_->forward(out.context, training);
  return out;
}

MatF ShineBlock::backward(const MatF& d_context, const MatF& d_attention) {
  MatF d_ctx = d_context + attention_->backward(d_attention);
  MatF d_cur = context_conv_->backward(context_act_.backward(context_ln_->backward(d_ctx)));
  d_cur = linear_->backward(d_cur);
  d_cur = conv5_->backward(conv5_ln_->backward(conv5_act_.backward(d_cur)));

  MatF dx = MatF::Zero(in_ch_, d_cur.cols());
  for (int j = 3; j >= 0; --j) {
    const MatF d_cat = tconv_[static_cast<std::size_t>(j)].backward(
        tconv_ln_[static_cast<std::size_t>(j)].backward(
            tconv_act_[static_cast<std::size_t>(j)].backward(d_cur)));
    dx += d_cat.topRows(in_ch_);
    const MatF d_s = sconv_[static_cast<std::size_t>(j)].backward(
        sconv_ln_[static_cast<std::size_t>(j)].backward(
            sconv_act_[static_cast<std::size_t>(j)].backward(d_cat.bottomRows(width_))));
    d_cur = d_s;
  }
  dx += d_cur;  // Sconv of the first layer reads the block input directly
  return dx;
}

void ShineBlock::collect(std::vector<nn::Tensor*>& out) {
  for (int j = 0; j < 4; ++j) {
    sconv_[static_cast<std::size_t>(j)].collect(out);
    sconv_ln_[static_cast<std::size_t>(j)].collect(out);
    tconv_[static_cast<std::size_t>(j)].collect(out);
    tconv_ln_[static_cast<std::size_t>(j)].collect(out);
  }
  conv5_->collect(out);
  conv5_ln_->collect(out);
  linear_->collect(out);
  context_conv_->collect(out);
  context_ln_->collect(out);
  attention_->collect(out);
}

// ---------------------------------------------------------------------------
// ShineModel
// ---------------------------------------------------------------------------

ShineModel::ShineModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);

  const Eigen::Index d = cfg_.d_init;
  const Eigen::Index w = cfg_.block_width;
  init1_ = std::make_unique<nn::Linear>("init.l1", cfg_.in_channels, 2 * d, rng);
  init2_ = std::make_unique<nn::Linear>("init.l2", 2 * d, d, rng);

  blocks_.reserve(static_cast<std::size_t>(cfg_.n_blocks));
  for (int i = 0; i < cfg_.n_blocks; ++i) {
    const Eigen::Index in_ch = i == 0 ? d : d + 2 * w;
    blocks_.emplace_back(i, in_ch, cfg_, rng);
  }

  const Eigen::Index head_in = d + 2 * w;
  head_conv_ = std::make_unique<nn::Conv1d>("head.conv", head_in, w, 3, /*depthwise=*/false, rng);
  head_lstm_ = std::make_unique<nn::BiLstm>("head.lstm", w, cfg_.lstm_hidden, rng);
  out_linear_ = std::make_unique<nn::Linear>("head.out", 2 * cfg_.lstm_hidden, cfg_.out_channels, rng);

  // Concatenation bookkeeping must match the closed form.
  const auto expected = block_input_channels();
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    require(blocks_[i].in_channels() == expected[i], errc::invalid_config,
            "block channel bookkeeping mismatch");
  require(head_conv_->in_channels() == head_in, errc::invalid_config, "head channel mismatch");
}

std::vector<Eigen::Index> ShineModel::block_input_channels() const {
  std::vector<Eigen::Index> out;
  out.reserve(static_cast<std::size_t>(cfg_.n_blocks));
  for (int i = 0; i < cfg_.n_blocks; ++i)
    out.push_back(i == 0 ? cfg_.d_init : cfg_.d_init + 2 * cfg_.block_width);
  return out;
}

MatF ShineModel::forward(const MatF& meg, bool training) {
  require(meg.rows() == cfg_.in_channels, errc::shape_mismatch,
          "expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
              std::to_string(meg.rows()));
  require(meg.cols() >= cfg_.context_kernel, errc::sequence_too_short,
          "sequence of " + std::to_string(meg.cols()) + " steps is shorter than the context kernel");

  const Eigen::Index T = meg.cols();
  const Eigen::Index d = cfg_.d_init;
  const Eigen::Index w = cfg_.block_width;

  MatF f0 = init2_->forward(init_act_.forward(init1_->forward(meg, training), training), training);
  if (training) f0_ = f0;

  MatF ctx, attn;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    ShineBlock::Outputs out;
    if (i == 0) {
      out = blocks_[i].forward(f0, training);
    } else {
      MatF cat(d + 2 * w, T);
      cat.topRows(d) = f0;
      cat.middleRows(d, w) = ctx;
      cat.bottomRows(w) = attn;
      out = blocks_[i].forward(cat, training);
    }
    ctx = std::move(out.context);
    attn = std::move(out.attention);
  }

  MatF head_in(d + 2 * w, T);
  head_in.topRows(d) = f0;
  head_in.middleRows(d, w) = ctx;
  head_in.bottomRows(w) = attn;

  const MatF h = head_conv_->forward(head_in, training);
  const MatF y = head_lstm_->forward(h, training);
  return out_linear_->forward(y, training);
}

void ShineModel::backward(const MatF& d_out) {
  const Eigen::Index d = cfg_.d_init;
  const Eigen::Index w = cfg_.block_width;

  MatF d_y = out_linear_->backward(d_out);
  MatF d_h = head_lstm_->backward(d_y);
  MatF d_head_in = head_conv_->backward(d_h);

  MatF d_f0 = d_head_in.topRows(d);
  MatF d_ctx = d_head_in.middleRows(d, w);
  MatF d_attn = d_head_in.bottomRows(w);

  for (std::size_t i = blocks_.size(); i-- > 0;) {
    const MatF d_in = blocks_[i].backward(d_ctx, d_attn);
    if (i == 0) {
      d_f0 += d_in;
    } else {
      d_f0 += d_in.topRows(d);
      d_ctx = d_in.middleRows(d, w);
      d_attn = d_in.bottomRows(w);
    }
  }

  init1_->backward(init_act_.backward(init2_->backward(d_f0)));
}

std::vector<nn::Tensor*> ShineModel::parameters() {
  std::vector<nn::Tensor*> out;
  init1_->collect(out);
  init2_->collect(out);
  for (auto& b : blocks_) b.collect(out);
  head_conv_->collect(out);
  head_lstm_->collect(out);
  out_linear_->collect(out);
  return out;
}

long ShineModel::param_count() const {
  auto* self = const_cast<ShineModel*>(this);
  long n = 0;
  for (const auto* t : self->parameters()) n += static_cast<long>(t->size());
  return n;
}

void ShineModel::zero_grad() {
  for (auto* t : parameters()) t->zero_grad();
}

long count_params(const ShineModel& m) { return m.param_count(); }

// ---------------------------------------------------------------------------
// Checkpoint IO: magic, version, config JSON, then named float32 tensors
// with shape headers (column-major payload).
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(in.good(), errc::corrupt_file, path.string() + ": truncated checkpoint");
  return v;
}

}  // namespace

void ShineModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), errc::io_error, "cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod(out, kCheckpointVersion);

  const std::string cfg_json = model_config_to_json(cfg_);
  write_pod(out, static_cast<std::uint32_t>(cfg_json.size()));
  out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));

  auto* self = const_cast<ShineModel*>(this);
  const auto params = self->parameters();
  write_pod(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* t : params) {
    write_pod(out, static_cast<std::uint32_t>(t->name.size()));
    out.write(t->name.data(), static_cast<std::streamsize>(t->name.size()));
    write_pod(out, static_cast<std::uint32_t>(t->value.rows()));
    write_pod(out, static_cast<std::uint32_t>(t->value.cols()));
    out.write(reinterpret_cast<const char*>(t->value.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t->value.size())));
  }
  require(out.good(), errc::io_error, "short write to " + path.string());
}

ShineModel ShineModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), errc::missing_field, "cannot open " + path.string());

  char magic[8];
  in.read(magic, sizeof(magic));
  require(in.good() && std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0, errc::corrupt_file,
          path.string() + ": not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in, path);
  require(version == kCheckpointVersion, errc::corrupt_file,
          path.string() + ": unsupported checkpoint version " + std::to_string(version));

  const auto cfg_len = read_pod<std::uint32_t>(in, path);
  std::string cfg_json(cfg_len, '\0');
  in.read(cfg_json.data(), cfg_len);
  require(in.good(), errc::corrupt_file, path.string() + ": truncated config");

  ShineModel model(model_config_from_json(cfg_json));
  auto params = model.parameters();

  const auto n_tensors = read_pod<std::uint32_t>(in, path);
  require(n_tensors == params.size(), errc::corrupt_file,
          path.string() + ": tensor count mismatch");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const auto name_len = read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rows = read_pod<std::uint32_t>(in, path);
    const auto cols = read_pod<std::uint32_t>(in, path);

    nn::Tensor* target = nullptr;
    for (auto* t : params) {
      if (t->name == name) {
        target = t;
        break;
      }
    }
    require(target != nullptr, errc::corrupt_file, path.string() + ": unknown tensor " + name);
    require(target->value.rows() == static_cast<Eigen::Index>(rows) &&
                target->value.cols() == static_cast<Eigen::Index>(cols),
            errc::corrupt_file, path.string() + ": shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(target->value.data()),
            static_cast<std::streamsize>(sizeof(float) * rows * cols));
    require(in.good(), errc::corrupt_file, path.string() + ": truncated tensor " + name);
  }
  return model;
}

}  // namespace shine
