#include "shine/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace shine {

using nlohmann::json;

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<nn::Tensor*> params, double lr, double weight_decay, double beta1,
             double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto* t : params_) {
    m_.push_back(MatF::Zero(t->value.rows(), t->value.cols()));
    v_.push_back(MatF::Zero(t->value.rows(), t->value.cols()));
  }
}

void AdamW::step() {
  ++t_;
  const auto b1 = static_cast<float>(beta1_);
  const auto b2 = static_cast<float>(beta2_);
  const auto bc1 = static_cast<float>(1.0 - std::pow(beta1_, t_));
  const auto bc2 = static_cast<float>(1.0 - std::pow(beta2_, t_));
  const auto lr = static_cast<float>(lr_);
  const auto wd = static_cast<float>(wd_);
  const auto eps = static_cast<float>(eps_);

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
    v_[i].array() = b2 * v_[i].array() + (1.0f - b2) * p.grad.array().square();
    // Decoupled weight decay, then the Adam update with bias correction.
    p.value -= lr * wd * p.value;
    p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps);
  }
}

double clip_grad_norm(const std::vector<nn::Tensor*>& params, double max_norm) {
  double sq = 0.0;
  for (const auto* t : params) sq += t->grad.cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto* t : params) t->grad *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  require(lr > 0.0, errc::invalid_config, "lr must be positive");
  require(weight_decay >= 0.0, errc::invalid_config, "weight_decay must be nonnegative");
  require(max_epochs >= 1, errc::invalid_config, "max_epochs must be >= 1");
  require(batch_size >= 1, errc::invalid_config, "batch_size must be >= 1");
  require(patience >= 0, errc::invalid_config, "patience must be nonnegative");
  require(n_val_sessions >= 1, errc::invalid_config, "n_val_sessions must be >= 1");
  require(window_seconds > 0.0 && stride_seconds > 0.0, errc::invalid_config,
          "window and stride must be positive");
}

std::string train_config_to_json(const TrainConfig& cfg) {
  const json j = {
      {"lr", cfg.lr},
      {"weight_decay", cfg.weight_decay},
      {"max_epochs", cfg.max_epochs},
      {"batch_size", cfg.batch_size},
      {"patience", cfg.patience},
      {"n_val_sessions", cfg.n_val_sessions},
      {"mode", target_mode_name(cfg.mode)},
      {"seed", cfg.seed},
      {"window_seconds", cfg.window_seconds},
      {"stride_seconds", cfg.stride_seconds},
      {"grad_clip", cfg.grad_clip},
      {"redraw_val_each_epoch", cfg.redraw_val_each_epoch},
  };
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(errc::config_parse, std::string("train config: ") + e.what());
  }
  TrainConfig cfg;
  try {
    cfg.lr = j.value("lr", cfg.lr);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.patience = j.value("patience", cfg.patience);
    cfg.n_val_sessions = j.value("n_val_sessions", cfg.n_val_sessions);
    if (j.contains("mode")) cfg.mode = parse_target_mode(j["mode"].get<std::string>());
    cfg.seed = j.value("seed", cfg.seed);
    cfg.window_seconds = j.value("window_seconds", cfg.window_seconds);
    cfg.stride_seconds = j.value("stride_seconds", cfg.stride_seconds);
    cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
    cfg.redraw_val_each_epoch = j.value("redraw_val_each_epoch", cfg.redraw_val_each_epoch);
  } catch (const json::exception& e) {
    raise(errc::config_parse, std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

double mean_binary_pearson(const std::vector<VecF>& preds, const std::vector<VecF>& targets,
                           int* skipped) {
  require(preds.size() == targets.size(), errc::length_mismatch,
          "prediction/target window counts differ");
  require(!preds.empty(), errc::all_windows_degenerate, "no validation windows");
  double sum = 0.0;
  int used = 0, skip = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto tm = detail::row_moments(targets[i], targets[i]);
    if (tm.var_x <= 0.0) {
      ++skip;
      continue;
    }
    sum += guarded_corr(preds[i], targets[i]);
    ++used;
  }
  if (skipped != nullptr) *skipped = skip;
  require(used > 0, errc::all_windows_degenerate, "every validation window has a constant target");
  return sum / static_cast<double>(used);
}

double validate(ShineModel& model, const std::vector<TrainingWindow>& windows, int* skipped) {
  std::vector<VecF> preds, targets;
  preds.reserve(windows.size());
  targets.reserve(windows.size());
  for (const auto& w : windows) {
    const MatF out = model.forward(w.meg, /*training=*/false);
    preds.push_back(out.row(out.rows() - 1).transpose());
    targets.push_back(w.target.row(w.target.rows() - 1).transpose());
  }
  return mean_binary_pearson(preds, targets, skipped);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

std::vector<TrainingWindow> windows_for(const std::vector<SessionRecord>& sessions,
                                        const std::vector<std::string>& ids,
                                        const TrainConfig& cfg) {
  std::vector<TrainingWindow> out;
  const std::set<std::string> wanted(ids.begin(), ids.end());
  for (const auto& s : sessions) {
    if (!wanted.count(s.session_id)) continue;
    auto w = make_windows(s, cfg.window_seconds, cfg.stride_seconds, cfg.mode);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

std::string format_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

TrainReport train(const ModelConfig& model_cfg_in, const TrainConfig& train_cfg,
                  const std::filesystem::path& data_root, const std::filesystem::path& run_dir,
                  const std::optional<SplitPlan>& split_in) {
  train_cfg.validate();
  ModelConfig model_cfg = model_cfg_in;
  model_cfg.out_channels = train_cfg.mode == TargetMode::kExtended ? 12 : 1;
  model_cfg.validate();

  const auto ids = list_sessions(data_root);
  require(static_cast<int>(ids.size()) >= train_cfg.n_val_sessions + 1, errc::too_few_sessions,
          std::to_string(ids.size()) + " sessions cannot support " +
              std::to_string(train_cfg.n_val_sessions) + " validation sessions");

  TrainReport report;
  report.split = split_in.has_value()
                     ? *split_in
                     : leave_session_out_split(ids, train_cfg.n_val_sessions, train_cfg.seed);

  // Sanity on the split: known ids, disjoint train/val.
  {
    const std::set<std::string> known(ids.begin(), ids.end());
    const std::set<std::string> val(report.split.val_sessions.begin(), report.split.val_sessions.end());
    for (const auto& id : report.split.train_sessions) {
      require(known.count(id) > 0, errc::missing_field, "split names unknown session " + id);
      require(val.count(id) == 0, errc::invalid_config, "session in both train and val: " + id);
    }
    for (const auto& id : report.split.val_sessions)
      require(known.count(id) > 0, errc::missing_field, "split names unknown session " + id);
  }

  std::vector<SessionRecord> sessions;
  sessions.reserve(ids.size());
  for (const auto& id : ids) {
    auto s = load_session(data_root / id);
    zscore_channels(s);
    require(s.n_channels() == model_cfg.in_channels, errc::shape_mismatch,
            "session " + id + " has " + std::to_string(s.n_channels()) + " channels, model expects " +
                std::to_string(model_cfg.in_channels));
    sessions.push_back(std::move(s));
  }

  auto train_windows = windows_for(sessions, report.split.train_sessions, train_cfg);
  auto val_windows = windows_for(sessions, report.split.val_sessions, train_cfg);
  require(!train_windows.empty(), errc::session_too_short, "no training windows");
  require(!val_windows.empty(), errc::session_too_short, "no validation windows");

  // Validation sessions must never contribute gradient updates.
  {
    const std::set<std::string> train_set(report.split.train_sessions.begin(),
                                          report.split.train_sessions.end());
    for (const auto& w : train_windows)
      require(train_set.count(w.session_id) > 0, errc::invalid_config,
              "window from non-training session " + w.session_id);
  }

  std::filesystem::create_directories(run_dir);
  {
    std::ofstream cfg_out(run_dir / "config.json");
    require(cfg_out.good(), errc::io_error, "cannot write config.json");
    cfg_out << "{\"model\": " << model_config_to_json(model_cfg)
            << ", \"train\": " << train_config_to_json(train_cfg) << "}\n";
  }
  std::ofstream metrics(run_dir / "metrics.csv");
  require(metrics.good(), errc::io_error, "cannot write metrics.csv");
  metrics << "epoch,train_loss,val_pearson\n";

  ShineModel model(model_cfg);
  AdamW optimizer(model.parameters(), train_cfg.lr, train_cfg.weight_decay);
  Rng shuffle_rng(train_cfg.seed ^ 0x9e3779b97f4a7c15ull);

  report.best_checkpoint = run_dir / "best.ckpt";
  report.last_checkpoint = run_dir / "last.ckpt";
  report.best_val = -2.0;
  int epochs_since_best = 0;

  for (int epoch = 0; epoch < train_cfg.max_epochs; ++epoch) {
    if (train_cfg.redraw_val_each_epoch && epoch > 0) {
      report.split = leave_session_out_split(ids, train_cfg.n_val_sessions,
                                             train_cfg.seed + static_cast<std::uint64_t>(epoch));
      train_windows = windows_for(sessions, report.split.train_sessions, train_cfg);
      val_windows = windows_for(sessions, report.split.val_sessions, train_cfg);
    }

    std::vector<std::size_t> order(train_windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(train_cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(train_cfg.batch_size));
      const auto batch_n = static_cast<double>(end - begin);

      model.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& w = train_windows[order[i]];
        const MatF out = model.forward(w.meg, /*training=*/true);
        auto loss = neg_pearson_loss_grad<float>(out, w.target);
        require(std::isfinite(loss.value), errc::non_finite_loss,
                "epoch " + std::to_string(epoch) + ", window " + w.session_id + "@" +
                    std::to_string(w.start_sample));
        batch_loss += loss.value;
        // Batch loss is the mean of per-window losses.
        model.backward((loss.grad / static_cast<float>(batch_n)).eval());
      }
      batch_loss /= batch_n;
      require(std::isfinite(batch_loss), errc::non_finite_loss, "epoch " + std::to_string(epoch));
      clip_grad_norm(model.parameters(), train_cfg.grad_clip);
      optimizer.step();

      epoch_loss += batch_loss * batch_n;
      seen += end - begin;
    }
    epoch_loss /= static_cast<double>(seen);

    const double val = validate(model, val_windows);
    report.train_loss.push_back(epoch_loss);
    report.val_pearson.push_back(val);
    report.epochs_run = epoch + 1;
    metrics << epoch << "," << format_metric(epoch_loss) << "," << format_metric(val) << "\n";
    metrics.flush();

    model.save(report.last_checkpoint);
    if (val > report.best_val) {
      report.best_val = val;
      report.best_epoch = epoch;
      epochs_since_best = 0;
      model.save(report.best_checkpoint);
    } else {
      ++epochs_since_best;
      if (train_cfg.patience > 0 && epochs_since_best >= train_cfg.patience) break;
    }
  }
  return report;
}

}  // namespace shine
