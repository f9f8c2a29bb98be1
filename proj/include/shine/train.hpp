#pragma once

// AdamW training of the negative-Pearson objective over 30-second windows
// with leave-session-out validation monitored on the binary channel only.
//
// Run directory layout: config.json (model + train configs), metrics.csv
// (epoch, train_loss, val_pearson), checkpoints best.ckpt and last.ckpt.

#include "shine/common.hpp"
#include "shine/dataset.hpp"
#include "shine/model.hpp"
#include "shine/signal.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace shine {

class AdamW {
 public:
  AdamW(std::vector<nn::Tensor*> params, double lr, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  void step();  // consumes accumulated gradients

 private:
  std::vector<nn::Tensor*> params_;
  std::vector<MatF> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  long t_ = 0;
};

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(const std::vector<nn::Tensor*>& params, double max_norm);

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  int max_epochs = 20;
  int batch_size = 8;
  int patience = 4;  // early stop after this many epochs without improvement
  int n_val_sessions = 8;
  TargetMode mode = TargetMode::kStandard;
  std::uint64_t seed = 0;
  double window_seconds = 30.0;
  double stride_seconds = 30.0;  // training windows do not overlap by default
  double grad_clip = 1.0;
  // The validation sessions are drawn once per run by default; this switch
  // selects the per-epoch redraw reading instead.
  bool redraw_val_each_epoch = false;

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct TrainReport {
  std::vector<double> train_loss;   // per epoch
  std::vector<double> val_pearson;  // per epoch, binary channel only
  int best_epoch = -1;              // index into the vectors above
  double best_val = 0.0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  SplitPlan split;
  int epochs_run = 0;
};

// Mean Pearson correlation between predicted and target binary rows over a
// set of windows. Windows whose binary target is constant are skipped (and
// counted); a constant prediction contributes 0 through the epsilon guard.
double validate(ShineModel& model, const std::vector<TrainingWindow>& windows,
                int* skipped = nullptr);

// The helper behind validate(), shared with tests: one (prediction, target)
// pair per window.
double mean_binary_pearson(const std::vector<VecF>& preds, const std::vector<VecF>& targets,
                           int* skipped = nullptr);

TrainReport train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const std::filesystem::path& data_root, const std::filesystem::path& run_dir,
                  const std::optional<SplitPlan>& split = std::nullopt);

}  // namespace shine
