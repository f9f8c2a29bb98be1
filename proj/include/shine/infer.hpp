#pragma once

// Full-session prediction by sliding 30-second windows with 5-second edge
// trimming, lossless stitching, threshold calibration by quantile sweep,
// and F1-macro evaluation over the speech and silence classes.
//
// Stitching geometry: windows start at 0, stride, 2*stride, ... plus one
// end-anchored window at T-W when needed. Each window's prediction is
// trimmed per side; the retained central segments tile the interior, and
// the session's first and last trim_seconds come from the untrimmed edges
// of the first and last windows. Every sample receives exactly one score.
//
// Trace files: <session_id>.<model_id>.f32 (float32 scores) next to a JSON
// sidecar {session_id, model_id, rate_hz, n_samples}.

#include "shine/common.hpp"
#include "shine/dataset.hpp"
#include "shine/model.hpp"
#include "shine/signal.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace shine {

struct PredictionTrace {
  std::string session_id;
  VecF scores;
  double rate_hz = 250.0;
  std::string model_id;
};

// Scorer for one window: (start_sample, window_len) -> scores of window_len.
using WindowScorer = std::function<VecF(Eigen::Index, Eigen::Index)>;

// The stitching core behind predict_session, exposed so coverage can be
// tested with a probe scorer. strict_tiling requires
// stride == window - 2*trim; otherwise any stride up to that bound is
// accepted (overlaps resolved first-wins).
VecF stitch_windows(Eigen::Index n_samples, double rate_hz, double window_seconds,
                    double stride_seconds, double trim_seconds, bool strict_tiling,
                    const WindowScorer& scorer);

PredictionTrace predict_session(ShineModel& model, const SessionRecord& session,
                                double window_seconds = 30.0, double stride_seconds = 20.0,
                                double trim_seconds = 5.0, bool strict_tiling = true,
                                const std::string& model_id = "model");

// Quantile-sweep threshold calibration: 201 candidate quantiles of the score
// distribution (0 to 1 in steps of 0.005), maximizing F1-macro; ties break
// toward the median candidate. Errors: SingleClassLabels.
double select_threshold(const VecF& scores, const std::vector<std::uint8_t>& labels);

// 1 where score > threshold, else 0.
std::vector<std::uint8_t> binarize(const VecF& scores, double threshold);

struct ClassCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  long total() const { return tp + fp + fn + tn; }
};

// Speech counts treat label 1 as positive; silence counts treat label 0 as
// positive, so the two are mirror images.
struct ConfusionCounts {
  ClassCounts speech;
  ClassCounts silence;
};

ConfusionCounts confusion(const std::vector<std::uint8_t>& pred,
                          const std::vector<std::uint8_t>& truth);

// Per-class F1 = 2*TP / (2*TP + FP + FN); an empty denominator contributes 0.
double f1_class(const ClassCounts& c);
double f1_macro(const ConfusionCounts& c);

void write_trace(const PredictionTrace& trace, const std::filesystem::path& dir);
PredictionTrace load_trace(const std::filesystem::path& f32_path);
// All trace files in a directory, sorted by filename.
std::vector<std::filesystem::path> list_traces(const std::filesystem::path& dir);

struct SessionMetrics {
  std::string session_id;
  double threshold = 0.0;
  double f1_macro = 0.0;
  double f1_speech = 0.0;
  double f1_silence = 0.0;
};

struct EvalReport {
  double threshold = 0.0;                  // calibrated once, frozen for evaluation
  std::vector<SessionMetrics> sessions;    // evaluation sessions only
  SessionMetrics pooled;                   // counts pooled over evaluation sessions
};

// Calibrates one threshold on the pooled calibration sessions, then scores
// every other session in `traces`. Labels come from data_root.
EvalReport evaluate_traces(const std::map<std::string, PredictionTrace>& traces,
                           const std::filesystem::path& data_root,
                           const std::vector<std::string>& calibration_ids);

void write_metrics_csv(const EvalReport& report, const std::filesystem::path& path);

}  // namespace shine
