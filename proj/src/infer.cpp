#include "shine/infer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace shine {

using nlohmann::json;

VecF stitch_windows(Eigen::Index n_samples, double rate_hz, double window_seconds,
                    double stride_seconds, double trim_seconds, bool strict_tiling,
                    const WindowScorer& scorer) {
  const auto W = static_cast<Eigen::Index>(std::llround(window_seconds * rate_hz));
  const auto stride = static_cast<Eigen::Index>(std::llround(stride_seconds * rate_hz));
  const auto k = trim_sample_count(trim_seconds, rate_hz);
  require(W >= 1 && stride >= 1 && k >= 0, errc::invalid_config, "bad window geometry");
  require(W > 2 * k, errc::invalid_config, "trim leaves no retained segment");
  require(n_samples >= W, errc::session_too_short,
          std::to_string(n_samples) + " samples, window needs " + std::to_string(W));

  // Trimmed windows tile losslessly only when stride == window - 2*trim;
  // smaller strides overlap (resolved first-wins), larger ones would leave
  // gaps and are rejected in either mode.
  if (strict_tiling)
    require(stride == W - 2 * k, errc::inconsistent_geometry,
            "strict tiling requires stride == window - 2*trim (" + std::to_string(W - 2 * k) +
                " samples), got " + std::to_string(stride));
  require(stride <= W - 2 * k, errc::inconsistent_geometry,
          "stride exceeds the retained segment; coverage would have gaps");

  std::vector<Eigen::Index> starts;
  for (Eigen::Index p = 0; p + W <= n_samples; p += stride) starts.push_back(p);
  if (starts.back() != n_samples - W) starts.push_back(n_samples - W);

  VecF out(n_samples);
  Eigen::Index next_unassigned = 0;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const Eigen::Index p = starts[i];
    const bool first = i == 0;
    const bool last = i + 1 == starts.size();
    // The session edges keep the untrimmed head/tail of the boundary windows.
    const Eigen::Index lo = first ? p : p + k;
    const Eigen::Index hi = last ? p + W : p + W - k;

    const VecF scores = scorer(p, W);
    require(scores.size() == W, errc::shape_mismatch, "scorer returned wrong window length");
    for (Eigen::Index t = std::max(lo, next_unassigned); t < hi; ++t) out[t] = scores[t - p];
    next_unassigned = std::max(next_unassigned, hi);
  }
  require(next_unassigned == n_samples, errc::inconsistent_geometry, "stitching left a gap");
  return out;
}

PredictionTrace predict_session(ShineModel& model, const SessionRecord& session,
                                double window_seconds, double stride_seconds, double trim_seconds,
                                bool strict_tiling, const std::string& model_id) {
  SessionRecord s = session;  // channel normalization operates on a copy
  zscore_channels(s);

  PredictionTrace trace;
  trace.session_id = s.session_id;
  trace.rate_hz = s.rate_hz;
  trace.model_id = model_id;
  trace.scores = stitch_windows(
      s.n_samples(), s.rate_hz, window_seconds, stride_seconds, trim_seconds, strict_tiling,
      [&](Eigen::Index start, Eigen::Index len) -> VecF {
        const MatF out = model.forward(s.meg.middleCols(start, len), /*training=*/false);
        return out.row(out.rows() - 1).transpose();  // binary channel is the last row
      });
  return trace;
}

std::vector<std::uint8_t> binarize(const VecF& scores, double threshold) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(scores.size()));
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    out[static_cast<std::size_t>(i)] = static_cast<double>(scores[i]) > threshold ? 1 : 0;
  return out;
}

ConfusionCounts confusion(const std::vector<std::uint8_t>& pred,
                          const std::vector<std::uint8_t>& truth) {
  require(pred.size() == truth.size(), errc::length_mismatch,
          "confusion: " + std::to_string(pred.size()) + " vs " + std::to_string(truth.size()));
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool t = truth[i] != 0;
    if (p && t) ++c.speech.tp;
    else if (p && !t) ++c.speech.fp;
    else if (!p && t) ++c.speech.fn;
    else ++c.speech.tn;
  }
  c.silence.tp = c.speech.tn;
  c.silence.fp = c.speech.fn;
  c.silence.fn = c.speech.fp;
  c.silence.tn = c.speech.tp;
  return c;
}

double f1_class(const ClassCounts& c) {
  const long denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double f1_macro(const ConfusionCounts& c) {
  return 0.5 * (f1_class(c.speech) + f1_class(c.silence));
}

namespace {

// Linear-interpolation quantile of a sorted sample.
double quantile_sorted(const std::vector<double>& sorted, double q) {
  const auto n = sorted.size();
  const double pos = q * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= n) return sorted.back();
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

}  // namespace

double select_threshold(const VecF& scores, const std::vector<std::uint8_t>& labels) {
  require(static_cast<std::size_t>(scores.size()) == labels.size(), errc::length_mismatch,
          "select_threshold: score/label lengths differ");
  bool has0 = false, has1 = false;
  for (const auto v : labels) (v != 0 ? has1 : has0) = true;
  require(has0 && has1, errc::single_class_labels,
          "threshold calibration needs both speech and silence labels");

  std::vector<double> sorted(static_cast<std::size_t>(scores.size()));
  for (Eigen::Index i = 0; i < scores.size(); ++i)
    sorted[static_cast<std::size_t>(i)] = static_cast<double>(scores[i]);
  std::sort(sorted.begin(), sorted.end());

  constexpr int kCandidates = 201;  // quantiles 0.0 to 1.0 in steps of 0.005
  double best_f1 = -1.0;
  int best_index = 0;
  double best_threshold = 0.0;
  for (int i = 0; i < kCandidates; ++i) {
    const double q = static_cast<double>(i) / static_cast<double>(kCandidates - 1);
    const double t = quantile_sorted(sorted, q);
    const double f1 = f1_macro(confusion(binarize(scores, t), labels));
    const int median_dist = std::abs(i - kCandidates / 2);
    const int best_dist = std::abs(best_index - kCandidates / 2);
    const bool better =
        f1 > best_f1 + 1e-15 ||
        (std::abs(f1 - best_f1) <= 1e-15 && (median_dist < best_dist ||
                                             (median_dist == best_dist && i < best_index)));
    if (better) {
      best_f1 = f1;
      best_index = i;
      best_threshold = t;
    }
  }
  return best_threshold;
}

// ---------------------------------------------------------------------------
// Trace files
// ---------------------------------------------------------------------------

void write_trace(const PredictionTrace& trace, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string stem = trace.session_id + "." + trace.model_id;
  {
    std::ofstream out(dir / (stem + ".f32"), std::ios::binary);
    require(out.good(), errc::io_error, "cannot write trace " + stem);
    out.write(reinterpret_cast<const char*>(trace.scores.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(trace.scores.size())));
  }
  const json meta = {
      {"session_id", trace.session_id},
      {"model_id", trace.model_id},
      {"rate_hz", trace.rate_hz},
      {"n_samples", trace.scores.size()},
  };
  std::ofstream out(dir / (stem + ".json"));
  require(out.good(), errc::io_error, "cannot write trace sidecar " + stem);
  out << meta.dump(2) << "\n";
}

PredictionTrace load_trace(const std::filesystem::path& f32_path) {
  std::filesystem::path sidecar = f32_path;
  sidecar.replace_extension(".json");
  std::ifstream meta_in(sidecar);
  require(meta_in.good(), errc::missing_field, "missing trace sidecar " + sidecar.string());
  json meta;
  try {
    meta_in >> meta;
  } catch (const json::exception& e) {
    raise(errc::corrupt_file, sidecar.string() + ": " + e.what());
  }

  PredictionTrace trace;
  require(meta.contains("session_id") && meta.contains("model_id") && meta.contains("rate_hz") &&
              meta.contains("n_samples"),
          errc::missing_field, sidecar.string() + ": incomplete sidecar");
  trace.session_id = meta["session_id"].get<std::string>();
  trace.model_id = meta["model_id"].get<std::string>();
  trace.rate_hz = meta["rate_hz"].get<double>();
  const auto n = meta["n_samples"].get<Eigen::Index>();

  std::ifstream in(f32_path, std::ios::binary | std::ios::ate);
  require(in.good(), errc::missing_field, "missing trace " + f32_path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  require(bytes == sizeof(float) * static_cast<std::size_t>(n), errc::corrupt_file,
          f32_path.string() + ": size does not match sidecar n_samples");
  trace.scores.resize(n);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(trace.scores.data()), static_cast<std::streamsize>(bytes));
  require(in.good(), errc::corrupt_file, f32_path.string() + ": short read");
  return trace;
}

std::vector<std::filesystem::path> list_traces(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), errc::missing_field,
          "not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".f32")
      out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

SessionMetrics metrics_from_counts(const std::string& id, double threshold,
                                   const ConfusionCounts& c) {
  SessionMetrics m;
  m.session_id = id;
  m.threshold = threshold;
  m.f1_speech = f1_class(c.speech);
  m.f1_silence = f1_class(c.silence);
  m.f1_macro = f1_macro(c);
  return m;
}

}  // namespace

EvalReport evaluate_traces(const std::map<std::string, PredictionTrace>& traces,
                           const std::filesystem::path& data_root,
                           const std::vector<std::string>& calibration_ids) {
  require(!traces.empty(), errc::missing_field, "no traces to evaluate");
  require(!calibration_ids.empty(), errc::invalid_config, "no calibration sessions given");
  const std::set<std::string> calib(calibration_ids.begin(), calibration_ids.end());

  // Pool calibration scores and labels, then sweep a single threshold that
  // stays frozen for the evaluation sessions.
  std::vector<float> pool_scores;
  std::vector<std::uint8_t> pool_labels;
  int calib_found = 0;
  for (const auto& [id, trace] : traces) {
    if (!calib.count(id)) continue;
    ++calib_found;
    const auto session = load_session(data_root / id);
    require(static_cast<Eigen::Index>(session.labels.size()) == trace.scores.size(),
            errc::length_mismatch, "trace/label length mismatch for session " + id);
    pool_scores.insert(pool_scores.end(), trace.scores.data(),
                       trace.scores.data() + trace.scores.size());
    pool_labels.insert(pool_labels.end(), session.labels.begin(), session.labels.end());
  }
  require(calib_found > 0, errc::missing_field, "no traces for any calibration session");

  VecF pooled = Eigen::Map<const VecF>(pool_scores.data(), static_cast<Eigen::Index>(pool_scores.size()));
  EvalReport report;
  report.threshold = select_threshold(pooled, pool_labels);

  ConfusionCounts pooled_counts;
  for (const auto& [id, trace] : traces) {
    if (calib.count(id)) continue;
    const auto session = load_session(data_root / id);
    require(static_cast<Eigen::Index>(session.labels.size()) == trace.scores.size(),
            errc::length_mismatch, "trace/label length mismatch for session " + id);
    const auto counts = confusion(binarize(trace.scores, report.threshold), session.labels);
    report.sessions.push_back(metrics_from_counts(id, report.threshold, counts));
    pooled_counts.speech.tp += counts.speech.tp;
    pooled_counts.speech.fp += counts.speech.fp;
    pooled_counts.speech.fn += counts.speech.fn;
    pooled_counts.speech.tn += counts.speech.tn;
  }
  require(!report.sessions.empty(), errc::missing_field,
          "every trace belongs to the calibration set; nothing to evaluate");
  pooled_counts.silence.tp = pooled_counts.speech.tn;
  pooled_counts.silence.fp = pooled_counts.speech.fn;
  pooled_counts.silence.fn = pooled_counts.speech.fp;
  pooled_counts.silence.tn = pooled_counts.speech.tp;
  report.pooled = metrics_from_counts("ALL", report.threshold, pooled_counts);
  return report;
}

void write_metrics_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), errc::io_error, "cannot write " + path.string());
  out << "session_id,threshold,f1_macro,f1_speech,f1_silence\n";
  char buf[160];
  for (const auto& m : report.sessions) {
    std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%.10g,%.10g\n", m.session_id.c_str(),
                  m.threshold, m.f1_macro, m.f1_speech, m.f1_silence);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "ALL,%.10g,%.10g,%.10g,%.10g\n", report.pooled.threshold,
                report.pooled.f1_macro, report.pooled.f1_speech, report.pooled.f1_silence);
  out << buf;
}

}  // namespace shine
