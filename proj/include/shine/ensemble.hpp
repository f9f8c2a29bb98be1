#pragma once

// Combines many prediction traces by weighted score averaging (optionally
// z-scoring each trace first so no model's score scale dominates), then
// calibrates one threshold and evaluates, reusing the single-model
// evaluation machinery.

#include "shine/common.hpp"
#include "shine/infer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace shine {

enum class TraceNorm { kNone, kZscorePerTrace };

const char* trace_norm_name(TraceNorm n);
TraceNorm parse_trace_norm(const std::string& s);

struct EnsembleSpec {
  std::vector<std::filesystem::path> trace_paths;  // one session's traces
  std::vector<double> weights;                     // empty = uniform
  TraceNorm normalization = TraceNorm::kZscorePerTrace;
};

// Weighted mean of (optionally per-trace z-scored) scores. All traces must
// share session id, rate, and length. The output model_id is a digest of
// the input model ids, weights, and normalization. Summation follows sorted
// path order, so the result is independent of trace_paths ordering.
PredictionTrace average_traces(const EnsembleSpec& spec);

struct EnsembleManifest {
  std::vector<std::string> model_ids;
  std::vector<double> weights;  // empty = uniform
  TraceNorm normalization = TraceNorm::kZscorePerTrace;
};

EnsembleManifest load_ensemble_manifest(const std::filesystem::path& path);
void write_ensemble_manifest(const EnsembleManifest& manifest, const std::filesystem::path& path);

// Averages each session's traces for the manifest's model ids. Every model
// must have a trace for every session found in the directory.
std::map<std::string, PredictionTrace> average_per_session(const EnsembleManifest& manifest,
                                                           const std::filesystem::path& traces_dir);

// Averaged traces -> threshold calibration on the calibration sessions ->
// F1-macro on the remaining sessions.
EvalReport ensemble_evaluate(const EnsembleManifest& manifest,
                             const std::filesystem::path& traces_dir,
                             const std::filesystem::path& data_root,
                             const std::vector<std::string>& calibration_ids);

}  // namespace shine
