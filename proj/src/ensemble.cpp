#include "shine/ensemble.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace shine {

using nlohmann::json;

const char* trace_norm_name(TraceNorm n) {
  return n == TraceNorm::kNone ? "none" : "zscore-per-trace";
}

TraceNorm parse_trace_norm(const std::string& s) {
  if (s == "none") return TraceNorm::kNone;
  if (s == "zscore-per-trace" || s == "zscore") return TraceNorm::kZscorePerTrace;
  raise(errc::config_parse, "normalization must be none or zscore-per-trace, got '" + s + "'");
}

namespace {

VecD normalized_scores(const PredictionTrace& trace, TraceNorm norm) {
  VecD x = trace.scores.cast<double>();
  if (norm == TraceNorm::kNone) return x;
  const double mean = x.mean();
  const double sd = std::sqrt((x.array() - mean).square().sum() / static_cast<double>(x.size()));
  if (sd <= 0.0) return VecD::Zero(x.size());
  return ((x.array() - mean) / sd).matrix();
}

}  // namespace

PredictionTrace average_traces(const EnsembleSpec& spec) {
  require(!spec.trace_paths.empty(), errc::invalid_config, "ensemble spec lists no traces");
  std::vector<double> weights = spec.weights;
  if (weights.empty()) weights.assign(spec.trace_paths.size(), 1.0);
  require(weights.size() == spec.trace_paths.size(), errc::invalid_config,
          "weights count does not match trace count");
  double weight_sum = 0.0;
  for (const double w : weights) {
    require(w >= 0.0, errc::invalid_config, "weights must be nonnegative");
    weight_sum += w;
  }
  require(weight_sum > 0.0, errc::all_zero_weights, "ensemble weights sum to zero");

  // Fixed summation order: sort by path, carrying weights along.
  std::vector<std::size_t> order(spec.trace_paths.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return spec.trace_paths[a] < spec.trace_paths[b];
  });

  PredictionTrace out;
  VecD acc;
  std::uint64_t digest = fnv1a("ensemble", 8);
  bool first = true;
  for (const std::size_t i : order) {
    const PredictionTrace trace = load_trace(spec.trace_paths[i]);
    if (first) {
      out.session_id = trace.session_id;
      out.rate_hz = trace.rate_hz;
      acc = VecD::Zero(trace.scores.size());
      first = false;
    } else {
      require(trace.session_id == out.session_id, errc::mixed_sessions,
              "trace for session " + trace.session_id + " mixed with " + out.session_id);
      require(trace.scores.size() == acc.size(), errc::length_mismatch,
              "trace lengths differ for session " + out.session_id);
      require(trace.rate_hz == out.rate_hz, errc::rate_mismatch,
              "trace rates differ for session " + out.session_id);
    }
    acc += weights[i] * normalized_scores(trace, spec.normalization);
    const std::string tag = trace.model_id + ":" + std::to_string(weights[i]) + ";";
    digest = fnv1a(tag.data(), tag.size(), digest);
  }
  const std::string norm_tag = trace_norm_name(spec.normalization);
  digest = fnv1a(norm_tag.data(), norm_tag.size(), digest);

  out.scores = (acc / weight_sum).cast<float>();
  out.model_id = "ens-" + hex64(digest);
  return out;
}

EnsembleManifest load_ensemble_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), errc::missing_field, "cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(errc::config_parse, path.string() + ": " + e.what());
  }
  EnsembleManifest m;
  try {
    require(j.contains("model_ids"), errc::config_parse, path.string() + ": missing model_ids");
    m.model_ids = j["model_ids"].get<std::vector<std::string>>();
    if (j.contains("weights")) m.weights = j["weights"].get<std::vector<double>>();
    if (j.contains("normalization")) m.normalization = parse_trace_norm(j["normalization"]);
  } catch (const json::exception& e) {
    raise(errc::config_parse, path.string() + ": " + e.what());
  }
  require(!m.model_ids.empty(), errc::invalid_config, "manifest lists no models");
  return m;
}

void write_ensemble_manifest(const EnsembleManifest& manifest, const std::filesystem::path& path) {
  std::uint64_t digest = fnv1a("ensemble", 8);
  for (const auto& id : manifest.model_ids) digest = fnv1a(id.data(), id.size(), digest);
  const json j = {
      {"model_ids", manifest.model_ids},
      {"weights", manifest.weights},
      {"normalization", trace_norm_name(manifest.normalization)},
      {"digest", hex64(digest)},
  };
  std::ofstream out(path);
  require(out.good(), errc::io_error, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::map<std::string, PredictionTrace> average_per_session(const EnsembleManifest& manifest,
                                                           const std::filesystem::path& traces_dir) {
  // Group available trace files by session for the manifest's model ids.
  std::map<std::string, std::vector<std::filesystem::path>> by_session;
  std::map<std::string, std::vector<double>> session_weights;
  const bool uniform = manifest.weights.empty();
  require(uniform || manifest.weights.size() == manifest.model_ids.size(), errc::invalid_config,
          "manifest weights count does not match model count");

  for (const auto& path : list_traces(traces_dir)) {
    const PredictionTrace probe = load_trace(path);
    const auto it = std::find(manifest.model_ids.begin(), manifest.model_ids.end(), probe.model_id);
    if (it == manifest.model_ids.end()) continue;
    by_session[probe.session_id].push_back(path);
    session_weights[probe.session_id].push_back(
        uniform ? 1.0 : manifest.weights[static_cast<std::size_t>(it - manifest.model_ids.begin())]);
  }
  require(!by_session.empty(), errc::missing_field,
          "no traces in " + traces_dir.string() + " match the manifest's model ids");

  std::map<std::string, PredictionTrace> out;
  for (auto& [session_id, paths] : by_session) {
    require(paths.size() == manifest.model_ids.size(), errc::missing_field,
            "session " + session_id + " has " + std::to_string(paths.size()) + " traces, manifest needs " +
                std::to_string(manifest.model_ids.size()));
    EnsembleSpec spec;
    spec.trace_paths = paths;
    spec.weights = session_weights[session_id];
    spec.normalization = manifest.normalization;
    out[session_id] = average_traces(spec);
  }
  return out;
}

EvalReport ensemble_evaluate(const EnsembleManifest& manifest,
                             const std::filesystem::path& traces_dir,
                             const std::filesystem::path& data_root,
                             const std::vector<std::string>& calibration_ids) {
  return evaluate_traces(average_per_session(manifest, traces_dir), data_root, calibration_ids);
}

}  // namespace shine
