// Command-line surface wiring the decoding toolkit into reproducible runs:
//   synth    generate synthetic sessions
//   split    draw a leave-session-out split
//   train    fit a model on a session corpus
//   predict  write per-session score traces from a checkpoint
//   eval     calibrate a threshold and report F1 metrics
//   ensemble average traces from several models, optionally evaluate
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
// Every mutating command writes a manifest.json (command, resolved config,
// seeds, input digests, tool version, timestamps) into its output directory;
// the manifest carries the only timestamps, all other artifacts are
// byte-identical across reruns with the same inputs and seeds.

#include <CLI11.hpp>
#include <json.hpp>

#include "shine/common.hpp"
#include "shine/dataset.hpp"
#include "shine/ensemble.hpp"
#include "shine/infer.hpp"
#include "shine/model.hpp"
#include "shine/train.hpp"

#include <atomic>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace shine;

namespace {

std::uint64_t digest_file(const fs::path& path, std::uint64_t h) {
  std::ifstream in(path, std::ios::binary);
  char buf[1 << 16];
  while (in.good()) {
    in.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

// Digest of a file, or of a directory's files in sorted relative order.
std::string digest_path(const fs::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string rel = fs::relative(f, path).string();
      h = fnv1a(rel.data(), rel.size(), h);
      h = digest_file(f, h);
    }
  } else if (fs::is_regular_file(path)) {
    h = digest_file(path, h);
  }
  return hex64(h);
}

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_manifest(const fs::path& out_dir, const std::string& command, const json& resolved,
                    const json& input_digests, const std::string& started) {
  const json manifest = {
      {"command", command},
      {"config", resolved},
      {"inputs", input_digests},
      {"tool_version", kToolVersion},
      {"started", started},
      {"finished", timestamp_utc()},
  };
  std::ofstream out(out_dir / "manifest.json");
  out << manifest.dump(2) << "\n";
}

// --calibrate-on accepts a split file (its val_sessions) or a comma list.
std::vector<std::string> resolve_session_list(const std::string& arg) {
  if (fs::exists(arg) && fs::is_regular_file(arg)) return load_split(arg).val_sessions;
  std::vector<std::string> ids;
  std::string cur;
  for (const char c : arg) {
    if (c == ',') {
      if (!cur.empty()) ids.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) ids.push_back(cur);
  require(!ids.empty(), errc::invalid_config, "expected a split file or comma-separated session ids");
  return ids;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), errc::config_parse, "cannot open config file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cmd_synth(const fs::path& out, int sessions, double duration, int channels, double snr,
              double rate, std::uint64_t seed) {
  const std::string started = timestamp_utc();
  fs::create_directories(out);
  json listing = json::array();
  for (int i = 0; i < sessions; ++i) {
    SynthConfig cfg;
    cfg.session_id = "s" + std::to_string(1000 + i);
    cfg.channels = channels;
    cfg.duration_s = duration;
    cfg.rate_hz = rate;
    cfg.snr = snr;
    const auto record = synth_session(cfg, seed + static_cast<std::uint64_t>(i));
    write_session(record, out / cfg.session_id);
    listing.push_back(cfg.session_id);
    std::cerr << "synth " << cfg.session_id << ": " << channels << " ch x " << record.n_samples()
              << " samples\n";
  }
  const json resolved = {{"sessions", sessions}, {"duration_s", duration}, {"channels", channels},
                         {"snr", snr},           {"rate_hz", rate},        {"seed", seed},
                         {"session_ids", listing}};
  write_manifest(out, "synth", resolved, json::object(), started);
  std::cout << json{{"command", "synth"}, {"out", out.string()}, {"sessions", sessions}}.dump()
            << "\n";
  return 0;
}

int cmd_split(const fs::path& data, int n_val, std::uint64_t seed, const fs::path& out) {
  const std::string started = timestamp_utc();
  const auto ids = list_sessions(data);
  const auto plan = leave_session_out_split(ids, n_val, seed);
  write_split(plan, out);
  {
    const json manifest = {{"command", "split"},
                           {"config", {{"n_val", n_val}, {"seed", seed}}},
                           {"inputs", {{"data", digest_path(data)}}},
                           {"tool_version", kToolVersion},
                           {"started", started},
                           {"finished", timestamp_utc()}};
    std::ofstream mf(out.string() + ".manifest.json");
    mf << manifest.dump(2) << "\n";
  }
  std::cout << json{{"command", "split"},
                    {"train_sessions", plan.train_sessions.size()},
                    {"val_sessions", plan.val_sessions.size()},
                    {"out", out.string()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train(const fs::path& data, const std::string& split_file, const std::string& mode,
              const fs::path& out, const std::string& model_config_file,
              const std::string& train_config_file, const CLI::App* sub, double lr,
              double weight_decay, int max_epochs, int batch_size, int n_val, std::uint64_t seed) {
  const std::string started = timestamp_utc();

  ModelConfig model_cfg;
  if (!model_config_file.empty()) model_cfg = model_config_from_json(slurp(model_config_file));
  TrainConfig train_cfg;
  if (!train_config_file.empty()) train_cfg = train_config_from_json(slurp(train_config_file));

  // Flags override file values when given explicitly.
  if (sub->count("--lr")) train_cfg.lr = lr;
  if (sub->count("--weight-decay")) train_cfg.weight_decay = weight_decay;
  if (sub->count("--max-epochs")) train_cfg.max_epochs = max_epochs;
  if (sub->count("--batch-size")) train_cfg.batch_size = batch_size;
  if (sub->count("--n-val")) train_cfg.n_val_sessions = n_val;
  if (sub->count("--seed")) {
    train_cfg.seed = seed;
    model_cfg.seed = seed;
  }
  train_cfg.mode = parse_target_mode(mode);

  // The corpus fixes the input channel count.
  const auto ids = list_sessions(data);
  require(!ids.empty(), errc::missing_field, "no sessions under " + data.string());
  model_cfg.in_channels = static_cast<int>(load_session(data / ids.front()).n_channels());

  std::optional<SplitPlan> split;
  if (!split_file.empty()) split = load_split(split_file);

  const auto report = train(model_cfg, train_cfg, data, out, split);
  write_split(report.split, out / "split.json");

  const json resolved = {{"model", json::parse(model_config_to_json(model_cfg))},
                         {"train", json::parse(train_config_to_json(train_cfg))}};
  const json inputs = {{"data", digest_path(data)},
                       {"split", split_file.empty() ? "" : digest_path(split_file)}};
  write_manifest(out, "train", resolved, inputs, started);

  std::cout << json{{"command", "train"},
                    {"epochs_run", report.epochs_run},
                    {"best_epoch", report.best_epoch},
                    {"best_val_pearson", report.best_val},
                    {"checkpoint", report.best_checkpoint.string()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_predict(const fs::path& ckpt, const fs::path& data, const fs::path& out, double window_s,
                double stride_s, double trim_s, std::string model_id,
                const std::string& sessions_arg, int jobs) {
  const std::string started = timestamp_utc();
  if (model_id.empty()) model_id = "m" + digest_path(ckpt).substr(0, 12);

  std::vector<std::string> ids =
      sessions_arg.empty() ? list_sessions(data) : resolve_session_list(sessions_arg);
  require(!ids.empty(), errc::missing_field, "no sessions to predict");
  fs::create_directories(out);

  const auto predict_one = [&](const std::string& id) {
    ShineModel model = ShineModel::load(ckpt);  // per-worker instance
    const auto session = load_session(data / id);
    const auto trace =
        predict_session(model, session, window_s, stride_s, trim_s, /*strict_tiling=*/true, model_id);
    write_trace(trace, out);
    std::cerr << "predict " << id << ": " << trace.scores.size() << " samples\n";
  };

  if (jobs <= 1) {
    for (const auto& id : ids) predict_one(id);
  } else {
    std::vector<std::thread> workers;
    std::atomic<std::size_t> next{0};
    for (int w = 0; w < jobs; ++w)
      workers.emplace_back([&]() {
        for (std::size_t i = next.fetch_add(1); i < ids.size(); i = next.fetch_add(1))
          predict_one(ids[i]);
      });
    for (auto& w : workers) w.join();
  }

  const json resolved = {{"window_seconds", window_s}, {"stride_seconds", stride_s},
                         {"trim_seconds", trim_s},     {"model_id", model_id},
                         {"sessions", ids},            {"jobs", jobs}};
  const json inputs = {{"ckpt", digest_path(ckpt)}, {"data", digest_path(data)}};
  write_manifest(out, "predict", resolved, inputs, started);
  std::cout << json{{"command", "predict"}, {"model_id", model_id}, {"sessions", ids.size()}}.dump()
            << "\n";
  return 0;
}

int cmd_eval(const fs::path& traces_dir, const fs::path& data, const std::string& calibrate_on,
             const fs::path& out_csv) {
  const auto calibration = resolve_session_list(calibrate_on);

  std::map<std::string, PredictionTrace> traces;
  for (const auto& path : list_traces(traces_dir)) {
    auto trace = load_trace(path);
    require(!traces.count(trace.session_id), errc::invalid_config,
            "multiple traces for session " + trace.session_id +
                "; eval expects one model (use the ensemble command to combine)");
    traces[trace.session_id] = std::move(trace);
  }
  require(!traces.empty(), errc::missing_field, "no traces under " + traces_dir.string());

  const auto report = evaluate_traces(traces, data, calibration);
  write_metrics_csv(report, out_csv);
  std::cout << json{{"command", "eval"},
                    {"threshold", report.threshold},
                    {"f1_macro", report.pooled.f1_macro},
                    {"sessions", report.sessions.size()},
                    {"out", out_csv.string()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_ensemble(const fs::path& manifest_file, const fs::path& traces_dir, const fs::path& out,
                 const std::string& data, const std::string& calibrate_on) {
  const std::string started = timestamp_utc();
  const auto manifest = load_ensemble_manifest(manifest_file);
  const auto averaged = average_per_session(manifest, traces_dir);

  fs::create_directories(out);
  for (const auto& [id, trace] : averaged) write_trace(trace, out);
  write_ensemble_manifest(manifest, out / "ensemble.json");

  json summary = {{"command", "ensemble"},
                  {"models", manifest.model_ids.size()},
                  {"sessions", averaged.size()},
                  {"out", out.string()}};

  if (!data.empty()) {
    require(!calibrate_on.empty(), errc::invalid_config,
            "--calibrate-on is required when --data is given");
    const auto report = evaluate_traces(averaged, data, resolve_session_list(calibrate_on));
    write_metrics_csv(report, out / "metrics.csv");
    summary["threshold"] = report.threshold;
    summary["f1_macro"] = report.pooled.f1_macro;
  }

  const json resolved = {{"model_ids", manifest.model_ids},
                         {"normalization", trace_norm_name(manifest.normalization)}};
  const json inputs = {{"manifest", digest_path(manifest_file)},
                       {"traces", digest_path(traces_dir)}};
  write_manifest(out, "ensemble", resolved, inputs, started);
  std::cout << summary.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech/silence decoding from MEG with the SHINE seq2seq network"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate synthetic envelope-following sessions");
  fs::path synth_out;
  int synth_sessions = 10, synth_channels = 32;
  double synth_duration = 120.0, synth_snr = 10.0, synth_rate = 250.0;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "Output corpus directory")->required();
  synth->add_option("--sessions", synth_sessions, "Number of sessions")->capture_default_str();
  synth->add_option("--duration", synth_duration, "Session duration in seconds")->capture_default_str();
  synth->add_option("--channels", synth_channels, "MEG channel count")->capture_default_str();
  synth->add_option("--snr", synth_snr, "Signal-to-noise ratio")->capture_default_str();
  synth->add_option("--rate", synth_rate, "Sample rate in Hz")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Base random seed")->capture_default_str();

  auto* split = app.add_subcommand("split", "Draw a leave-session-out split");
  fs::path split_data, split_out = "split.json";
  int split_n_val = 8;
  std::uint64_t split_seed = 0;
  split->add_option("--data", split_data, "Session corpus directory")->required();
  split->add_option("--n-val", split_n_val, "Held-out session count")->capture_default_str();
  split->add_option("--seed", split_seed, "Random seed")->capture_default_str();
  split->add_option("--out", split_out, "Split file to write")->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "Train the decoder on a session corpus");
  fs::path train_data, train_out;
  std::string train_split, train_mode = "standard", train_model_cfg, train_train_cfg;
  double train_lr = 1e-3, train_wd = 0.01;
  int train_epochs = 20, train_batch = 8, train_n_val = 8;
  std::uint64_t train_seed = 0;
  train_cmd->add_option("--data", train_data, "Session corpus directory")->required();
  train_cmd->add_option("--out", train_out, "Run directory")->required();
  train_cmd->add_option("--split", train_split, "Split file (default: draw from seed)");
  train_cmd->add_option("--mode", train_mode, "Target mode: standard or extended")
      ->capture_default_str();
  train_cmd->add_option("--model-config", train_model_cfg, "Model config JSON file");
  train_cmd->add_option("--config", train_train_cfg, "Train config JSON file");
  train_cmd->add_option("--lr", train_lr, "Initial learning rate")->capture_default_str();
  train_cmd->add_option("--weight-decay", train_wd, "AdamW weight decay")->capture_default_str();
  train_cmd->add_option("--max-epochs", train_epochs, "Epoch cap")->capture_default_str();
  train_cmd->add_option("--batch-size", train_batch, "Windows per batch")->capture_default_str();
  train_cmd->add_option("--n-val", train_n_val, "Held-out session count")->capture_default_str();
  train_cmd->add_option("--seed", train_seed, "Run seed")->capture_default_str();

  auto* predict = app.add_subcommand("predict", "Write per-session score traces");
  fs::path predict_ckpt, predict_data, predict_out;
  double predict_window = 30.0, predict_stride = 20.0, predict_trim = 5.0;
  std::string predict_model_id, predict_sessions;
  int predict_jobs = 1;
  predict->add_option("--ckpt", predict_ckpt, "Checkpoint file")->required();
  predict->add_option("--data", predict_data, "Session corpus directory")->required();
  predict->add_option("--out", predict_out, "Trace output directory")->required();
  predict->add_option("--window", predict_window, "Window seconds")->capture_default_str();
  predict->add_option("--stride", predict_stride, "Stride seconds")->capture_default_str();
  predict->add_option("--trim", predict_trim, "Edge trim seconds")->capture_default_str();
  predict->add_option("--model-id", predict_model_id, "Trace model id (default: checkpoint digest)");
  predict->add_option("--sessions", predict_sessions, "Comma list or split file (default: all)");
  predict->add_option("--jobs", predict_jobs, "Parallel session workers")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Calibrate a threshold and report F1 metrics");
  fs::path eval_traces, eval_data, eval_out = "metrics.csv";
  std::string eval_calibrate;
  eval->add_option("--traces", eval_traces, "Trace directory")->required();
  eval->add_option("--data", eval_data, "Session corpus directory")->required();
  eval->add_option("--calibrate-on", eval_calibrate, "Split file or comma list of session ids")
      ->required();
  eval->add_option("--out", eval_out, "Metrics CSV to write")->capture_default_str();

  auto* ens = app.add_subcommand("ensemble", "Average traces from several models");
  fs::path ens_manifest, ens_traces, ens_out;
  std::string ens_data, ens_calibrate;
  ens->add_option("--manifest", ens_manifest, "Ensemble manifest JSON")->required();
  ens->add_option("--traces", ens_traces, "Trace directory")->required();
  ens->add_option("--out", ens_out, "Output directory")->required();
  ens->add_option("--data", ens_data, "Session corpus (enables evaluation)");
  ens->add_option("--calibrate-on", ens_calibrate, "Split file or comma list of session ids");

  try {
    app.parse(argc, argv);
    if (synth->parsed())
      return cmd_synth(synth_out, synth_sessions, synth_duration, synth_channels, synth_snr,
                       synth_rate, synth_seed);
    if (split->parsed()) return cmd_split(split_data, split_n_val, split_seed, split_out);
    if (train_cmd->parsed())
      return cmd_train(train_data, train_split, train_mode, train_out, train_model_cfg,
                       train_train_cfg, train_cmd, train_lr, train_wd, train_epochs, train_batch,
                       train_n_val, train_seed);
    if (predict->parsed())
      return cmd_predict(predict_ckpt, predict_data, predict_out, predict_window, predict_stride,
                         predict_trim, predict_model_id, predict_sessions, predict_jobs);
    if (eval->parsed()) return cmd_eval(eval_traces, eval_data, eval_calibrate, eval_out);
    if (ens->parsed()) return cmd_ensemble(ens_manifest, ens_traces, ens_out, ens_data, ens_calibrate);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return errc_exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
