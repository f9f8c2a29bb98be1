#include "shine/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace shine {

using nlohmann::json;

namespace {

constexpr const char* kSessionFormat = "shine-session-v1";
constexpr const char* kSplitFormat = "shine-split-v1";

void write_bytes(const std::filesystem::path& path, const void* data, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), errc::io_error, "cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  require(out.good(), errc::io_error, "short write to " + path.string());
}

std::vector<char> read_bytes(const std::filesystem::path& path, std::size_t expected_bytes,
                             const char* what) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), errc::missing_field, "missing " + std::string(what) + ": " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  require(bytes == expected_bytes, errc::corrupt_file,
          path.string() + ": expected " + std::to_string(expected_bytes) + " bytes, found " +
              std::to_string(bytes));
  std::vector<char> buf(bytes);
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(bytes));
  require(in.good(), errc::corrupt_file, path.string() + ": short read");
  return buf;
}

// Disk layout is row-major; Eigen matrices are column-major.
void write_row_major_f32(const std::filesystem::path& path, const MatF& m) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), errc::io_error, "cannot write " + path.string());
  std::vector<float> row(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(sizeof(float) * row.size()));
  }
  require(out.good(), errc::io_error, "short write to " + path.string());
}

MatF read_row_major_f32(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols,
                        const char* what) {
  const auto buf = read_bytes(path, sizeof(float) * static_cast<std::size_t>(rows * cols), what);
  const auto* data = reinterpret_cast<const float*>(buf.data());
  MatF m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[r * cols + c];
  return m;
}

json read_json_file(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path);
  require(in.good(), errc::missing_field, "missing " + std::string(what) + ": " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(errc::corrupt_file, path.string() + ": " + e.what());
  }
  return j;
}

template <typename T>
T meta_field(const json& j, const char* key, const std::filesystem::path& where) {
  require(j.contains(key), errc::missing_field, where.string() + ": missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    raise(errc::corrupt_file, where.string() + ": field '" + key + "': " + e.what());
  }
}

// Pink-ish 1/f noise, Paul Kellet's three-pole filter of white noise.
class PinkNoise {
 public:
  explicit PinkNoise(Rng& rng) : rng_(rng) {}
  double next() {
    const double w = rng_.normal();
    b0_ = 0.99765 * b0_ + w * 0.0990460;
    b1_ = 0.96300 * b1_ + w * 0.2965164;
    b2_ = 0.57000 * b2_ + w * 1.0526913;
    return b0_ + b1_ + b2_ + w * 0.1848;
  }

 private:
  Rng& rng_;
  double b0_ = 0.0, b1_ = 0.0, b2_ = 0.0;
};

VecD standardized(const VecD& x) {
  const double m = x.mean();
  const double sd = std::sqrt((x.array() - m).square().sum() / static_cast<double>(x.size()));
  if (sd <= 0.0) return VecD::Zero(x.size());
  return ((x.array() - m) / sd).matrix();
}

}  // namespace

void write_session(const SessionRecord& s, const std::filesystem::path& dir) {
  require(s.meg.rows() >= 1, errc::invalid_config, "session needs at least one channel");
  require(static_cast<Eigen::Index>(s.labels.size()) == s.meg.cols(), errc::length_mismatch,
          "labels length must equal meg column count");
  std::filesystem::create_directories(dir);

  json rows = json::array({"meg", "labels"});
  if (s.envelope) rows.push_back("envelope");
  if (s.mel) rows.push_back("mel");
  const json meta = {
      {"format", kSessionFormat},   {"session_id", s.session_id}, {"rate_hz", s.rate_hz},
      {"n_channels", s.meg.rows()}, {"n_samples", s.meg.cols()},  {"rows", rows},
      {"mel_bands", kMelBands},
  };
  std::ofstream mf(dir / "meta.json");
  require(mf.good(), errc::io_error, "cannot write meta.json in " + dir.string());
  mf << meta.dump(2) << "\n";

  write_row_major_f32(dir / "meg.f32", s.meg);
  write_bytes(dir / "labels.u8", s.labels.data(), s.labels.size());
  if (s.envelope) {
    write_bytes(dir / "envelope.f32", s.envelope->data(),
                sizeof(float) * static_cast<std::size_t>(s.envelope->size()));
  }
  if (s.mel) write_row_major_f32(dir / "mel.f32", *s.mel);
}

SessionRecord load_session(const std::filesystem::path& dir) {
  const json meta = read_json_file(dir / "meta.json", "meta.json");
  SessionRecord s;
  s.session_id = meta_field<std::string>(meta, "session_id", dir / "meta.json");
  s.rate_hz = meta_field<double>(meta, "rate_hz", dir / "meta.json");
  const auto C = meta_field<Eigen::Index>(meta, "n_channels", dir / "meta.json");
  const auto T = meta_field<Eigen::Index>(meta, "n_samples", dir / "meta.json");
  require(s.rate_hz > 0, errc::corrupt_file, dir.string() + ": rate_hz must be positive");
  require(C >= 1 && T >= 1, errc::corrupt_file, dir.string() + ": bad dimensions");

  s.meg = read_row_major_f32(dir / "meg.f32", C, T, "meg.f32");
  const auto lab = read_bytes(dir / "labels.u8", static_cast<std::size_t>(T), "labels.u8");
  s.labels.resize(static_cast<std::size_t>(T));
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(lab[i]);
    require(v == 0 || v == 1, errc::non_binary_labels,
            dir.string() + ": label " + std::to_string(v) + " at sample " + std::to_string(i));
    s.labels[i] = v;
  }

  const auto rows = meta_field<std::vector<std::string>>(meta, "rows", dir / "meta.json");
  const bool has_env = std::find(rows.begin(), rows.end(), "envelope") != rows.end();
  const bool has_mel = std::find(rows.begin(), rows.end(), "mel") != rows.end();
  if (has_env) {
    const auto buf = read_bytes(dir / "envelope.f32", sizeof(float) * static_cast<std::size_t>(T),
                                "envelope.f32");
    VecF env(T);
    std::memcpy(env.data(), buf.data(), buf.size());
    s.envelope = std::move(env);
  }
  if (has_mel) s.mel = read_row_major_f32(dir / "mel.f32", kMelBands, T, "mel.f32");
  return s;
}

std::vector<std::string> list_sessions(const std::filesystem::path& data_root) {
  require(std::filesystem::is_directory(data_root), errc::missing_field,
          "not a directory: " + data_root.string());
  std::vector<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(data_root)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "meta.json"))
      ids.push_back(entry.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

void zscore_channels(SessionRecord& s) { s.meg = zscore_normalize(s.meg); }

std::vector<TrainingWindow> make_windows(const SessionRecord& s, double window_seconds,
                                         double stride_seconds, TargetMode mode) {
  const Eigen::Index T = s.n_samples();
  const auto W = static_cast<Eigen::Index>(std::llround(window_seconds * s.rate_hz));
  const auto stride = static_cast<Eigen::Index>(std::llround(stride_seconds * s.rate_hz));
  require(W >= 2, errc::invalid_config, "window too small");
  require(stride >= 1, errc::invalid_config, "stride must be positive");
  require(T >= W, errc::session_too_short,
          "session " + s.session_id + " has " + std::to_string(T) + " samples, window needs " +
              std::to_string(W));

  std::vector<Eigen::Index> starts;
  for (Eigen::Index p = 0; p + W <= T; p += stride) starts.push_back(p);
  if (starts.back() != T - W) starts.push_back(T - W);

  // Aux rows are standardized over the whole session before slicing so that
  // every window sees the same scale.
  MatF aux;
  if (mode == TargetMode::kExtended) {
    require(s.envelope.has_value() && s.mel.has_value(), errc::missing_field,
            "session " + s.session_id + " lacks aux feature rows required by extended mode");
    aux.resize(kMelBands + 1, T);
    aux.row(0) = s.envelope->transpose();
    aux.middleRows(1, kMelBands) = *s.mel;
    aux = zscore_normalize(aux);
  }

  std::vector<TrainingWindow> windows;
  windows.reserve(starts.size());
  for (const auto p : starts) {
    TrainingWindow w;
    w.session_id = s.session_id;
    w.start_sample = p;
    w.meg = s.meg.middleCols(p, W);

    ScoreSequence binary;
    binary.rate_hz = s.rate_hz;
    binary.values.resize(W);
    for (Eigen::Index i = 0; i < W; ++i)
      binary.values[i] = static_cast<float>(s.labels[static_cast<std::size_t>(p + i)]);

    if (mode == TargetMode::kStandard) {
      w.target = build_composite_target({}, {}, binary, mode).bands;
    } else {
      ScoreSequence env;
      env.rate_hz = s.rate_hz;
      env.values = aux.row(0).segment(p, W).transpose();
      const MatF mel = aux.middleRows(1, kMelBands).middleCols(p, W);
      w.target = build_composite_target(env, mel, binary, mode).bands;
    }
    windows.push_back(std::move(w));
  }
  return windows;
}

SplitPlan leave_session_out_split(std::vector<std::string> session_ids, int n_val,
                                  std::uint64_t seed) {
  require(n_val >= 1, errc::invalid_config, "n_val must be at least 1");
  require(static_cast<std::size_t>(n_val) < session_ids.size(), errc::too_few_sessions,
          std::to_string(session_ids.size()) + " sessions cannot hold out " + std::to_string(n_val));
  std::sort(session_ids.begin(), session_ids.end());

  Rng rng(seed);
  rng.shuffle(session_ids);

  SplitPlan plan;
  plan.seed = seed;
  plan.val_sessions.assign(session_ids.begin(), session_ids.begin() + n_val);
  plan.train_sessions.assign(session_ids.begin() + n_val, session_ids.end());
  std::sort(plan.val_sessions.begin(), plan.val_sessions.end());
  std::sort(plan.train_sessions.begin(), plan.train_sessions.end());
  return plan;
}

void write_split(const SplitPlan& plan, const std::filesystem::path& path) {
  const json j = {
      {"format", kSplitFormat},
      {"seed", plan.seed},
      {"train_sessions", plan.train_sessions},
      {"val_sessions", plan.val_sessions},
  };
  std::ofstream out(path);
  require(out.good(), errc::io_error, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

SplitPlan load_split(const std::filesystem::path& path) {
  const json j = read_json_file(path, "split file");
  SplitPlan plan;
  plan.seed = meta_field<std::uint64_t>(j, "seed", path);
  plan.train_sessions = meta_field<std::vector<std::string>>(j, "train_sessions", path);
  plan.val_sessions = meta_field<std::vector<std::string>>(j, "val_sessions", path);
  return plan;
}

SessionRecord synth_session(const SynthConfig& cfg, std::uint64_t seed) {
  require(cfg.channels >= 1, errc::invalid_config, "channels must be >= 1");
  require(cfg.duration_s >= 30.0, errc::invalid_config, "duration must be at least one 30 s window");
  require(cfg.rate_hz > 0.0, errc::invalid_config, "rate must be positive");
  require(cfg.snr > 0.0, errc::invalid_config, "snr must be positive");

  const auto T = static_cast<Eigen::Index>(std::llround(cfg.duration_s * cfg.rate_hz));
  const int C = cfg.channels;
  Rng rng(seed);

  // Alternating speech/silence segments, log-normal durations.
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(T));
  bool speech = rng.uniform() < 0.5;
  Eigen::Index t = 0;
  while (t < T) {
    const double median = speech ? 2.5 : 1.2;
    const double dur = std::clamp(median * std::exp(0.5 * rng.normal()), 0.4, 8.0);
    const auto len = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(dur * cfg.rate_hz)));
    for (Eigen::Index i = t; i < std::min(T, t + len); ++i)
      labels[static_cast<std::size_t>(i)] = speech ? 1 : 0;
    t += len;
    speech = !speech;
  }

  // Latent feature rows: binary track, smoothed envelope, modulated bands.
  const int n_latents = kMelBands + 2;
  MatD latents(n_latents, T);
  for (Eigen::Index i = 0; i < T; ++i) latents(0, i) = labels[static_cast<std::size_t>(i)];

  const double alpha_env = std::exp(-1.0 / (0.08 * cfg.rate_hz));
  double y = 0.0;
  for (Eigen::Index i = 0; i < T; ++i) {
    y = alpha_env * y + (1.0 - alpha_env) * latents(0, i);
    latents(1, i) = y;
  }

  const double alpha_band = std::exp(-1.0 / (0.04 * cfg.rate_hz));
  for (int b = 0; b < kMelBands; ++b) {
    const double freq = 0.2 + 1.3 * rng.uniform();
    const double phase = 2.0 * M_PI * rng.uniform();
    double z = 0.0;
    for (Eigen::Index i = 0; i < T; ++i) {
      const double mod = 0.55 + 0.45 * std::sin(2.0 * M_PI * freq * static_cast<double>(i) / cfg.rate_hz + phase);
      z = alpha_band * z + (1.0 - alpha_band) * latents(0, i) * mod;
      latents(2 + b, i) = z;
    }
  }
  for (int l = 0; l < n_latents; ++l) latents.row(l) = standardized(latents.row(l).transpose()).transpose();

  // Random mixing with per-channel lags of up to 40 ms. Drawn from the
  // dedicated mixing seed so a corpus of sessions shares one "geometry".
  const auto max_lag = static_cast<Eigen::Index>(std::llround(0.04 * cfg.rate_hz));
  Rng mix_rng(cfg.mixing_seed);
  MatD mixing(C, n_latents);
  for (int c = 0; c < C; ++c)
    for (int l = 0; l < n_latents; ++l)
      mixing(c, l) = mix_rng.normal() / std::sqrt(static_cast<double>(n_latents));
  std::vector<Eigen::Index> lags(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) lags[static_cast<std::size_t>(c)] = mix_rng.uniform_int(max_lag + 1);

  SessionRecord s;
  s.session_id = cfg.session_id;
  s.rate_hz = cfg.rate_hz;
  s.labels = labels;
  s.meg.resize(C, T);
  MatD signal(C, T);
  for (int c = 0; c < C; ++c) {
    const Eigen::Index lag = lags[static_cast<std::size_t>(c)];
    for (Eigen::Index i = 0; i < T; ++i) {
      double v = 0.0;
      if (i >= lag) {
        for (int l = 0; l < n_latents; ++l) v += mixing(c, l) * latents(l, i - lag);
      }
      signal(c, i) = v;
    }
  }

  const bool noiseless = std::isinf(cfg.snr);
  for (int c = 0; c < C; ++c) {
    double noise_scale = 0.0;
    VecD noise = VecD::Zero(T);
    if (!noiseless) {
      PinkNoise pink(rng);
      for (Eigen::Index i = 0; i < T; ++i) noise[i] = pink.next();
      const double signal_rms = std::sqrt(signal.row(c).squaredNorm() / static_cast<double>(T));
      const double noise_rms = std::sqrt(noise.squaredNorm() / static_cast<double>(T));
      if (noise_rms > 0.0) noise_scale = signal_rms / (cfg.snr * noise_rms);
    }
    for (Eigen::Index i = 0; i < T; ++i)
      s.meg(c, i) = static_cast<float>(signal(c, i) + noise_scale * noise[i]);
  }

  s.envelope = latents.row(1).transpose().cast<float>();
  s.mel = latents.middleRows(2, kMelBands).cast<float>();
  return s;
}

}  // namespace shine
