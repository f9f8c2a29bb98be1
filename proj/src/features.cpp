#include "shine/features.hpp"

#include <json.hpp>

#include <cmath>
#include <complex>
#include <fstream>

namespace shine {

using nlohmann::json;

namespace {

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), errc::missing_field, "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(errc::config_parse, path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace

AudioWaveform load_audio(const std::filesystem::path& f32_path) {
  std::ifstream in(f32_path, std::ios::binary | std::ios::ate);
  require(in.good(), errc::missing_field, "cannot open " + f32_path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  require(bytes % sizeof(float) == 0, errc::corrupt_file,
          f32_path.string() + ": size is not a multiple of 4");
  in.seekg(0);

  AudioWaveform a;
  a.samples.resize(static_cast<Eigen::Index>(bytes / sizeof(float)));
  in.read(reinterpret_cast<char*>(a.samples.data()), static_cast<std::streamsize>(bytes));
  require(in.good(), errc::corrupt_file, f32_path.string() + ": short read");

  std::filesystem::path sidecar = f32_path;
  sidecar.replace_extension(".json");
  const json meta = read_json_file(sidecar);
  require(meta.contains("rate_hz"), errc::missing_field, sidecar.string() + ": rate_hz");
  a.rate_hz = meta["rate_hz"].get<double>();
  require(a.rate_hz > 0, errc::invalid_config, "audio rate must be positive");
  return a;
}

void write_audio(const AudioWaveform& a, const std::filesystem::path& f32_path) {
  std::ofstream out(f32_path, std::ios::binary);
  require(out.good(), errc::io_error, "cannot write " + f32_path.string());
  out.write(reinterpret_cast<const char*>(a.samples.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(a.samples.size())));
  std::filesystem::path sidecar = f32_path;
  sidecar.replace_extension(".json");
  std::ofstream meta(sidecar);
  meta << json{{"rate_hz", a.rate_hz}}.dump(2) << "\n";
}

TargetMode parse_target_mode(const std::string& s) {
  if (s == "standard") return TargetMode::kStandard;
  if (s == "extended") return TargetMode::kExtended;
  raise(errc::config_parse, "mode must be standard or extended, got '" + s + "'");
}

namespace detail {

Eigen::Index integer_decimation_factor(double source_rate_hz, double out_rate_hz) {
  require(source_rate_hz > 0 && out_rate_hz > 0, errc::invalid_config, "rates must be positive");
  const double factor = source_rate_hz / out_rate_hz;
  const double rounded = std::round(factor);
  require(rounded >= 1.0 && std::abs(factor - rounded) < 1e-9, errc::rate_mismatch,
          "decimation factor " + std::to_string(factor) + " is not a positive integer");
  return static_cast<Eigen::Index>(rounded);
}

void fft_radix2(std::vector<std::complex<double>>& buf) {
  const std::size_t n = buf.size();
  if (n < 2) return;
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(buf[i], buf[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = buf[i + k];
        const auto v = buf[i + k + len / 2] * w;
        buf[i + k] = u + v;
        buf[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

double mel_from_hz(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double hz_from_mel(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MatD mel_filterbank(int n_bands, int n_fft, double sample_rate_hz, double f_lo, double f_hi) {
  const int n_bins = n_fft / 2 + 1;
  const double m_lo = mel_from_hz(f_lo);
  const double m_hi = mel_from_hz(f_hi);
  // n_bands + 2 mel points define n_bands triangles.
  std::vector<double> edges(static_cast<std::size_t>(n_bands) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = hz_from_mel(m_lo + (m_hi - m_lo) * static_cast<double>(i) /
                                      static_cast<double>(n_bands + 1));

  MatD fb = MatD::Zero(n_bands, n_bins);
  for (int b = 0; b < n_bands; ++b) {
    const double left = edges[static_cast<std::size_t>(b)];
    const double center = edges[static_cast<std::size_t>(b) + 1];
    const double right = edges[static_cast<std::size_t>(b) + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate_hz / static_cast<double>(n_fft);
      double w = 0.0;
      if (f >= left && f <= center && center > left)
        w = (f - left) / (center - left);
      else if (f > center && f <= right && right > center)
        w = (right - f) / (right - center);
      fb(b, k) = w;
    }
  }
  return fb;
}

}  // namespace detail

ScoreSequence compute_envelope(const AudioWaveform& a, double out_rate_hz) {
  require(a.samples.size() > 0, errc::invalid_config, "empty audio");
  const Eigen::Index factor = detail::integer_decimation_factor(a.rate_hz, out_rate_hz);

  // Full-wave rectification followed by a one-pole low-pass at 25 Hz.
  const double alpha = std::exp(-2.0 * M_PI * 25.0 / a.rate_hz);
  const Eigen::Index n_out = a.samples.size() / factor;
  ScoreSequence env;
  env.rate_hz = out_rate_hz;
  env.values.resize(n_out);

  double y = 0.0;
  Eigen::Index out_i = 0;
  for (Eigen::Index t = 0; t < a.samples.size() && out_i < n_out; ++t) {
    y = alpha * y + (1.0 - alpha) * std::abs(static_cast<double>(a.samples[t]));
    if (t % factor == 0) env.values[out_i++] = static_cast<float>(std::pow(y, 0.6));
  }
  return env;
}

MatF compute_mel_bands(const AudioWaveform& a, int n_bands, double out_rate_hz, int frame_len) {
  require(n_bands >= 1, errc::invalid_config, "n_bands must be >= 1");
  require(frame_len >= 2 && (frame_len & (frame_len - 1)) == 0, errc::invalid_config,
          "frame_len must be a power of two");
  require(a.samples.size() > 0, errc::invalid_config, "empty audio");
  const Eigen::Index hop = detail::integer_decimation_factor(a.rate_hz, out_rate_hz);

  const double f_hi = std::min(8000.0, a.rate_hz / 2.0);
  const MatD fb = detail::mel_filterbank(n_bands, frame_len, a.rate_hz, 50.0, f_hi);
  const int n_bins = frame_len / 2 + 1;

  const Eigen::Index n_frames = a.samples.size() / hop;
  MatF bands(n_bands, n_frames);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(frame_len));
  VecD mag(n_bins);
  for (Eigen::Index f = 0; f < n_frames; ++f) {
    const Eigen::Index start = f * hop;
    for (Eigen::Index i = 0; i < frame_len; ++i) {
      const Eigen::Index t = start + i;
      buf[static_cast<std::size_t>(i)] =
          t < a.samples.size() ? static_cast<double>(a.samples[t]) : 0.0;
    }
    detail::fft_radix2(buf);
    for (int k = 0; k < n_bins; ++k) mag[k] = std::abs(buf[static_cast<std::size_t>(k)]);
    const VecD e = fb * mag;
    for (int b = 0; b < n_bands; ++b) bands(b, f) = static_cast<float>(std::log1p(e[b]));
  }
  return bands;
}

CompositeTarget build_composite_target(const ScoreSequence& envelope, const MatF& mel,
                                       const ScoreSequence& binary, TargetMode mode) {
  const Eigen::Index T = binary.size();
  require(T > 0, errc::length_mismatch, "empty binary sequence");
  for (Eigen::Index t = 0; t < T; ++t)
    require(binary.values[t] == 0.0f || binary.values[t] == 1.0f, errc::non_binary_labels,
            "binary row must contain only 0/1");

  CompositeTarget out;
  out.rate_hz = binary.rate_hz;
  if (mode == TargetMode::kStandard) {
    out.bands = binary.values.transpose();
    out.roles = {"binary"};
    return out;
  }

  require(envelope.size() == T, errc::length_mismatch,
          "envelope length " + std::to_string(envelope.size()) + " vs binary " + std::to_string(T));
  require(mel.cols() == T, errc::length_mismatch,
          "mel length " + std::to_string(mel.cols()) + " vs binary " + std::to_string(T));
  require(mel.rows() == kMelBands, errc::shape_mismatch,
          "extended mode expects " + std::to_string(kMelBands) + " mel rows");
  require(envelope.rate_hz == binary.rate_hz, errc::rate_mismatch,
          "envelope and binary rates differ");

  out.bands.resize(kExtendedRows, T);
  out.bands.row(0) = envelope.values.transpose();
  out.bands.middleRows(1, kMelBands) = mel;
  out.bands.row(kExtendedRows - 1) = binary.values.transpose();
  out.roles.reserve(static_cast<std::size_t>(kExtendedRows));
  out.roles.emplace_back("envelope");
  for (int b = 1; b <= kMelBands; ++b) out.roles.emplace_back("mel_" + std::to_string(b));
  out.roles.emplace_back("binary");
  return out;
}

}  // namespace shine
