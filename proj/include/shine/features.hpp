#pragma once

// Auxiliary-target computation for the extended training track: speech
// envelope and a 10-band mel spectrogram derived from the stimulus audio,
// sampled at the MEG rate, plus assembly of the composite target matrix.
//
// Method choices (envelope: full-wave rectification -> one-pole low-pass at
// 25 Hz -> integer decimation -> x^0.6 compression; mel: 512-sample frames,
// hop = audio_rate / out_rate, magnitude spectrum, triangular filters on the
// mel scale spanning 50 Hz to 8 kHz, log1p) are standard envelope-tracking
// practice and are pinned here so tests can assert exact arithmetic.

#include "shine/common.hpp"
#include "shine/signal.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace shine {

struct AudioWaveform {
  VecF samples;
  double rate_hz = 16000.0;
};

// Raw 32-bit little-endian float PCM with a JSON sidecar giving the rate:
// "<stem>.f32" plus "<stem>.json" containing {"rate_hz": ...}.
AudioWaveform load_audio(const std::filesystem::path& f32_path);
void write_audio(const AudioWaveform& a, const std::filesystem::path& f32_path);

enum class TargetMode { kStandard, kExtended };

inline const char* target_mode_name(TargetMode m) {
  return m == TargetMode::kStandard ? "standard" : "extended";
}
TargetMode parse_target_mode(const std::string& s);

// Row order is fixed: envelope, mel_1..mel_10, binary. Standard mode keeps
// only the binary row.
struct CompositeTarget {
  MatF bands;                      // K x T
  std::vector<std::string> roles;  // one label per row
  double rate_hz = 250.0;
};

inline constexpr int kMelBands = 10;
inline constexpr Eigen::Index kExtendedRows = kMelBands + 2;

ScoreSequence compute_envelope(const AudioWaveform& a, double out_rate_hz);

MatF compute_mel_bands(const AudioWaveform& a, int n_bands, double out_rate_hz,
                       int frame_len = 512);

CompositeTarget build_composite_target(const ScoreSequence& envelope, const MatF& mel,
                                       const ScoreSequence& binary, TargetMode mode);

namespace detail {
// Decimation factor source_rate / out_rate; RateMismatch unless integral.
Eigen::Index integer_decimation_factor(double source_rate_hz, double out_rate_hz);
// In-place iterative radix-2 FFT; n must be a power of two.
void fft_radix2(std::vector<std::complex<double>>& buf);
// Triangular mel filterbank weights over FFT bins 0..n_fft/2.
MatD mel_filterbank(int n_bands, int n_fft, double sample_rate_hz, double f_lo, double f_hi);
double mel_from_hz(double hz);
double hz_from_mel(double mel);
}  // namespace detail

}  // namespace shine
