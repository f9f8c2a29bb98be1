#pragma once

// Session storage, 30-second windowing, leave-session-out splitting, and a
// synthetic envelope-following MEG generator that stands in for full-scale
// recordings during development and testing.
//
// On-disk session format: a directory holding
//   meta.json      {format, session_id, rate_hz, n_channels, n_samples, rows}
//   meg.f32        row-major channels x samples, little-endian float32
//   labels.u8      one byte per sample, 0 = silence, 1 = speech
//   envelope.f32   optional, one float per sample
//   mel.f32        optional, row-major 10 x samples
// Readers for other distribution formats are expected to adapt into this
// layout (write_session is the reference writer).

#include "shine/common.hpp"
#include "shine/features.hpp"
#include "shine/signal.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace shine {

struct SessionRecord {
  std::string session_id;
  MatF meg;                         // channels x samples
  std::vector<std::uint8_t> labels; // one per sample, values in {0,1}
  double rate_hz = 250.0;
  std::optional<VecF> envelope;     // aux feature track, same length
  std::optional<MatF> mel;          // aux feature tracks, kMelBands x samples

  Eigen::Index n_channels() const { return meg.rows(); }
  Eigen::Index n_samples() const { return meg.cols(); }
};

void write_session(const SessionRecord& s, const std::filesystem::path& dir);
SessionRecord load_session(const std::filesystem::path& dir);

// Session directories (those containing meta.json) under a data root, sorted.
std::vector<std::string> list_sessions(const std::filesystem::path& data_root);

// Per-channel z-score with statistics from this session only. Applied by the
// training and inference pipelines after load; load_session itself returns
// the stored payload bit-exactly.
void zscore_channels(SessionRecord& s);

struct TrainingWindow {
  MatF meg;     // channels x window
  MatF target;  // rows follow CompositeTarget order
  std::string session_id;
  Eigen::Index start_sample = 0;
};

// Windows start at 0, stride, 2*stride, ...; if the final window would
// overrun, one extra end-anchored window at T-W is appended unless it
// duplicates the last start. Extended mode requires aux rows, which are
// z-scored over the whole session before slicing.
std::vector<TrainingWindow> make_windows(const SessionRecord& s, double window_seconds = 30.0,
                                         double stride_seconds = 30.0,
                                         TargetMode mode = TargetMode::kStandard);

struct SplitPlan {
  std::vector<std::string> train_sessions;
  std::vector<std::string> val_sessions;
  std::uint64_t seed = 0;
};

SplitPlan leave_session_out_split(std::vector<std::string> session_ids, int n_val,
                                  std::uint64_t seed);
void write_split(const SplitPlan& plan, const std::filesystem::path& path);
SplitPlan load_split(const std::filesystem::path& path);

struct SynthConfig {
  std::string session_id = "synth";
  int channels = 32;
  double duration_s = 120.0;
  double rate_hz = 250.0;
  double snr = 10.0;  // signal RMS over noise RMS per channel; +inf disables noise
  // The mixing matrix and per-channel lags play the role of a fixed sensor
  // geometry: sessions generated with the same mixing_seed and channel count
  // share them, so models can generalize across held-out sessions.
  std::uint64_t mixing_seed = 0x5e5510;
};

// Alternating speech/silence segments with log-normal durations drive a
// latent feature set (binary track, smoothed envelope, modulated band
// patterns) that is mixed into the channels through a random matrix with
// per-channel lags of up to 40 ms, plus pink noise at the configured SNR.
// Labels, band patterns, and noise derive from `seed`; the mixing derives
// from cfg.mixing_seed only.
SessionRecord synth_session(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace shine
