#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace shine {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatF = Matrix<float>;
using VecF = Vector<float>;
using MatD = Matrix<double>;
using VecD = Vector<double>;

inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Error model. Every failure carries a stable name that the CLI prints and
// maps to an exit-code category (config / data / numeric).
// ---------------------------------------------------------------------------

enum class errc {
  length_mismatch,
  zero_variance,
  shape_mismatch,
  degenerate_target,
  too_short,
  rate_mismatch,
  non_binary_labels,
  corrupt_file,
  missing_field,
  session_too_short,
  sequence_too_short,
  too_few_sessions,
  invalid_config,
  non_finite_loss,
  all_windows_degenerate,
  single_class_labels,
  inconsistent_geometry,
  mixed_sessions,
  all_zero_weights,
  config_parse,
  io_error,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::length_mismatch: return "LengthMismatch";
    case errc::zero_variance: return "ZeroVariance";
    case errc::shape_mismatch: return "ShapeMismatch";
    case errc::degenerate_target: return "DegenerateTarget";
    case errc::too_short: return "TooShort";
    case errc::rate_mismatch: return "RateMismatch";
    case errc::non_binary_labels: return "NonBinaryLabels";
    case errc::corrupt_file: return "CorruptFile";
    case errc::missing_field: return "MissingField";
    case errc::session_too_short: return "SessionTooShort";
    case errc::sequence_too_short: return "SequenceTooShort";
    case errc::too_few_sessions: return "TooFewSessions";
    case errc::invalid_config: return "InvalidConfig";
    case errc::non_finite_loss: return "NonFiniteLoss";
    case errc::all_windows_degenerate: return "AllWindowsDegenerate";
    case errc::single_class_labels: return "SingleClassLabels";
    case errc::inconsistent_geometry: return "InconsistentGeometry";
    case errc::mixed_sessions: return "MixedSessions";
    case errc::all_zero_weights: return "AllZeroWeights";
    case errc::config_parse: return "ConfigParse";
    case errc::io_error: return "IoError";
  }
  return "UnknownError";
}

// Exit-code categories: 2 = config error, 3 = data error, 4 = numeric failure.
inline int errc_exit_code(errc c) {
  switch (c) {
    case errc::invalid_config:
    case errc::config_parse:
      return 2;
    case errc::zero_variance:
    case errc::degenerate_target:
    case errc::non_finite_loss:
    case errc::all_windows_degenerate:
      return 4;
    default:
      return 3;
  }
}

class Error : public std::runtime_error {
 public:
  Error(errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}
  errc code() const { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void raise(errc code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool ok, errc code, const std::string& message) {
  if (!ok) raise(code, message);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 has a standard-defined output sequence;
// the distributions below are hand-rolled so results do not depend on the
// standard library implementation.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return state_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(state_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller; one value per call, pair cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(static_cast<std::int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// FNV-1a 64-bit digest used for run manifests and ensemble ids.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace shine
