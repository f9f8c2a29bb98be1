#pragma once

// Scalar/sequence numerical primitives shared by every other component:
// Pearson correlation, the negative-Pearson training objective and its
// analytic gradient, per-row z-score normalization, and edge trimming.
//
// Conventions: sequence payloads are float32 throughout the toolkit, all
// accumulations here run in float64. Correlation uses population (1/N)
// normalization in both covariance and variances; the ratio is invariant
// to that choice, it is fixed so tests can assert bit-exact values.

#include "shine/common.hpp"

#include <cmath>
#include <optional>

namespace shine {

// Continuous per-sample score sequence at a fixed sample rate.
struct ScoreSequence {
  VecF values;
  double rate_hz = 250.0;

  Eigen::Index size() const { return values.size(); }
};

namespace detail {

template <typename Scalar>
struct RowMoments {
  double mean_x, mean_y, var_x, var_y, cov;
};

template <typename Derived1, typename Derived2>
RowMoments<double> row_moments(const Eigen::MatrixBase<Derived1>& x,
                               const Eigen::MatrixBase<Derived2>& y) {
  const auto n = static_cast<double>(x.size());
  const double mx = x.template cast<double>().mean();
  const double my = y.template cast<double>().mean();
  const auto dx = x.template cast<double>().array() - mx;
  const auto dy = y.template cast<double>().array() - my;
  RowMoments<double> m;
  m.mean_x = mx;
  m.mean_y = my;
  m.var_x = dx.square().sum() / n;
  m.var_y = dy.square().sum() / n;
  m.cov = (dx * dy).sum() / n;
  return m;
}

}  // namespace detail

// Sample Pearson correlation of two equal-length vectors.
// Errors: LengthMismatch (unequal or < 2 samples), ZeroVariance (either
// input constant). Metrics must not silently lie, so unlike the loss below
// there is no epsilon guard here.
template <typename Derived1, typename Derived2>
double pearson_corr(const Eigen::MatrixBase<Derived1>& x, const Eigen::MatrixBase<Derived2>& y) {
  require(x.size() == y.size(), errc::length_mismatch,
          "pearson_corr: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  require(x.size() >= 2, errc::length_mismatch, "pearson_corr: need at least 2 samples");
  const auto m = detail::row_moments(x, y);
  require(m.var_x > 0.0 && m.var_y > 0.0, errc::zero_variance,
          "pearson_corr: constant input sequence");
  return m.cov / std::sqrt(m.var_x * m.var_y);
}

// Epsilon-guarded correlation used inside the loss and for validation
// summaries: a constant prediction yields 0 instead of an error.
template <typename Derived1, typename Derived2>
double guarded_corr(const Eigen::MatrixBase<Derived1>& x, const Eigen::MatrixBase<Derived2>& y,
                    double eps = 1e-8) {
  const auto m = detail::row_moments(x, y);
  return m.cov / (std::sqrt(m.var_x * m.var_y) + eps);
}

enum class ConstantTargetPolicy {
  kError,  // a constant target row raises DegenerateTarget
  kSkip,   // default: skip the row and average the remaining ones
};

template <typename Scalar>
struct LossResult {
  double value = 0.0;
  Matrix<Scalar> grad;  // d(loss)/d(pred), same shape as pred
  int rows_used = 0;
  int rows_skipped = 0;
};

// Mean over rows of -corr(pred_k, target_k), with the denominator guarded
// by +eps so silence-only windows keep training finite. Differentiable in
// pred wherever pred rows are non-constant; value lies in [-1, 1].
template <typename Scalar>
LossResult<Scalar> neg_pearson_loss_grad(const Matrix<Scalar>& pred, const Matrix<Scalar>& target,
                                         ConstantTargetPolicy policy = ConstantTargetPolicy::kSkip,
                                         double eps = 1e-8) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), errc::shape_mismatch,
          "neg_pearson_loss: pred " + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) +
              " vs target " + std::to_string(target.rows()) + "x" + std::to_string(target.cols()));
  require(pred.cols() >= 2, errc::shape_mismatch, "neg_pearson_loss: need at least 2 time steps");

  const auto K = pred.rows();
  const auto T = pred.cols();
  const double n = static_cast<double>(T);

  LossResult<Scalar> out;
  out.grad = Matrix<Scalar>::Zero(K, T);

  // First pass decides which rows participate so the mean divisor is known
  // before gradients are written.
  std::vector<bool> use(static_cast<std::size_t>(K), true);
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto m = detail::row_moments(target.row(k), target.row(k));
    if (m.var_x <= 0.0) {
      require(policy != ConstantTargetPolicy::kError, errc::degenerate_target,
              "neg_pearson_loss: constant target row " + std::to_string(k));
      use[static_cast<std::size_t>(k)] = false;
      ++out.rows_skipped;
    }
  }
  out.rows_used = static_cast<int>(K) - out.rows_skipped;
  require(out.rows_used > 0, errc::degenerate_target, "neg_pearson_loss: every target row is constant");
  const double row_weight = 1.0 / static_cast<double>(out.rows_used);

  double loss = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    if (!use[static_cast<std::size_t>(k)]) continue;
    const VecD p = pred.row(k).transpose().template cast<double>();
    const VecD t = target.row(k).transpose().template cast<double>();
    const double mp = p.mean();
    const double mt = t.mean();
    const VecD dp = p.array() - mp;
    const VecD dt = t.array() - mt;
    const double vp = dp.squaredNorm() / n;
    const double vt = dt.squaredNorm() / n;
    const double cov = dp.dot(dt) / n;
    const double sp = std::sqrt(vp);
    const double st = std::sqrt(vt);
    const double denom = sp * st + eps;
    const double corr = cov / denom;
    loss += -corr * row_weight;

    // d corr / d pred_i = (dt_i/n)/denom - cov*st*dp_i / (n*sp*denom^2);
    // the second term vanishes with dp when pred is constant.
    const double sp_safe = std::max(sp, 1e-300);
    const VecD g = (dt / (n * denom)) - dp * (cov * st / (n * sp_safe * denom * denom));
    out.grad.row(k) = (-row_weight * g).transpose().template cast<Scalar>();
  }
  out.value = loss;
  return out;
}

template <typename Scalar>
double neg_pearson_loss(const Matrix<Scalar>& pred, const Matrix<Scalar>& target,
                        ConstantTargetPolicy policy = ConstantTargetPolicy::kSkip,
                        double eps = 1e-8) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), errc::shape_mismatch,
          "neg_pearson_loss: shape mismatch");
  require(pred.cols() >= 2, errc::shape_mismatch, "neg_pearson_loss: need at least 2 time steps");
  int used = 0;
  double loss = 0.0;
  for (Eigen::Index k = 0; k < pred.rows(); ++k) {
    const auto tm = detail::row_moments(target.row(k), target.row(k));
    if (tm.var_x <= 0.0) {
      require(policy != ConstantTargetPolicy::kError, errc::degenerate_target,
              "neg_pearson_loss: constant target row " + std::to_string(k));
      continue;
    }
    loss += -guarded_corr(pred.row(k), target.row(k), eps);
    ++used;
  }
  require(used > 0, errc::degenerate_target, "neg_pearson_loss: every target row is constant");
  return loss / static_cast<double>(used);
}

template <typename Scalar>
struct RowStats {
  Vector<Scalar> mean;
  Vector<Scalar> stddev;  // population (1/N) standard deviation
};

template <typename Scalar>
RowStats<Scalar> row_stats(const Matrix<Scalar>& x) {
  RowStats<Scalar> s;
  const auto C = x.rows();
  s.mean.resize(C);
  s.stddev.resize(C);
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index c = 0; c < C; ++c) {
    const double m = x.row(c).template cast<double>().mean();
    const double v = (x.row(c).template cast<double>().array() - m).square().sum() / n;
    s.mean[c] = static_cast<Scalar>(m);
    s.stddev[c] = static_cast<Scalar>(std::sqrt(v));
  }
  return s;
}

// Per-row z-score under the supplied stats. A zero (or negative) stddev is
// replaced by epsilon, which maps constant rows to all zeros.
template <typename Scalar>
Matrix<Scalar> zscore_normalize(const Matrix<Scalar>& x, const RowStats<Scalar>& stats,
                                double eps = 1e-8) {
  require(stats.mean.size() == x.rows() && stats.stddev.size() == x.rows(), errc::shape_mismatch,
          "zscore_normalize: stats size does not match row count");
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    const double sd = static_cast<double>(stats.stddev[c]);
    const double denom = sd > 0.0 ? sd : eps;
    out.row(c) = ((x.row(c).template cast<double>().array() - static_cast<double>(stats.mean[c])) / denom)
                     .template cast<Scalar>();
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> zscore_normalize(const Matrix<Scalar>& x, double eps = 1e-8) {
  return zscore_normalize(x, row_stats(x), eps);
}

inline Eigen::Index trim_sample_count(double trim_seconds, double rate_hz) {
  return static_cast<Eigen::Index>(std::llround(trim_seconds * rate_hz));
}

// Removes round(trim_seconds * rate_hz) samples from each end; rate is
// unchanged. Errors: TooShort when nothing would remain.
inline ScoreSequence trim_edges(const ScoreSequence& s, double trim_seconds) {
  const Eigen::Index k = trim_sample_count(trim_seconds, s.rate_hz);
  require(k >= 0, errc::invalid_config, "trim_edges: negative trim");
  require(s.size() > 2 * k, errc::too_short,
          "trim_edges: length " + std::to_string(s.size()) + " cannot lose 2*" + std::to_string(k));
  ScoreSequence out;
  out.rate_hz = s.rate_hz;
  out.values = s.values.segment(k, s.size() - 2 * k);
  return out;
}

}  // namespace shine
