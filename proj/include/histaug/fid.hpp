#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace histaug {

/// Gaussian moment fit of a feature sample.
struct MomentSummary {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;  // unbiased, symmetric
  std::int64_t sample_count = 0;
};

/// features: one sample per row; needs at least two rows.
MomentSummary summarize_moments(const Eigen::MatrixXd& features);

/// Square root of a symmetric positive semi-definite matrix; negative eigenvalues are clamped to 0.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);

/// Frechet distance between two Gaussian fits:
///   ||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^{1/2}),
/// with Tr((S_r S_f)^{1/2}) evaluated as Tr((S_r^{1/2} S_f S_r^{1/2})^{1/2}). Clamped at 0.
double compute_fid(const MomentSummary& real, const MomentSummary& fake);

/// d_hat_1 = d_1; d_hat_t = alpha * d_hat_{t-1} + (1 - alpha) * d_t.
std::vector<double> ema_smooth(std::span<const double> raw, double alpha);

/// Index of the smallest finite value, earliest on ties. Throws NumericalError if none is finite.
std::size_t argmin_earliest(std::span<const double> values);

struct FidSeries {
  std::vector<int> epochs;
  std::vector<double> raw;
  std::vector<double> smoothed;
  double alpha = 0.5;

  std::size_t best_index() const { return argmin_earliest(smoothed); }
  int best_epoch() const { return epochs.at(best_index()); }
};

FidSeries make_fid_series(std::vector<int> epochs, std::vector<double> raw, double alpha);

/// `fid_series.csv` with header epoch,raw_fid,smoothed_fid.
void write_fid_series(const FidSeries& series, const std::filesystem::path& path);
FidSeries read_fid_series(const std::filesystem::path& path, double alpha);

}  // namespace histaug
