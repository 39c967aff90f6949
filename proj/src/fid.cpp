#include "histaug/fid.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>

#include "histaug/errors.hpp"

namespace histaug {

MomentSummary summarize_moments(const Eigen::MatrixXd& features) {
  const auto n = features.rows();
  if (n < 2) throw ValidationError("moment summary needs at least 2 samples, got " + std::to_string(n));
  MomentSummary s;
  s.sample_count = n;
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.covariance = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.covariance = 0.5 * (s.covariance + s.covariance.transpose());
  return s;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalError("matrix square root did not converge");
  const Eigen::VectorXd roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

double compute_fid(const MomentSummary& real, const MomentSummary& fake) {
  if (real.mean.size() != fake.mean.size() || real.covariance.rows() != fake.covariance.rows()) {
    throw ValidationError("FID summaries have different feature dimensions");
  }
  const Eigen::MatrixXd root_real = psd_sqrt(real.covariance);
  const Eigen::MatrixXd inner = root_real * fake.covariance * root_real;
  const Eigen::MatrixXd sym = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericalError("matrix square root did not converge");
  const double trace_cross = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double mean_term = (real.mean - fake.mean).squaredNorm();
  const double fid =
      mean_term + real.covariance.trace() + fake.covariance.trace() - 2.0 * trace_cross;
  if (!std::isfinite(fid)) throw NumericalError("FID is not finite");
  return std::max(fid, 0.0);
}

std::vector<double> ema_smooth(std::span<const double> raw, double alpha) {
  if (raw.empty()) throw ValidationError("ema_smooth needs a non-empty series");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("ema alpha must lie in [0,1]");
  std::vector<double> out(raw.size());
  out[0] = raw[0];
  for (std::size_t t = 1; t < raw.size(); ++t) {
    // equal terms short-circuit so a constant series stays bit-exact
    out[t] = raw[t] == out[t - 1] ? raw[t] : alpha * out[t - 1] + (1.0 - alpha) * raw[t];
  }
  return out;
}

std::size_t argmin_earliest(std::span<const double> values) {
  std::size_t best = values.size();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) continue;
    if (best == values.size() || values[i] < values[best]) best = i;
  }
  if (best == values.size()) throw NumericalError("series has no finite value");
  return best;
}

FidSeries make_fid_series(std::vector<int> epochs, std::vector<double> raw, double alpha) {
  if (epochs.size() != raw.size()) throw ValidationError("FID series epochs/raw length mismatch");
  FidSeries series;
  series.smoothed = ema_smooth(raw, alpha);
  series.epochs = std::move(epochs);
  series.raw = std::move(raw);
  series.alpha = alpha;
  return series;
}

void write_fid_series(const FidSeries& series, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "epoch,raw_fid,smoothed_fid\n" << std::setprecision(17);
  for (std::size_t i = 0; i < series.raw.size(); ++i) {
    out << series.epochs[i] << ',' << series.raw[i] << ',' << series.smoothed[i] << '\n';
  }
}

FidSeries read_fid_series(const std::filesystem::path& path, double alpha) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<int> epochs;
  std::vector<double> raw;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    int epoch = 0;
    double r = 0.0, s = 0.0;
    char c1 = 0, c2 = 0;
    if (!(row >> epoch >> c1 >> r >> c2 >> s)) throw FormatError("malformed row in " + path.string());
    epochs.push_back(epoch);
    raw.push_back(r);
  }
  return make_fid_series(std::move(epochs), std::move(raw), alpha);
}

}  // namespace histaug
