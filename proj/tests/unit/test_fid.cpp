#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "histaug/errors.hpp"
#include "histaug/fid.hpp"
#include "histaug/model_select.hpp"
#include "test_util.hpp"

using namespace histaug;

namespace {

MomentSummary gaussian(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
  MomentSummary m;
  m.mean = std::move(mean);
  m.covariance = std::move(cov);
  m.sample_count = 100;
  return m;
}

MomentSummary random_psd(int f, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd a(f, f + 2);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) a(i, j) = n(rng);
  Eigen::VectorXd mu(f);
  for (int i = 0; i < f; ++i) mu(i) = n(rng) * 2;
  return gaussian(mu, a * a.transpose() / a.cols());
}

// reference recurrence, written out independently of ema_smooth
std::vector<double> recurrence(const std::vector<double>& d, double alpha) {
  std::vector<double> out(d.size());
  for (std::size_t t = 0; t < d.size(); ++t) out[t] = t == 0 ? d[0] : alpha * out[t - 1] + (1 - alpha) * d[t];
  return out;
}

}  // namespace

TEST(Moments, TwoPointExample) {
  Eigen::MatrixXd f(2, 2);
  f << 0, 0, 2, 2;
  const auto m = summarize_moments(f);
  EXPECT_TRUE(m.mean.isApprox(Eigen::Vector2d(1, 1)));
  Eigen::Matrix2d expected;
  expected << 2, 2, 2, 2;
  EXPECT_TRUE(m.covariance.isApprox(expected));
  EXPECT_EQ(m.sample_count, 2);
}

TEST(Moments, IdenticalRowsHaveZeroCovariance) {
  Eigen::MatrixXd f = Eigen::RowVector3d(1.5, -2, 4).replicate(7, 1);
  const auto m = summarize_moments(f);
  EXPECT_EQ(m.covariance.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Moments, SingleRowIsRejected) {
  EXPECT_THROW(summarize_moments(Eigen::MatrixXd::Ones(1, 3)), ValidationError);
}

TEST(Moments, CovarianceIsSymmetric) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  Eigen::MatrixXd f(50, 6);
  for (int i = 0; i < f.rows(); ++i)
    for (int j = 0; j < f.cols(); ++j) f(i, j) = n(rng);
  const auto m = summarize_moments(f);
  EXPECT_LE((m.covariance - m.covariance.transpose()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Fid, Examples) {
  const auto a = gaussian(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Zero(1, 1));
  const auto b = gaussian(Eigen::VectorXd::Constant(1, 3.0), Eigen::MatrixXd::Zero(1, 1));
  EXPECT_NEAR(compute_fid(a, b), 9.0, 1e-12);
  const auto r = gaussian(Eigen::Vector2d(0, 0), Eigen::Matrix2d::Identity());
  const auto g = gaussian(Eigen::Vector2d(1, 1), 4 * Eigen::Matrix2d::Identity());
  EXPECT_NEAR(compute_fid(r, g), 4.0, 1e-10);
  EXPECT_LE(compute_fid(r, r), 1e-8);
}

TEST(Fid, DimensionMismatchIsRejected) {
  const auto a = gaussian(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  const auto b = gaussian(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3));
  EXPECT_THROW(compute_fid(a, b), ValidationError);
}

TEST(Fid, DiagonalClosedForm) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    const int f = 1 + trial % 8;
    Eigen::VectorXd mr(f), mf(f), sr(f), sf(f);
    double expected = 0.0;
    for (int i = 0; i < f; ++i) {
      mr(i) = n(rng);
      mf(i) = n(rng);
      sr(i) = u(rng);
      sf(i) = u(rng);
      expected += std::pow(mr(i) - mf(i), 2) + std::pow(std::sqrt(sr(i)) - std::sqrt(sf(i)), 2);
    }
    const auto a = gaussian(mr, sr.asDiagonal()), b = gaussian(mf, sf.asDiagonal());
    EXPECT_NEAR(compute_fid(a, b), expected, 1e-6);
  }
}

TEST(Fid, SymmetricNonNegativeAndZeroOnIdentity) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const int f = 1 + trial % 8;
    const auto a = random_psd(f, rng), b = random_psd(f, rng);
    const double ab = compute_fid(a, b), ba = compute_fid(b, a);
    EXPECT_NEAR(ab, ba, 1e-8);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(compute_fid(a, a), 1e-8);
  }
}

TEST(Fid, RankDeficientCovariances) {
  // one sample direction only; the square root must not go complex
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(3, 3);
  c(0, 0) = 1.0;
  const auto a = gaussian(Eigen::VectorXd::Zero(3), c);
  const auto b = gaussian(Eigen::VectorXd::Zero(3), 4 * c);
  EXPECT_NEAR(compute_fid(a, b), 1.0, 1e-8);
}

TEST(PsdSqrt, SquaresBack) {
  std::mt19937_64 rng(13);
  const auto m = random_psd(5, rng).covariance;
  const auto s = psd_sqrt(m);
  EXPECT_LE((s * s - m).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Ema, Examples) {
  const std::vector<double> a{10, 20};
  EXPECT_EQ(ema_smooth(a, 0.5), (std::vector<double>{10, 15}));
  const std::vector<double> b{3, 7, 5};
  EXPECT_EQ(ema_smooth(b, 1.0), (std::vector<double>{3, 3, 3}));
  const std::vector<double> c{4, -1, 9, 2.5};
  EXPECT_EQ(ema_smooth(c, 0.0), c);
  EXPECT_THROW(ema_smooth(std::vector<double>{}, 0.5), ValidationError);
  EXPECT_THROW(ema_smooth(a, 1.5), ValidationError);
  EXPECT_THROW(ema_smooth(a, -0.1), ValidationError);
}

TEST(Ema, MatchesRecurrenceExactly) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0.0, 300.0);
  for (double alpha : {0.0, 0.25, 0.5, 1.0}) {
    for (int trial = 0; trial < 25; ++trial) {
      std::vector<double> d(1 + trial * 7);
      for (auto& v : d) v = u(rng);
      const auto got = ema_smooth(d, alpha);
      const auto want = recurrence(d, alpha);
      for (std::size_t t = 0; t < d.size(); ++t) EXPECT_NEAR(got[t], want[t], 1e-12);
    }
  }
}

TEST(Ema, BoundedByInputAndConstantIsFixedPoint) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(-50.0, 50.0), a(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> d(20);
    for (auto& v : d) v = u(rng);
    const double alpha = a(rng);
    const auto lo = *std::min_element(d.begin(), d.end()), hi = *std::max_element(d.begin(), d.end());
    for (double s : ema_smooth(d, alpha)) {
      EXPECT_GE(s, lo);
      EXPECT_LE(s, hi);
    }
    const std::vector<double> constant(13, d[0]);
    EXPECT_EQ(ema_smooth(constant, alpha), constant);
  }
}

TEST(Argmin, EarliestOnTiesAndSkipsNaN) {
  const double nan = std::nan("");
  EXPECT_EQ(argmin_earliest(std::vector<double>{3, 1, 2, 1}), 1u);
  EXPECT_EQ(argmin_earliest(std::vector<double>{nan, 5, 4, nan}), 2u);
  EXPECT_THROW(argmin_earliest(std::vector<double>{nan, nan}), NumericalError);
}

TEST(FidSeriesSelection, MonotoneAndConstantSeries) {
  const std::vector<int> epochs{100, 200, 300, 400, 500};
  for (double alpha : {0.0, 0.3, 0.5, 0.9}) {
    EXPECT_EQ(make_fid_series(epochs, {50, 40, 30, 20, 10}, alpha).best_epoch(), 500);
    EXPECT_EQ(make_fid_series(epochs, {7, 7, 7, 7, 7}, alpha).best_epoch(), 100);
  }
}

TEST(FidSeriesSelection, OutlierDipIsSmoothedAway) {
  // slowly decreasing trend with a one-off dip at t = 5
  std::vector<int> epochs;
  std::vector<double> raw;
  for (int t = 1; t <= 12; ++t) {
    epochs.push_back(t);
    raw.push_back(t == 5 ? 40.0 : 100.0 - 4.0 * t);
  }
  const auto s = make_fid_series(epochs, raw, 0.5);
  EXPECT_EQ(argmin_earliest(raw), 4u);  // the raw minimum is the dip
  EXPECT_LT(s.smoothed.back(), s.smoothed[4]);
  EXPECT_NE(s.best_epoch(), 5);
  EXPECT_EQ(s.best_epoch(), 12);
}

TEST(FidSeriesSelection, AppendingNonMinimalDuplicateKeepsChoice) {
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> u(10.0, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> epochs;
    std::vector<double> raw;
    for (int t = 0; t < 10; ++t) {
      epochs.push_back(100 * (t + 1));
      raw.push_back(u(rng));
    }
    const auto before = make_fid_series(epochs, raw, 0.5);
    const double floor = before.smoothed[before.best_index()];
    // duplicate of an existing score that is not below the smoothed minimum
    std::vector<std::size_t> candidates;
    for (std::size_t t = 0; t < raw.size(); ++t)
      if (t != argmin_earliest(raw) && raw[t] >= floor) candidates.push_back(t);
    if (candidates.empty()) continue;
    auto raw2 = raw;
    auto epochs2 = epochs;
    raw2.push_back(raw[candidates[trial % candidates.size()]]);
    epochs2.push_back(1100);
    EXPECT_EQ(make_fid_series(epochs2, raw2, 0.5).best_epoch(), before.best_epoch());
  }
}

TEST(FidSeriesSelection, CsvRoundTrip) {
  histaug::testing::TempDir dir("fid");
  const auto s = make_fid_series({10, 20, 30}, {5.5, 3.25, 4.125}, 0.5);
  write_fid_series(s, dir / "fid_series.csv");
  std::ifstream in(dir / "fid_series.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,raw_fid,smoothed_fid");
  const auto r = read_fid_series(dir / "fid_series.csv", 0.5);
  EXPECT_EQ(r.epochs, s.epochs);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(r.raw[i], s.raw[i], 1e-12);
    EXPECT_NEAR(r.smoothed[i], s.smoothed[i], 1e-12);
  }
  EXPECT_EQ(r.best_epoch(), 30);  // smoothed 5.5, 4.375, 4.25
}

TEST(FidSampleSize, CappedAtTotal) {
  const std::vector<std::int64_t> sizes{100, 300};
  EXPECT_EQ(fid_sample_size(sizes, 2048), 400);
  EXPECT_EQ(fid_sample_size(sizes, 256), 256);
}
