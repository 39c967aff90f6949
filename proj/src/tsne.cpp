#include "histaug/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "histaug/errors.hpp"

namespace histaug {

namespace {

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd norms = x.rowwise().squaredNorm();
  Eigen::MatrixXd d = (-2.0 * x * x.transpose()).colwise() + norms;
  d.rowwise() += norms.transpose();
  return d.cwiseMax(0.0);
}

Eigen::MatrixXd student_q(const Eigen::MatrixXd& y, Eigen::MatrixXd& num) {
  num = (1.0 + squared_distances(y).array()).inverse().matrix();
  num.diagonal().setZero();
  return num / std::max(num.sum(), 1e-300);
}

}  // namespace

Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& points, double perplexity) {
  const auto n = points.rows();
  if (n < 2) throw ValidationError("t-SNE needs at least two points");
  const double target = std::log(std::min(perplexity, static_cast<double>(n - 1)));
  const auto d = squared_distances(points);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    Eigen::VectorXd row(n);
    for (int step = 0; step < 200; ++step) {
      double min_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j != i) min_d = std::min(min_d, d(i, j));
      }
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        row(j) = j == i ? 0.0 : std::exp(-beta * (d(i, j) - min_d));
        sum += row(j);
        weighted += row(j) * (d(i, j) - min_d);
      }
      const double h = std::log(sum) + beta * weighted / sum;  // entropy in nats
      row /= sum;
      if (std::abs(h - target) < 1e-7) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    p.row(i) = row.transpose();
  }
  Eigen::MatrixXd joint = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  return joint.cwiseMax(1e-12);
}

double tsne_kl(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y) {
  Eigen::MatrixXd num;
  const auto Q = student_q(Y, num);
  double kl = 0.0;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      if (i != j) kl += P(i, j) * std::log(P(i, j) / std::max(Q(i, j), 1e-12));
    }
  }
  return kl;
}

Eigen::MatrixXd tsne(const Eigen::MatrixXd& points, const TsneOptions& options) {
  const auto n = points.rows();
  Eigen::MatrixXd P = tsne_affinities(points, options.perplexity);
  P.diagonal().setZero();

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1e-4);
  Eigen::MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i, 0) = normal(rng);
    y(i, 1) = normal(rng);
  }
  Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(n, 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(n, 2);
  Eigen::MatrixXd num;

  for (int it = 0; it < options.iterations; ++it) {
    const double exaggeration = it < options.exaggeration_iterations ? options.early_exaggeration : 1.0;
    const double momentum = it < options.exaggeration_iterations ? 0.5 : 0.8;
    const auto Q = student_q(y, num);
    // dC/dy_i = 4 sum_j (p_ij - q_ij) num_ij (y_i - y_j)
    const Eigen::MatrixXd w = ((exaggeration * P - Q).array() * num.array()).matrix();
    const Eigen::VectorXd row_sums = w.rowwise().sum();
    const Eigen::MatrixXd grad = 4.0 * (row_sums.asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int k = 0; k < 2; ++k) {
        const bool same_sign = (grad(i, k) > 0) == (velocity(i, k) > 0);
        gains(i, k) = same_sign ? std::max(gains(i, k) * 0.8, 0.01) : gains(i, k) + 0.2;
      }
    }
    velocity = momentum * velocity - options.learning_rate * gains.cwiseProduct(grad);
    y += velocity;
    y.rowwise() -= y.colwise().mean();
  }
  return y;
}

}  // namespace histaug
