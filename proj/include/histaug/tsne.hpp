#pragma once

#include <cstdint>

#include <Eigen/Dense>

namespace histaug {

struct TsneOptions {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  std::uint64_t seed = 0;
};

/// Conditional affinities p_{j|i} with per-point bandwidths found by bisection so that each row
/// has the requested perplexity. Returns the symmetrised joint matrix (sums to 1).
Eigen::MatrixXd tsne_affinities(const Eigen::MatrixXd& points, double perplexity);

/// Exact (O(n^2) per step) t-SNE to two dimensions. points: one sample per row.
Eigen::MatrixXd tsne(const Eigen::MatrixXd& points, const TsneOptions& options);

/// Kullback-Leibler divergence between joint affinities P and the Student-t similarities of Y.
double tsne_kl(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y);

}  // namespace histaug
