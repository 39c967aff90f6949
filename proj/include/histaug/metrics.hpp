#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace histaug {

/// Rank-based (Mann-Whitney) AUC; tied scores share their average rank.
/// Throws ValidationError unless both positives and negatives are present.
double binary_auc(std::span<const double> scores, std::span<const int> positive);

struct ClassRates {
  int label = 0;
  bool present = false;  // at least one test sample of this class
  double sensitivity = 0.0;
  double specificity = 0.0;
  double auc = 0.0;
};

struct ClassificationMetrics {
  double accuracy = 0.0;
  double auc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  std::vector<ClassRates> per_class;                 // one-vs-rest rates
  std::vector<std::string> warnings;
};

/// probabilities: [N, C]; labels: int64 [N]. Predictions are the arg-max (lowest index on ties).
/// Two classes: class 1 is the positive class. More classes: one-vs-rest macro averages over the
/// classes present in `labels`; absent classes are skipped with a warning.
ClassificationMetrics classification_metrics(const torch::Tensor& probabilities,
                                             const torch::Tensor& labels);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};
MeanStd mean_std(std::span<const double> values);

}  // namespace histaug
