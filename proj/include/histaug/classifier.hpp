#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "histaug/config.hpp"
#include "histaug/datasets.hpp"
#include "histaug/extractor.hpp"
#include "histaug/metrics.hpp"
#include "histaug/selector.hpp"

namespace histaug {

enum class Regime { baseline, traditional, gan_aug, selective };
std::string_view to_string(Regime regime);
Regime parse_regime(std::string_view text);
bool uses_synthetic(Regime regime);

struct JitterParams {
  bool flip = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

/// Factors drawn uniformly from [1-a, 1+a]; flip with probability 1/2.
JitterParams sample_jitter(double amplitude, std::mt19937_64& rng);

/// Horizontal flip, then brightness, contrast and saturation, clamped to [0,1].
/// Works on [3,H,W] or [B,3,H,W].
torch::Tensor apply_jitter(const torch::Tensor& image, const JitterParams& params);

/// Random flip plus colour jitter of the given amplitude.
torch::Tensor traditional_augment(const torch::Tensor& image, double amplitude, std::mt19937_64& rng);

struct TrainingSet {
  torch::Tensor images;  // [n,3,H,W] in [0,1]
  torch::Tensor labels;  // int64 [n]
  std::int64_t real_count = 0;
  std::int64_t synthetic_count = 0;
};

/// Train split plus the synthetic images when the regime uses them. Throws ValidationError
/// when extra images are given to a regime without synthetic data, or missing for one with it.
TrainingSet build_training_set(const PatchDataset& dataset, const SyntheticSet& extra, Regime regime);

/// Fingerprint of everything that defines classifier training; equal across regimes.
std::string classifier_fingerprint(const ExperimentConfig& config);

/// Seed of evaluation round k; shared by every regime.
std::uint64_t round_seed(std::uint64_t seed, int round);

TrainedClassifier train_classifier(const PatchDataset& dataset, const SyntheticSet& extra,
                                   Regime regime, const ExperimentConfig& config, std::uint64_t seed);

struct RunMetrics {
  int round = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double auc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

struct MetricsReport {
  Regime regime = Regime::baseline;
  std::vector<RunMetrics> runs;
  MeanStd accuracy, auc, sensitivity, specificity;
  std::vector<std::string> warnings;
};

/// Single run on the test split.
ClassificationMetrics evaluate(ResidualClassifier& model, const PatchDataset& dataset);

MetricsReport aggregate(Regime regime, std::vector<RunMetrics> runs);

/// results.csv: regime,round,seed,accuracy,auc,sensitivity,specificity (one row per run)
void write_results(const std::vector<MetricsReport>& reports, const std::filesystem::path& path);
std::vector<MetricsReport> read_results(const std::filesystem::path& path);
/// summary.csv: regime,runs,<metric>_mean,<metric>_std for the four metrics
void write_summary(const std::vector<MetricsReport>& reports, const std::filesystem::path& path);

}  // namespace histaug
