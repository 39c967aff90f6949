#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace histaug {

struct DataConfig {
  std::string root;  // dataset directory holding manifest.csv
  std::string profile = "toy";
  double train_ratio = 0.7;
  double val_ratio = 0.1;
  double test_ratio = 0.2;
  double fraction = 1.0;  // stratified subsample of the train split
  bool resplit = true;    // reassign splits by patient instead of trusting the manifest
};

struct GanConfig {
  int stage_count = 3;
  int noise_dim = 128;
  int batch_size = 64;
  int epochs = 1000;
  int warmup_epochs = 100;  // checkpoints are kept only after this epoch
  std::int64_t max_steps = 0;  // 0 = unlimited
  double learning_rate = 2e-4;
  double gp_weight = 50.0;
  double beta1 = 0.0;
  double beta2 = 0.9;
  int critic_iters = 1;
  int gen_width = 32;
  int disc_width = 32;
  int fid_samples = 2048;
};

struct SelectionConfig {
  double ratio = 0.5;
  int mc_runs = 5;
  double ema_alpha = 0.5;
  int pool_multiplier = 4;
  bool centroid_dropout = true;
};

struct ClassifierConfig {
  int epochs = 30;
  double learning_rate = 1e-3;
  int runs = 5;
  int batch_size = 32;
  std::vector<int> blocks{3, 4, 6, 3};
  int width = 64;
  double dropout = 0.5;
  double jitter = 0.1;  // traditional augmentation amplitude
};

struct HarnessConfig {
  std::vector<std::string> regimes{"baseline", "traditional", "gan_aug", "selective"};
  std::vector<int> sweep_pools{2, 4, 6, 8};
  std::vector<double> sweep_ratios{0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  double tsne_perplexity = 30.0;
  int tsne_iterations = 1000;
  int tsne_max_points = 1000;
  int attention_maps = 4;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  GanConfig gan;
  SelectionConfig selection;
  ClassifierConfig classifier;
  HarnessConfig harness;

  /// Throws ValidationError when any documented range is violated.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Reads a JSON config file; missing keys keep their defaults.
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& config, const std::filesystem::path& path);

/// Applies a dotted override such as "gan.epochs=20" to a JSON config tree.
/// The value is parsed as JSON when possible and as a string otherwise.
void apply_override(nlohmann::json& tree, const std::string& assignment);

/// Stable hex fingerprint of a JSON subtree (key order is canonical in nlohmann::json).
std::string config_fingerprint(const nlohmann::json& subtree);

}  // namespace histaug
