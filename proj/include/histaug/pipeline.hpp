#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "histaug/classifier.hpp"
#include "histaug/config.hpp"
#include "histaug/datasets.hpp"
#include "histaug/histogan.hpp"
#include "histaug/model_select.hpp"
#include "histaug/selector.hpp"

namespace histaug {

/// Fixed layout of a run directory.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path index() const { return root / "run_index.json"; }
  std::filesystem::path manifest() const { return root / "data" / "manifest.csv"; }
  std::filesystem::path gan_dir() const { return root / "gan"; }
  std::filesystem::path extractor() const { return root / "extractor.pt"; }
  std::filesystem::path fid_series() const { return root / "fid_series.csv"; }
  std::filesystem::path best_checkpoint() const { return root / "best_checkpoint.json"; }
  std::filesystem::path generated() const { return root / "generated"; }
  std::filesystem::path selection() const { return root / "selection"; }
  std::filesystem::path classifiers() const { return root / "classifiers"; }
  std::filesystem::path results() const { return root / "results.csv"; }
  std::filesystem::path summary() const { return root / "summary.csv"; }
  std::filesystem::path ablation() const { return root / "ablation.csv"; }
  std::filesystem::path plots() const { return root / "plots"; }
  std::filesystem::path classifier(Regime regime, int round) const;
};

/// run_index.json: one entry per stage with status ok / failed / skipped, message and seconds.
/// Every update re-reads the file, so several handles on one run directory do not clobber each other.
class RunIndex {
 public:
  explicit RunIndex(std::filesystem::path path);
  void record(const std::string& stage, const std::string& status, const std::string& message,
              double seconds);
  const nlohmann::json& json() const { return tree_; }
  bool ok(const std::string& stage) const;
  /// Top-level record such as best_epoch.
  void set(const std::string& key, const nlohmann::json& value);

 private:
  void reload();
  void write() const;

  std::filesystem::path path_;
  nlohmann::json tree_;
};

/// Stage names in pipeline order.
const std::vector<std::string>& pipeline_stages();

/// Loads the dataset under config.data.root, re-splits by patient when configured, applies the
/// train fraction and writes the resulting manifest into the run directory.
PatchDataset prepare_data(const ExperimentConfig& config, const RunPaths& paths);
/// The manifest written by prepare_data.
PatchDataset load_prepared(const ExperimentConfig& config, const RunPaths& paths);

GanRun stage_train_gan(const ExperimentConfig& config, const RunPaths& paths);

/// Trains (or reloads) the extractor, scores every checkpoint and records the chosen one.
CheckpointSelection stage_select_model(const ExperimentConfig& config, const RunPaths& paths);
TrainedClassifier load_or_train_extractor(const PatchDataset& dataset, const ExperimentConfig& config,
                                          const RunPaths& paths);
GanCheckpoint read_best_checkpoint(const RunPaths& paths);

/// Unfiltered synthetic set for the gan_aug regime: round_half_up(r * N_i) images per class.
std::size_t stage_generate(const ExperimentConfig& config, const RunPaths& paths);

SelectionOutcome stage_select_images(const ExperimentConfig& config, const RunPaths& paths);

/// Trains config.classifier.runs classifiers per regime and saves them.
void stage_train_classifiers(const ExperimentConfig& config, const RunPaths& paths,
                             const std::vector<Regime>& regimes);
/// Evaluates the saved classifiers on the test split; writes results.csv and summary.csv.
std::vector<MetricsReport> stage_evaluate(const ExperimentConfig& config, const RunPaths& paths,
                                          const std::vector<Regime>& regimes);

/// FID curve, t-SNE scatter and attention overlays; a missing input skips that plot with a warning.
std::vector<std::filesystem::path> stage_plot(const ExperimentConfig& config, const RunPaths& paths);

struct AblationCell {
  int pool_multiplier = 0;
  double ratio = 0.0;
  bool feasible = false;
  std::int64_t selected = 0;
  std::vector<std::int64_t> selected_ids;
  MetricsReport metrics;
};

/// Pool of P * N_i candidates per class for every P; every ratio draws from the same scored
/// pool. Feasible cells train and evaluate `runs` classifiers. Writes ablation.csv.
std::vector<AblationCell> sweep_ablation(const ExperimentConfig& config, const RunPaths& paths,
                                         const std::vector<int>& pools,
                                         const std::vector<double>& ratios, bool train = true);

/// Every stage in order; a failed stage is recorded and the remaining ones are skipped.
/// Returns true when all stages succeeded.
bool run_all(const ExperimentConfig& config, const RunPaths& paths);

std::vector<Regime> parse_regimes(const std::vector<std::string>& names);

}  // namespace histaug
