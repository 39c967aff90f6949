#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "histaug/config.hpp"
#include "histaug/datasets.hpp"
#include "histaug/extractor.hpp"
#include "histaug/histogan.hpp"

namespace histaug {

struct CandidateSample {
  std::int64_t id = 0;
  int assigned_label = 0;
  std::uint64_t seed = 0;  // generation seed of the latent vector
  torch::Tensor image;     // float [3,H,W] in [0,1]
  double entropy = std::numeric_limits<double>::quiet_NaN();
  double distance = std::numeric_limits<double>::quiet_NaN();
  bool passed_entropy = false;
  bool passed_distance = false;
};

struct ClassSelectionSummary {
  int label = 0;
  std::string name;
  std::int64_t real_count = 0;
  std::int64_t quota = 0;
  std::int64_t pool_size = 0;
  std::int64_t entropy_kept = 0;
  std::int64_t selected = 0;
  double entropy_median = std::numeric_limits<double>::quiet_NaN();
  double distance_median = std::numeric_limits<double>::quiet_NaN();
};

struct SelectionReport {
  std::string checkpoint;
  std::uint64_t seed = 0;
  double ratio = 0.0;
  int pool_multiplier = 0;
  int mc_runs = 0;
  std::vector<ClassSelectionSummary> classes;
  std::vector<std::int64_t> pool_ids;          // X0
  std::vector<std::int64_t> intermediate_ids;  // X1
  std::vector<std::int64_t> selected_ids;      // X
  std::vector<std::string> warnings;
  bool failed = false;
  std::string failure;

  nlohmann::json to_json() const;
  /// Canonical text form; identical inputs give identical bytes.
  std::string serialize() const;
};

/// round_half_up(r * N_i) per class. A warning is appended for each class whose quota is 0.
std::vector<std::int64_t> class_quotas(std::span<const std::int64_t> class_sizes, double ratio,
                                       std::vector<std::string>* warnings = nullptr);

/// multiplier * quota_i per class.
std::vector<std::int64_t> pool_sizes(std::span<const std::int64_t> quotas, int multiplier);

/// Generates pool_sizes[i] candidates conditioned on class i. Candidate ids run 0.. in class
/// order; candidate j draws its latent vector from mix_seed(seed, j).
std::vector<CandidateSample> generate_pool(LoadedGan& gan, const DatasetProfile& profile,
                                           std::span<const std::int64_t> pool_sizes,
                                           std::uint64_t seed);

/// Fills entropy and distance for every candidate from K MC-dropout passes. The dropout masks of
/// candidate j come from mix_seed(seed, id_j).
void score_candidates(std::vector<CandidateSample>& pool, ResidualClassifier& extractor,
                      std::span<const ClassCentroid> centroids, int runs, std::uint64_t seed,
                      int chunk = 32);

/// Per class, keeps the floor(n/2) lowest-entropy candidates (ties by ascending id).
/// Every label in required_classes must have at least one candidate.
std::vector<CandidateSample> entropy_filter(const std::vector<CandidateSample>& pool,
                                            std::span<const int> required_classes = {});

/// Per class, keeps the floor(n/2) candidates nearest to their class centroid (ties by id).
std::vector<CandidateSample> distance_filter(const std::vector<CandidateSample>& survivors,
                                             std::span<const ClassCentroid> centroids);

double median(std::vector<double> values);

struct SelectionOutcome {
  std::vector<CandidateSample> pool;          // X0, flags filled in
  std::vector<CandidateSample> intermediate;  // X1
  std::vector<CandidateSample> selected;      // X
  SelectionReport report;
};

/// Runs both filters over an already scored pool and fills the report. `base` supplies the
/// run metadata (checkpoint, seed, ratio, ...) and any warnings gathered upstream.
SelectionOutcome apply_filters(std::vector<CandidateSample> pool,
                               std::span<const ClassCentroid> centroids,
                               const DatasetProfile& profile,
                               std::span<const std::int64_t> class_sizes, SelectionReport base);

/// selection.csv: id,class,entropy,distance,passed_entropy,passed_distance
void write_selection_csv(const std::vector<CandidateSample>& pool, const DatasetProfile& profile,
                         const std::filesystem::path& path);
/// One PNG per selected candidate under dir/<class>/.
void write_selected_images(const std::vector<CandidateSample>& selected,
                           const DatasetProfile& profile, const std::filesystem::path& dir);
/// features.csv: id,label,entropy,distance,K
void write_feature_export(const std::vector<CandidateSample>& pool, int runs,
                          const std::filesystem::path& path);
void write_report(const SelectionReport& report, const std::filesystem::path& path);

/// Generated images with their labels, as read back from a selected/ directory.
struct SyntheticSet {
  torch::Tensor images;  // [n,3,H,W] in [0,1]
  torch::Tensor labels;  // int64 [n]
  std::size_t size() const { return images.defined() ? static_cast<std::size_t>(images.size(0)) : 0; }
};
SyntheticSet to_synthetic(const std::vector<CandidateSample>& samples, int height, int width);
SyntheticSet read_selected_images(const std::filesystem::path& dir, const DatasetProfile& profile);

/// Seeds of the candidate latents and of the MC-dropout masks used by run_selection.
std::uint64_t selection_pool_seed(const ExperimentConfig& config);
std::uint64_t selection_score_seed(const ExperimentConfig& config);

/// Full selection for one checkpoint: pool -> scoring -> entropy half -> distance half.
/// Writes selection_report.json, selection.csv and selected/<class>/ into out_dir. If any stage
/// throws, the report is still written with `failed` set, and the error is rethrown.
SelectionOutcome run_selection(const GanCheckpoint& checkpoint, const PatchDataset& dataset,
                               ResidualClassifier& extractor,
                               std::span<const ClassCentroid> centroids,
                               const ExperimentConfig& config, const std::filesystem::path& out_dir);

/// Class centroids over the train split of a dataset.
std::vector<ClassCentroid> train_centroids(ResidualClassifier& extractor, const PatchDataset& dataset,
                                           const ExperimentConfig& config);

/// Ablation helper: from a fixed intermediate set X1, take the round_half_up(r * N_i) nearest
/// candidates per class. A class is feasible when its quota is at most floor(|X1_i| / 2).
struct RatioSelection {
  double ratio = 0.0;
  bool feasible = true;
  std::vector<std::int64_t> quotas;
  std::vector<CandidateSample> selected;
};
RatioSelection select_for_ratio(const std::vector<CandidateSample>& intermediate,
                                std::span<const std::int64_t> class_sizes, double ratio);

}  // namespace histaug
