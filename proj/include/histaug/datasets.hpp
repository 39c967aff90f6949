#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace histaug {

enum class Split { train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

/// Fixed geometry and label set shared by every patch of a dataset.
struct DatasetProfile {
  std::string name;
  int height = 0;
  int width = 0;
  int stage_count = 1;
  std::vector<std::string> class_names;

  int class_count() const { return static_cast<int>(class_names.size()); }
  int class_index(std::string_view name) const;  // -1 when unknown
};

/// cervical (256x128, 4 classes, 3 stages), pcam (96x96, 2 classes, 2 stages),
/// toy (32x32, 2 classes, 2 stages).
DatasetProfile builtin_profile(std::string_view name);
std::vector<std::string> builtin_profile_names();

struct LabeledPatch {
  std::string filename;  // as written in the manifest
  std::filesystem::path source;  // absolute location, empty for in-memory patches
  torch::Tensor pixels;  // uint8 [3, H, W]
  int label = 0;
  std::string patient_id;
  Split split = Split::train;

  /// Float view in [0,1].
  torch::Tensor image() const;
};

class PatchDataset {
 public:
  PatchDataset() = default;
  /// Validates dimensions, labels, patient ids and patient/split disjointness.
  PatchDataset(DatasetProfile profile, std::vector<LabeledPatch> patches);

  const DatasetProfile& profile() const { return profile_; }
  const std::vector<LabeledPatch>& patches() const { return patches_; }
  std::size_t size() const { return patches_.size(); }
  bool empty() const { return patches_.empty(); }
  int class_count() const { return profile_.class_count(); }

  /// N_i per class for one split.
  std::vector<std::int64_t> class_sizes(Split split = Split::train) const;
  std::size_t count(Split split) const;

  std::vector<const LabeledPatch*> select(Split split) const;
  /// Stacked float images [n, 3, H, W] in [0,1] and int64 labels for one split.
  torch::Tensor images(Split split) const;
  torch::Tensor labels(Split split) const;
  /// Images of one class within a split.
  torch::Tensor class_images(Split split, int label) const;

 private:
  DatasetProfile profile_;
  std::vector<LabeledPatch> patches_;
};

/// Reads `manifest.csv` (filename,label,patient_id,split) under root.
PatchDataset load_dataset(const std::filesystem::path& root, const DatasetProfile& profile);
PatchDataset load_dataset(const std::filesystem::path& root, std::string_view profile_name);
/// Manifest at an arbitrary path; relative filenames resolve against its directory.
PatchDataset load_manifest(const std::filesystem::path& manifest, const DatasetProfile& profile);

/// Writes images under root/<class>/ plus root/manifest.csv.
void save_dataset(const PatchDataset& dataset, const std::filesystem::path& root);
/// Writes a manifest pointing at each patch's absolute source file.
void write_manifest(const PatchDataset& dataset, const std::filesystem::path& manifest);

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

/// Reassigns every patch's split as a function of its patient id.
PatchDataset split_by_patient(const PatchDataset& dataset, SplitRatios ratios, std::uint64_t seed);

/// floor(x + 1/2), with a small slack so that 0.5 * 5 style products round up reliably.
std::int64_t round_half_up(double x);

/// Per-class counts round_half_up(fraction * N_i), corrected by largest remainder so the
/// total equals round_half_up(fraction * N).
std::vector<std::int64_t> stratified_quotas(std::span<const std::int64_t> class_sizes,
                                            double fraction);

/// Stratified subsample of the train split without replacement; val/test are kept.
PatchDataset subset_fraction(const PatchDataset& dataset, double fraction, std::uint64_t seed);

/// Two-class colored-texture patches: class 0 warm with horizontal stripes, class 1 cool with
/// vertical stripes. Every patient contributes to both classes.
PatchDataset make_toy_dataset(int per_class, int patients, std::uint64_t seed, int height = 32,
                              int width = 32);

/// Float [3,H,W] in [0,1] -> uint8 [3,H,W].
torch::Tensor to_pixels(const torch::Tensor& image);
/// PNG/PPM via OpenCV; returns uint8 [3,H,W] RGB.
torch::Tensor read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const torch::Tensor& pixels);

}  // namespace histaug
