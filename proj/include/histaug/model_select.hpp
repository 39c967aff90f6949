#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "histaug/config.hpp"
#include "histaug/datasets.hpp"
#include "histaug/extractor.hpp"
#include "histaug/fid.hpp"
#include "histaug/histogan.hpp"

namespace histaug {

struct CheckpointSelection {
  GanCheckpoint best;
  FidSeries series;
};

/// Row-per-sample Eigen copy of a [n, F] tensor.
Eigen::MatrixXd to_eigen(const torch::Tensor& features);

/// Moments of the extractor's penultimate features for images in [0,1].
MomentSummary feature_moments(ResidualClassifier& extractor, const torch::Tensor& images);

/// Size of the generated sample used to score a checkpoint: min(N, cap).
std::int64_t fid_sample_size(std::span<const std::int64_t> class_sizes, int cap);

/// FID of one checkpoint against precomputed real moments. Samples fid_sample_size images with
/// classes proportional to class_sizes; the noise is fixed by `seed` so every checkpoint sees the
/// same latent inputs.
double checkpoint_fid(const GanCheckpoint& checkpoint, const MomentSummary& real,
                      ResidualClassifier& extractor, std::span<const std::int64_t> class_sizes,
                      int cap, std::uint64_t seed);

/// Scores every checkpoint, smooths the series with config.selection.ema_alpha and returns the
/// arg-min of the smoothed series (earliest epoch on ties).
CheckpointSelection select_checkpoint(const std::vector<GanCheckpoint>& checkpoints,
                                      const PatchDataset& real, ResidualClassifier& extractor,
                                      const ExperimentConfig& config);

}  // namespace histaug
