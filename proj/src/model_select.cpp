#include "histaug/model_select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "histaug/errors.hpp"
#include "histaug/seed.hpp"

namespace histaug {

Eigen::MatrixXd to_eigen(const torch::Tensor& features) {
  const auto t = features.detach().to(torch::kFloat64).contiguous();
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMajor>(t.data_ptr<double>(), t.size(0), t.size(1));
}

MomentSummary feature_moments(ResidualClassifier& extractor, const torch::Tensor& images) {
  return summarize_moments(to_eigen(penultimate_features(extractor, images)));
}

std::int64_t fid_sample_size(std::span<const std::int64_t> class_sizes, int cap) {
  const auto n = std::accumulate(class_sizes.begin(), class_sizes.end(), std::int64_t{0});
  return std::min<std::int64_t>(n, cap);
}

double checkpoint_fid(const GanCheckpoint& checkpoint, const MomentSummary& real,
                      ResidualClassifier& extractor, std::span<const std::int64_t> class_sizes,
                      int cap, std::uint64_t seed) {
  auto gan = load_checkpoint(checkpoint.path);
  const auto total = fid_sample_size(class_sizes, cap);
  const auto n = std::accumulate(class_sizes.begin(), class_sizes.end(), std::int64_t{0});
  const auto per_class = stratified_quotas(class_sizes, static_cast<double>(total) / static_cast<double>(n));

  std::vector<std::int64_t> labels;
  for (std::size_t c = 0; c < per_class.size(); ++c) labels.insert(labels.end(), per_class[c], static_cast<std::int64_t>(c));
  std::vector<torch::Tensor> features;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < labels.size(); start += kChunk) {
    const auto stop = std::min(labels.size(), start + kChunk);
    std::vector<torch::Tensor> z;
    for (auto j = start; j < stop; ++j) z.push_back(seeded_noise(mix_seed(seed, j), gan.arch.noise_dim));
    const auto y = torch::tensor(std::vector<std::int64_t>(labels.begin() + start, labels.begin() + stop));
    const auto images = generate_images(gan.generator, torch::stack(z), y);
    features.push_back(penultimate_features(extractor, images));
  }
  const auto fake = summarize_moments(to_eigen(torch::cat(features)));
  return compute_fid(real, fake);
}

CheckpointSelection select_checkpoint(const std::vector<GanCheckpoint>& checkpoints,
                                      const PatchDataset& real, ResidualClassifier& extractor,
                                      const ExperimentConfig& config) {
  if (checkpoints.empty()) throw ValidationError("select_checkpoint needs at least one checkpoint");
  const auto sizes = real.class_sizes(Split::train);
  const auto real_moments = feature_moments(extractor, real.images(Split::train));
  const auto seed = mix_seed(config.seed, 0xf1d);

  std::vector<int> epochs;
  std::vector<double> raw;
  for (const auto& ckpt : checkpoints) {
    epochs.push_back(ckpt.epoch);
    double fid = std::numeric_limits<double>::quiet_NaN();
    try {
      fid = checkpoint_fid(ckpt, real_moments, extractor, sizes, config.gan.fid_samples, seed);
    } catch (const NumericalError&) {
      // scored as NaN; argmin skips it
    }
    raw.push_back(fid);
  }
  CheckpointSelection selection;
  selection.series = make_fid_series(std::move(epochs), std::move(raw), config.selection.ema_alpha);
  selection.best = checkpoints.at(selection.series.best_index());
  return selection;
}

}  // namespace histaug
