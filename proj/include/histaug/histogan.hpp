#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "histaug/config.hpp"
#include "histaug/datasets.hpp"
#include "histaug/layers.hpp"

namespace histaug {

/// Shape parameters that fully determine generator and discriminator layouts.
struct GanArchitecture {
  int stage_count = 2;
  int class_count = 2;
  int noise_dim = 128;
  int image_height = 32;  // final stage
  int image_width = 32;
  int gen_width = 32;
  int disc_width = 32;

  static GanArchitecture from(const DatasetProfile& profile, const GanConfig& gan);
  nlohmann::json to_json() const;
  static GanArchitecture from_json(const nlohmann::json& j);
  bool operator==(const GanArchitecture&) const = default;
};

/// (height, width) of every stage, coarse to fine; each stage doubles the previous one.
/// Throws ValidationError unless the first stage divides into 4 upsampling blocks.
std::vector<std::pair<int, int>> stage_resolutions(int height, int width, int stages);

/// One image per stage, values in [-1,1], plus the stage-I attention map [B, N, N].
struct ImagePyramid {
  std::vector<torch::Tensor> images;
  torch::Tensor attention;
  int attention_height = 0;
  int attention_width = 0;
};

class UpBlockImpl : public torch::nn::Module {
 public:
  UpBlockImpl(int in, int out, int classes);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& labels);

  torch::nn::Conv2d conv{nullptr};
  ConditionalBatchNorm2d norm{nullptr};
};
TORCH_MODULE(UpBlock);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int channels, int classes);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& labels);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  ConditionalBatchNorm2d norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(ResBlock);

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const GanArchitecture& arch);

  /// z: [B, noise_dim]; labels: int64 [B].
  ImagePyramid forward(const torch::Tensor& z, const torch::Tensor& labels);

  GanArchitecture arch;
  std::vector<std::pair<int, int>> resolutions;
  torch::nn::ConvTranspose2d label_embed{nullptr};
  torch::nn::ConvTranspose2d input{nullptr};
  ConditionalBatchNorm2d input_norm{nullptr};
  torch::nn::ModuleList stage1_blocks;
  SelfAttention attention{nullptr};
  torch::nn::ModuleList refiners;  // one ModuleList of blocks per later stage
  torch::nn::ModuleList heads;     // conv3x3 -> tanh image head per stage
};
TORCH_MODULE(Generator);

class StageDiscriminatorImpl : public torch::nn::Module {
 public:
  StageDiscriminatorImpl(const GanArchitecture& arch, int stage);

  /// image: [B, 3, H, W] at this stage's resolution. Returns unbounded scores [B].
  torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& labels);

  int height, width;
  torch::nn::ModuleList downs;
  torch::nn::ModuleList down_norms;
  SelfAttention attention{nullptr};
  SNConv2d head_conv{nullptr};
  torch::nn::BatchNorm2d head_norm{nullptr};
  MinibatchDiscrimination minibatch{nullptr};
  SNLinear output{nullptr};
  torch::nn::Embedding projection{nullptr};  // class embedding dotted with the pooled features
};
TORCH_MODULE(StageDiscriminator);

class DiscriminatorSetImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorSetImpl(const GanArchitecture& arch);

  /// Throws ValidationError when the stage index or image resolution is wrong.
  torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& labels, int stage);
  StageDiscriminator stage(int s);
  int stage_count() const { return static_cast<int>(stages->size()); }
  /// Every spectrally normalized layer, for inspection.
  std::vector<std::shared_ptr<torch::nn::Module>> spectral_layers();

  torch::nn::ModuleList stages;
};
TORCH_MODULE(DiscriminatorSet);

/// Real images [B,3,H,W] in [-1,1] -> per-stage copies, area-averaged to each stage size.
std::vector<torch::Tensor> real_pyramid(const torch::Tensor& images, int stages);

// ---------------------------------------------------------------------------
// Training and checkpoints
// ---------------------------------------------------------------------------

struct GanCheckpoint {
  int epoch = 0;
  int stage_count = 0;
  int class_count = 0;
  std::string fingerprint;
  std::filesystem::path path;
};

struct EpochLoss {
  int epoch = 0;
  double critic_loss = 0.0;
  double gen_loss = 0.0;
};

struct GanRun {
  GanArchitecture arch;
  std::vector<GanCheckpoint> checkpoints;
  std::vector<EpochLoss> losses;
  std::int64_t steps = 0;
  std::vector<std::string> warnings;
};

/// Epochs after which a checkpoint is written: warmup+1 .. epochs.
std::vector<int> checkpoint_epochs(int epochs, int warmup);

/// `gan_epoch_0101` style file name.
std::string checkpoint_name(int epoch);

/// GAN-relevant config fingerprint, stored in every checkpoint.
std::string gan_fingerprint(const GanArchitecture& arch, const GanConfig& gan);

struct LoadedGan {
  GanArchitecture arch;
  Generator generator{nullptr};
  DiscriminatorSet discriminators{nullptr};
  int epoch = 0;
  std::string fingerprint;
};

void save_checkpoint(const std::filesystem::path& path, int epoch, const GanArchitecture& arch,
                     const std::string& fingerprint, Generator& generator,
                     DiscriminatorSet& discriminators);
LoadedGan load_checkpoint(const std::filesystem::path& path);

/// Loss curve index `gan_index.csv` (epoch,critic_loss,gen_loss).
void write_gan_index(const std::filesystem::path& dir, const std::vector<EpochLoss>& losses);
std::vector<EpochLoss> read_gan_index(const std::filesystem::path& dir);
/// Checkpoints present in dir, ordered by epoch.
std::vector<GanCheckpoint> list_checkpoints(const std::filesystem::path& dir);

/// Alternating critic / generator updates with the gradient-penalty critic objective on every
/// stage. Writes checkpoints and gan_index.csv into out_dir.
GanRun train_gan(const PatchDataset& dataset, const ExperimentConfig& config,
                 const std::filesystem::path& out_dir,
                 const std::function<void(const EpochLoss&)>& on_epoch = {});

/// Generator output at the final stage mapped to [0,1]. Runs in eval mode without gradients.
torch::Tensor generate_images(Generator& generator, const torch::Tensor& z,
                              const torch::Tensor& labels);

/// Standard-normal noise drawn from a dedicated seeded stream.
torch::Tensor seeded_noise(std::uint64_t seed, int noise_dim);

}  // namespace histaug
