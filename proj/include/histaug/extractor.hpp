#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "histaug/config.hpp"
#include "histaug/datasets.hpp"

namespace histaug {

struct ExtractorArchitecture {
  int class_count = 2;
  int image_height = 32;
  int image_width = 32;
  std::vector<int> blocks{3, 4, 6, 3};  // residual blocks per stage
  int width = 64;
  double dropout = 0.5;

  static ExtractorArchitecture from(const DatasetProfile& profile, const ClassifierConfig& cfg);
  nlohmann::json to_json() const;
  static ExtractorArchitecture from_json(const nlohmann::json& j);
};

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int in, int out, int stride);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, shortcut_bn{nullptr};
};
TORCH_MODULE(BasicBlock);

/// Produces a dropout mask (already scaled by 1/(1-p)) for an activation of the given shape.
using DropoutMaskFn = std::function<torch::Tensor(c10::IntArrayRef shape)>;

/// Residual classifier with four stages. A dropout layer sits in front of the last residual
/// block; it is active in training mode, or whenever a mask function is supplied.
class ResidualClassifierImpl : public torch::nn::Module {
 public:
  explicit ResidualClassifierImpl(const ExtractorArchitecture& arch);

  struct Output {
    torch::Tensor logits;              // [B, C]
    std::vector<torch::Tensor> taps;   // output of each residual stage, [B, A_l, H_l, W_l]
    torch::Tensor pooled;              // [B, F], penultimate features
  };

  /// x: [B, 3, H, W] with values in [0,1].
  Output forward(const torch::Tensor& x, const DropoutMaskFn& mask = nullptr);

  ExtractorArchitecture arch;
  torch::nn::Sequential stem{nullptr};
  std::vector<torch::nn::ModuleList> stages;
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(ResidualClassifier);

/// Per-layer activations for one image, layer l shaped [A_l, H_l, W_l].
using FeatureStack = std::vector<torch::Tensor>;

struct McRun {
  std::vector<double> probabilities;  // softmax output, length C
  FeatureStack features;
};

struct McRunSet {
  std::vector<McRun> runs;
};

/// K stochastic forward passes per image with dropout active and the rest of the network in
/// inference mode. Image b draws its masks from a stream seeded with seeds[b].
std::vector<McRunSet> mc_forward(ResidualClassifier& model, const torch::Tensor& images, int runs,
                                 std::span<const std::uint64_t> seeds, int chunk = 16);
McRunSet mc_forward(ResidualClassifier& model, const torch::Tensor& image, int runs,
                    std::uint64_t seed);

/// -sum p ln p with 0 ln 0 = 0.
double entropy(std::span<const double> probabilities);
/// Mean over runs of the per-run entropy.
double predictive_entropy(const McRunSet& runs);

struct ClassCentroid {
  int label = 0;
  FeatureStack layers;
};

/// Per-layer arithmetic mean of the given stacks.
ClassCentroid centroid_from_stacks(int label, std::span<const FeatureStack> stacks);

/// One forward pass per image (dropout active when requested, each image on its own stream),
/// averaged per layer. images: [N,3,H,W] in [0,1], N >= 1.
ClassCentroid class_centroid(ResidualClassifier& model, const torch::Tensor& images, int label,
                             std::uint64_t seed, bool dropout_active = true);

/// Activation divided by its channel-wise L2 norm at every site (norm clamped at 1e-12).
torch::Tensor channel_normalize(const torch::Tensor& activation);

/// (1/K) sum_k sum_l (1/(H_l W_l)) || n(phi_l^k) - n(c_l) ||^2 with n = channel_normalize.
double feature_distance(const McRunSet& runs, const ClassCentroid& centroid);

struct TrainedClassifier {
  ExtractorArchitecture arch;
  ResidualClassifier model{nullptr};
  double val_accuracy = 0.0;
  int best_epoch = 0;
  std::vector<double> epoch_losses;
};

/// Per-batch augmentation hook: receives a [B,3,H,W] batch in [0,1].
using BatchAugment = std::function<torch::Tensor(const torch::Tensor&, std::mt19937_64&)>;

/// Cross-entropy training with Adam; keeps the parameters of the epoch with the best
/// validation accuracy (the last epoch when no validation data is given).
TrainedClassifier train_residual_classifier(const ExtractorArchitecture& arch,
                                            const ClassifierConfig& cfg,
                                            const torch::Tensor& train_images,
                                            const torch::Tensor& train_labels,
                                            const torch::Tensor& val_images,
                                            const torch::Tensor& val_labels, std::uint64_t seed,
                                            const BatchAugment& augment = {});

/// The MC-dropout feature extractor, trained on the dataset's train split and validated on val.
TrainedClassifier train_extractor(const PatchDataset& dataset, const ExperimentConfig& config);

/// Inference-mode softmax outputs [N, C] and penultimate features [N, F].
torch::Tensor predict_proba(ResidualClassifier& model, const torch::Tensor& images, int chunk = 64);
torch::Tensor penultimate_features(ResidualClassifier& model, const torch::Tensor& images,
                                   int chunk = 64);
double accuracy(ResidualClassifier& model, const torch::Tensor& images, const torch::Tensor& labels);

void save_classifier(const std::filesystem::path& path, const TrainedClassifier& trained);
TrainedClassifier load_classifier(const std::filesystem::path& path);

}  // namespace histaug
