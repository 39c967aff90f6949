#include "histaug/extractor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <ATen/CPUGeneratorImpl.h>

#include "histaug/errors.hpp"
#include "histaug/seed.hpp"

namespace fs = std::filesystem;
namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace histaug {

ExtractorArchitecture ExtractorArchitecture::from(const DatasetProfile& profile,
                                                  const ClassifierConfig& cfg) {
  ExtractorArchitecture arch;
  arch.class_count = profile.class_count();
  arch.image_height = profile.height;
  arch.image_width = profile.width;
  arch.blocks = cfg.blocks;
  arch.width = cfg.width;
  arch.dropout = cfg.dropout;
  return arch;
}

nlohmann::json ExtractorArchitecture::to_json() const {
  return {{"class_count", class_count}, {"image_height", image_height},
          {"image_width", image_width}, {"blocks", blocks},
          {"width", width},             {"dropout", dropout}};
}

ExtractorArchitecture ExtractorArchitecture::from_json(const nlohmann::json& j) {
  ExtractorArchitecture arch;
  arch.class_count = j.at("class_count").get<int>();
  arch.image_height = j.at("image_height").get<int>();
  arch.image_width = j.at("image_width").get<int>();
  arch.blocks = j.at("blocks").get<std::vector<int>>();
  arch.width = j.at("width").get<int>();
  arch.dropout = j.at("dropout").get<double>();
  return arch;
}

BasicBlockImpl::BasicBlockImpl(int in, int out, int stride) {
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  bn1 = register_module("bn1", nn::BatchNorm2d(out));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
  bn2 = register_module("bn2", nn::BatchNorm2d(out));
  if (stride != 1 || in != out) {
    shortcut = register_module("shortcut", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
    shortcut_bn = register_module("shortcut_bn", nn::BatchNorm2d(out));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(bn1(conv1(x)));
  h = bn2(conv2(h));
  const auto identity = shortcut ? shortcut_bn(shortcut(x)) : x;
  return torch::relu(h + identity);
}

ResidualClassifierImpl::ResidualClassifierImpl(const ExtractorArchitecture& arch) : arch(arch) {
  if (arch.blocks.size() != 4) throw ValidationError("residual classifier needs 4 stages");
  if (arch.class_count < 1) throw ValidationError("residual classifier needs at least one class");
  const int w = arch.width;
  if (std::min(arch.image_height, arch.image_width) >= 64) {
    stem = nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, w, 7).stride(2).padding(3).bias(false)),
                          nn::BatchNorm2d(w), nn::ReLU(),
                          nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
  } else {
    stem = nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, w, 3).padding(1).bias(false)),
                          nn::BatchNorm2d(w), nn::ReLU());
  }
  register_module("stem", stem);
  int in = w;
  for (int s = 0; s < 4; ++s) {
    const int out = w << s;
    nn::ModuleList blocks;
    for (int b = 0; b < arch.blocks[s]; ++b) {
      blocks->push_back(BasicBlock(in, out, (b == 0 && s > 0) ? 2 : 1));
      in = out;
    }
    stages.push_back(register_module("stage" + std::to_string(s + 1), blocks));
  }
  fc = register_module("fc", nn::Linear(in, arch.class_count));
}

ResidualClassifierImpl::Output ResidualClassifierImpl::forward(const torch::Tensor& x,
                                                               const DropoutMaskFn& mask) {
  Output out;
  auto h = stem->forward((x - 0.5) / 0.5);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    auto& blocks = stages[s];
    for (std::size_t b = 0; b < blocks->size(); ++b) {
      if (s + 1 == stages.size() && b + 1 == blocks->size()) {
        if (mask) {
          h = h * mask(h.sizes());
        } else if (is_training() && arch.dropout > 0.0) {
          h = F::dropout(h, F::DropoutFuncOptions().p(arch.dropout).training(true));
        }
      }
      h = blocks[b]->as<BasicBlockImpl>()->forward(h);
    }
    out.taps.push_back(h);
  }
  out.pooled = F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  out.logits = fc(out.pooled);
  return out;
}

namespace {

/// Masks for `count` images, `runs` realizations each, every image on its own seeded stream.
DropoutMaskFn seeded_masks(double rate, std::span<const std::uint64_t> seeds, int runs) {
  return [rate, seeds, runs](c10::IntArrayRef shape) {
    const double keep = 1.0 - rate;
    if (rate <= 0.0) return torch::ones(shape);
    std::vector<std::int64_t> one(shape.begin() + 1, shape.end());
    std::vector<torch::Tensor> masks;
    masks.reserve(seeds.size() * runs);
    for (auto seed : seeds) {
      auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
      for (int k = 0; k < runs; ++k) masks.push_back(torch::empty(one).bernoulli_(keep, gen).div_(keep));
    }
    return torch::stack(masks);
  };
}

}  // namespace

std::vector<McRunSet> mc_forward(ResidualClassifier& model, const torch::Tensor& images, int runs,
                                 std::span<const std::uint64_t> seeds, int chunk) {
  if (runs < 1) throw ValidationError("mc_forward needs K >= 1");
  if (images.dim() != 4 || static_cast<std::size_t>(images.size(0)) != seeds.size()) {
    throw ValidationError("mc_forward needs [B,3,H,W] images and one seed per image");
  }
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<McRunSet> out;
  out.reserve(seeds.size());
  const auto n = images.size(0);
  for (std::int64_t start = 0; start < n; start += chunk) {
    const auto stop = std::min<std::int64_t>(n, start + chunk);
    const auto batch = images.slice(0, start, stop).repeat_interleave(runs, 0);
    const auto result = model->forward(
        batch, seeded_masks(model->arch.dropout, seeds.subspan(start, stop - start), runs));
    const auto probs = torch::softmax(result.logits, 1).to(torch::kFloat64).contiguous();
    for (std::int64_t j = 0; j < stop - start; ++j) {
      McRunSet set;
      for (int k = 0; k < runs; ++k) {
        const auto row = j * runs + k;
        McRun run;
        const auto p = probs[row];
        run.probabilities.assign(p.data_ptr<double>(), p.data_ptr<double>() + p.numel());
        for (const auto& tap : result.taps) run.features.push_back(tap[row].clone());
        set.runs.push_back(std::move(run));
      }
      out.push_back(std::move(set));
    }
  }
  return out;
}

McRunSet mc_forward(ResidualClassifier& model, const torch::Tensor& image, int runs, std::uint64_t seed) {
  const std::uint64_t seeds[] = {seed};
  return std::move(mc_forward(model, image.unsqueeze(0), runs, seeds).front());
}

double entropy(std::span<const double> probabilities) {
  if (probabilities.empty()) return 0.0;
  const double c = static_cast<double>(probabilities.size());
  const bool uniform = std::all_of(probabilities.begin(), probabilities.end(),
                                   [&](double p) { return p == probabilities[0]; });
  if (uniform && probabilities[0] > 0.0) return std::log(c);
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::clamp(h, 0.0, std::log(c));
}

double predictive_entropy(const McRunSet& set) {
  if (set.runs.empty()) throw ValidationError("predictive_entropy needs at least one run");
  double total = 0.0;
  for (const auto& run : set.runs) total += entropy(run.probabilities);
  return total / static_cast<double>(set.runs.size());
}

ClassCentroid centroid_from_stacks(int label, std::span<const FeatureStack> stacks) {
  if (stacks.empty()) throw ValidationError("class centroid needs at least one image");
  ClassCentroid c;
  c.label = label;
  for (std::size_t l = 0; l < stacks.front().size(); ++l) {
    auto sum = torch::zeros_like(stacks.front()[l], torch::kFloat64);
    for (const auto& s : stacks) {
      if (s.size() != stacks.front().size() || !s[l].sizes().equals(stacks.front()[l].sizes())) {
        throw ValidationError("feature stacks disagree in shape");
      }
      sum += s[l].to(torch::kFloat64);
    }
    c.layers.push_back(sum / static_cast<double>(stacks.size()));
  }
  return c;
}

ClassCentroid class_centroid(ResidualClassifier& model, const torch::Tensor& images, int label,
                             std::uint64_t seed, bool dropout_active) {
  if (images.dim() != 4 || images.size(0) < 1) {
    throw ValidationError("class centroid for label " + std::to_string(label) + " has no images");
  }
  torch::NoGradGuard no_grad;
  model->eval();
  const auto n = images.size(0);
  std::vector<torch::Tensor> sums;
  constexpr std::int64_t kChunk = 32;
  for (std::int64_t start = 0; start < n; start += kChunk) {
    const auto stop = std::min(n, start + kChunk);
    std::vector<std::uint64_t> seeds;
    for (auto i = start; i < stop; ++i) seeds.push_back(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const auto result = model->forward(images.slice(0, start, stop),
                                       dropout_active ? seeded_masks(model->arch.dropout, seeds, 1)
                                                      : DropoutMaskFn{});
    for (std::size_t l = 0; l < result.taps.size(); ++l) {
      auto s = result.taps[l].to(torch::kFloat64).sum(0);
      if (sums.size() <= l) {
        sums.push_back(s);
      } else {
        sums[l] += s;
      }
    }
  }
  ClassCentroid c;
  c.label = label;
  for (auto& s : sums) c.layers.push_back(s / static_cast<double>(n));
  return c;
}

torch::Tensor channel_normalize(const torch::Tensor& activation) {
  return activation / activation.norm(2, 0, true).clamp_min(1e-12);
}

double feature_distance(const McRunSet& set, const ClassCentroid& centroid) {
  if (set.runs.empty()) throw ValidationError("feature_distance needs at least one run");
  std::vector<torch::Tensor> centre;
  for (const auto& layer : centroid.layers) centre.push_back(channel_normalize(layer.to(torch::kFloat64)));
  double total = 0.0;
  for (const auto& run : set.runs) {
    if (run.features.size() != centre.size()) throw ValidationError("feature stack depth mismatch");
    for (std::size_t l = 0; l < centre.size(); ++l) {
      const auto& phi = run.features[l];
      if (!phi.sizes().equals(centre[l].sizes())) throw ValidationError("feature layer shape mismatch");
      const double sites = static_cast<double>(phi.size(1) * phi.size(2));
      total += (channel_normalize(phi.to(torch::kFloat64)) - centre[l]).pow(2).sum().item<double>() / sites;
    }
  }
  return total / static_cast<double>(set.runs.size());
}

torch::Tensor predict_proba(ResidualClassifier& model, const torch::Tensor& images, int chunk) {
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0; start < images.size(0); start += chunk) {
    const auto stop = std::min<std::int64_t>(images.size(0), start + chunk);
    parts.push_back(torch::softmax(model->forward(images.slice(0, start, stop)).logits, 1));
  }
  if (parts.empty()) return torch::empty({0, model->arch.class_count});
  return torch::cat(parts);
}

torch::Tensor penultimate_features(ResidualClassifier& model, const torch::Tensor& images, int chunk) {
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0; start < images.size(0); start += chunk) {
    const auto stop = std::min<std::int64_t>(images.size(0), start + chunk);
    parts.push_back(model->forward(images.slice(0, start, stop)).pooled);
  }
  if (parts.empty()) return torch::empty({0, model->arch.width * 8});
  return torch::cat(parts);
}

double accuracy(ResidualClassifier& model, const torch::Tensor& images, const torch::Tensor& labels) {
  if (images.size(0) == 0) return 0.0;
  const auto predicted = predict_proba(model, images).argmax(1);
  return predicted.eq(labels).to(torch::kFloat64).mean().item<double>();
}

TrainedClassifier train_residual_classifier(const ExtractorArchitecture& arch,
                                            const ClassifierConfig& cfg,
                                            const torch::Tensor& train_images,
                                            const torch::Tensor& train_labels,
                                            const torch::Tensor& val_images,
                                            const torch::Tensor& val_labels, std::uint64_t seed,
                                            const BatchAugment& augment) {
  const auto n = train_images.size(0);
  if (n == 0) throw ValidationError("classifier training needs a non-empty train set");
  if (std::get<0>(at::_unique(train_labels)).numel() < 2)
    throw ValidationError("classifier training needs at least two classes");
  torch::manual_seed(seed);
  TrainedClassifier trained;
  trained.arch = arch;
  trained.model = ResidualClassifier(arch);
  auto& model = trained.model;
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  std::mt19937_64 rng(mix_seed(seed, 0xc1a5));
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  std::vector<torch::Tensor> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& t : model->parameters()) best.push_back(t.detach().clone());
    for (const auto& t : model->buffers()) best.push_back(t.detach().clone());
  };
  double best_acc = -1.0;
  const bool has_val = val_images.defined() && val_images.size(0) > 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model->train();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const auto stop = std::min<std::int64_t>(n, start + cfg.batch_size);
      if (stop - start < 2 && n >= 2) continue;  // batch norm needs two samples
      const auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + start, order.begin() + stop));
      auto xb = train_images.index_select(0, idx);
      if (augment) xb = augment(xb, rng);
      const auto loss = F::cross_entropy(model->forward(xb).logits, train_labels.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
      loss_sum += loss.item<double>();
      ++batches;
    }
    trained.epoch_losses.push_back(batches > 0 ? loss_sum / batches : 0.0);
    const double acc = has_val ? accuracy(model, val_images, val_labels) : 0.0;
    if (!has_val || acc > best_acc) {
      best_acc = acc;
      trained.best_epoch = epoch;
      snapshot();
    }
  }
  {
    torch::NoGradGuard no_grad;
    std::size_t i = 0;
    for (auto& t : model->parameters()) t.copy_(best[i++]);
    for (auto& t : model->buffers()) t.copy_(best[i++]);
  }
  model->eval();
  trained.val_accuracy = has_val ? best_acc : 0.0;
  return trained;
}

TrainedClassifier train_extractor(const PatchDataset& dataset, const ExperimentConfig& config) {
  const auto sizes = dataset.class_sizes(Split::train);
  const auto present = std::count_if(sizes.begin(), sizes.end(), [](auto s) { return s > 0; });
  if (present < 2) throw ValidationError("feature extractor needs at least two classes in the train split");
  const auto arch = ExtractorArchitecture::from(dataset.profile(), config.classifier);
  return train_residual_classifier(arch, config.classifier, dataset.images(Split::train),
                                   dataset.labels(Split::train), dataset.images(Split::val),
                                   dataset.labels(Split::val), mix_seed(config.seed, 0xe7));
}

void save_classifier(const fs::path& path, const TrainedClassifier& trained) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive root, m;
  trained.model->save(m);
  root.write("model", m);
  root.write("arch", c10::IValue(trained.arch.to_json().dump()));
  root.write("val_accuracy", c10::IValue(trained.val_accuracy));
  root.write("best_epoch", c10::IValue(static_cast<std::int64_t>(trained.best_epoch)));
  root.save_to(path.string());
}

TrainedClassifier load_classifier(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw FormatError("missing classifier " + path.string());
  torch::serialize::InputArchive root;
  root.load_from(path.string());
  c10::IValue arch, acc, epoch;
  root.read("arch", arch);
  root.read("val_accuracy", acc);
  root.read("best_epoch", epoch);
  TrainedClassifier trained;
  trained.arch = ExtractorArchitecture::from_json(nlohmann::json::parse(arch.toStringRef()));
  trained.model = ResidualClassifier(trained.arch);
  torch::serialize::InputArchive m;
  root.read("model", m);
  trained.model->load(m);
  trained.model->eval();
  trained.val_accuracy = acc.toDouble();
  trained.best_epoch = static_cast<int>(epoch.toInt());
  return trained;
}

}  // namespace histaug
