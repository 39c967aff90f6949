#include "histaug/histogan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

#include "histaug/errors.hpp"
#include "histaug/seed.hpp"

namespace fs = std::filesystem;
namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace histaug {

GanArchitecture GanArchitecture::from(const DatasetProfile& profile, const GanConfig& gan) {
  GanArchitecture arch;
  arch.stage_count = gan.stage_count;
  arch.class_count = profile.class_count();
  arch.noise_dim = gan.noise_dim;
  arch.image_height = profile.height;
  arch.image_width = profile.width;
  arch.gen_width = gan.gen_width;
  arch.disc_width = gan.disc_width;
  return arch;
}

nlohmann::json GanArchitecture::to_json() const {
  return {{"stage_count", stage_count}, {"class_count", class_count},
          {"noise_dim", noise_dim},     {"image_height", image_height},
          {"image_width", image_width}, {"gen_width", gen_width},
          {"disc_width", disc_width}};
}

GanArchitecture GanArchitecture::from_json(const nlohmann::json& j) {
  GanArchitecture arch;
  arch.stage_count = j.at("stage_count").get<int>();
  arch.class_count = j.at("class_count").get<int>();
  arch.noise_dim = j.at("noise_dim").get<int>();
  arch.image_height = j.at("image_height").get<int>();
  arch.image_width = j.at("image_width").get<int>();
  arch.gen_width = j.at("gen_width").get<int>();
  arch.disc_width = j.at("disc_width").get<int>();
  return arch;
}

std::vector<std::pair<int, int>> stage_resolutions(int height, int width, int stages) {
  if (stages < 1) throw ValidationError("stage count must be >= 1");
  const int shrink = 1 << (stages - 1);
  if (height % shrink != 0 || width % shrink != 0) {
    throw ValidationError("image size is not divisible across " + std::to_string(stages) + " stages");
  }
  const int h1 = height / shrink, w1 = width / shrink;
  if (h1 % 16 != 0 || w1 % 16 != 0) {
    throw ValidationError("first-stage resolution " + std::to_string(h1) + "x" + std::to_string(w1) +
                          " must be divisible by 16 (four upsampling blocks)");
  }
  std::vector<std::pair<int, int>> out;
  for (int s = 0; s < stages; ++s) out.emplace_back(h1 << s, w1 << s);
  return out;
}

UpBlockImpl::UpBlockImpl(int in, int out, int classes) {
  conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
  norm = register_module("norm", ConditionalBatchNorm2d(out, classes));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& labels) {
  auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{2.0, 2.0})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
  return torch::relu(norm(conv(up), labels));
}

ResBlockImpl::ResBlockImpl(int channels, int classes) {
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)));
  norm1 = register_module("norm1", ConditionalBatchNorm2d(channels, classes));
  norm2 = register_module("norm2", ConditionalBatchNorm2d(channels, classes));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& labels) {
  auto h = torch::relu(norm1(conv1(x), labels));
  h = norm2(conv2(h), labels);
  return torch::relu(x + h);
}

GeneratorImpl::GeneratorImpl(const GanArchitecture& arch)
    : arch(arch), resolutions(stage_resolutions(arch.image_height, arch.image_width, arch.stage_count)) {
  const int g = arch.gen_width, C = arch.class_count, nz = arch.noise_dim;
  const int h0 = resolutions[0].first / 16, w0 = resolutions[0].second / 16;
  label_embed = register_module("label_embed", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(C, nz, 1)));
  input = register_module(
      "input", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * nz, 8 * g, {h0, w0})));
  input_norm = register_module("input_norm", ConditionalBatchNorm2d(8 * g, C));

  const int widths[] = {8 * g, 4 * g, 2 * g, g, g};
  for (int b = 0; b < 4; ++b) stage1_blocks->push_back(UpBlock(widths[b], widths[b + 1], C));
  register_module("stage1_blocks", stage1_blocks);
  attention = register_module("attention", SelfAttention(g));

  for (int s = 1; s < arch.stage_count; ++s) {
    nn::ModuleList blocks;
    blocks->push_back(ResBlock(g, C));
    blocks->push_back(ResBlock(g, C));
    blocks->push_back(UpBlock(g, g, C));
    refiners->push_back(blocks);
  }
  register_module("refiners", refiners);
  for (int s = 0; s < arch.stage_count; ++s) {
    heads->push_back(nn::Conv2d(nn::Conv2dOptions(g, 3, 3).padding(1)));
  }
  register_module("heads", heads);
}

ImagePyramid GeneratorImpl::forward(const torch::Tensor& z, const torch::Tensor& labels) {
  if (z.dim() != 2 || z.size(1) != arch.noise_dim) {
    throw ValidationError("generator expects noise [B, " + std::to_string(arch.noise_dim) + "]");
  }
  const auto B = z.size(0);
  if (labels.dim() != 1 || labels.size(0) != B) throw ValidationError("generator needs one label per noise vector");
  if (B > 0 && (labels.min().item<std::int64_t>() < 0 ||
                labels.max().item<std::int64_t>() >= arch.class_count)) {
    throw ValidationError("generator label outside [0, class_count)");
  }

  const auto onehot = F::one_hot(labels, arch.class_count).to(z.scalar_type()).view({B, arch.class_count, 1, 1});
  auto x = torch::cat({z.view({B, arch.noise_dim, 1, 1}), label_embed(onehot)}, 1);
  x = torch::relu(input_norm(input(x), labels));
  for (const auto& block : *stage1_blocks) x = block->as<UpBlockImpl>()->forward(x, labels);

  ImagePyramid pyramid;
  auto attended = attention(x);
  x = attended.output;
  pyramid.attention = attended.attention;
  pyramid.attention_height = static_cast<int>(x.size(2));
  pyramid.attention_width = static_cast<int>(x.size(3));
  pyramid.images.push_back(torch::tanh(heads[0]->as<nn::Conv2dImpl>()->forward(x)));

  for (int s = 1; s < arch.stage_count; ++s) {
    auto& blocks = *refiners[s - 1]->as<nn::ModuleListImpl>();
    x = blocks[0]->as<ResBlockImpl>()->forward(x, labels);
    x = blocks[1]->as<ResBlockImpl>()->forward(x, labels);
    x = blocks[2]->as<UpBlockImpl>()->forward(x, labels);
    pyramid.images.push_back(torch::tanh(heads[s]->as<nn::Conv2dImpl>()->forward(x)));
  }
  return pyramid;
}

StageDiscriminatorImpl::StageDiscriminatorImpl(const GanArchitecture& arch, int stage) {
  const auto res = stage_resolutions(arch.image_height, arch.image_width, arch.stage_count);
  if (stage < 0 || stage >= arch.stage_count) throw ValidationError("discriminator stage out of range");
  height = res[stage].first;
  width = res[stage].second;
  const int d = arch.disc_width;

  int h = height, w = width, channels = 3, next = d;
  while (h % 2 == 0 && w % 2 == 0 && h / 2 >= 4 && w / 2 >= 4) {
    downs->push_back(SNConv2d(channels, next, 4, 2, 1));
    down_norms->push_back(ConditionalBatchNorm2d(next, arch.class_count));
    channels = next;
    next = std::min(next * 2, 8 * d);
    h /= 2;
    w /= 2;
  }
  register_module("downs", downs);
  register_module("down_norms", down_norms);
  attention = register_module("attention", SelfAttention(channels));
  head_conv = register_module("head_conv", SNConv2d(channels, channels, 3, 1, 1));
  head_norm = register_module("head_norm", nn::BatchNorm2d(channels));
  const int flat = channels * h * w;
  minibatch = register_module("minibatch", MinibatchDiscrimination(flat));
  output = register_module("output", SNLinear(flat + minibatch->kernels, 1));
  projection = register_module("projection", nn::Embedding(arch.class_count, channels));
  nn::init::normal_(projection->weight, 0.0, 0.1);
}

torch::Tensor StageDiscriminatorImpl::forward(const torch::Tensor& image, const torch::Tensor& labels) {
  if (image.dim() != 4 || image.size(1) != 3 || image.size(2) != height || image.size(3) != width) {
    std::ostringstream msg;
    msg << "discriminator stage expects [B,3," << height << "," << width << "], got " << image.sizes();
    throw ValidationError(msg.str());
  }
  auto x = image;
  for (std::size_t i = 0; i < downs->size(); ++i) {
    x = downs[i]->as<SNConv2dImpl>()->forward(x);
    x = F::leaky_relu(down_norms[i]->as<ConditionalBatchNorm2dImpl>()->forward(x, labels),
                      F::LeakyReLUFuncOptions().negative_slope(0.2));
  }
  x = attention(x).output;
  x = F::leaky_relu(head_norm(head_conv(x)), F::LeakyReLUFuncOptions().negative_slope(0.2));
  const auto conditional = (projection(labels) * x.sum({2, 3})).sum(1);
  return output(minibatch(x.flatten(1))).squeeze(1) + conditional;
}

DiscriminatorSetImpl::DiscriminatorSetImpl(const GanArchitecture& arch) {
  for (int s = 0; s < arch.stage_count; ++s) stages->push_back(StageDiscriminator(arch, s));
  register_module("stages", stages);
}

StageDiscriminator DiscriminatorSetImpl::stage(int s) {
  if (s < 0 || s >= stage_count()) throw ValidationError("discriminator stage out of range");
  return StageDiscriminator(std::dynamic_pointer_cast<StageDiscriminatorImpl>(stages->ptr(s)));
}

torch::Tensor DiscriminatorSetImpl::forward(const torch::Tensor& image, const torch::Tensor& labels,
                                            int stage_index) {
  return stage(stage_index)->forward(image, labels);
}

std::vector<std::shared_ptr<nn::Module>> DiscriminatorSetImpl::spectral_layers() {
  std::vector<std::shared_ptr<nn::Module>> out;
  for (const auto& m : modules(false)) {
    if (m->as<SNConv2dImpl>() != nullptr || m->as<SNLinearImpl>() != nullptr) out.push_back(m);
  }
  return out;
}

std::vector<torch::Tensor> real_pyramid(const torch::Tensor& images, int stages) {
  std::vector<torch::Tensor> out;
  for (int s = 0; s < stages; ++s) {
    const int factor = 1 << (stages - 1 - s);
    out.push_back(factor == 1 ? images : F::avg_pool2d(images, F::AvgPool2dFuncOptions(factor)));
  }
  return out;
}

std::vector<int> checkpoint_epochs(int epochs, int warmup) {
  std::vector<int> out;
  for (int e = std::max(warmup, 0) + 1; e <= epochs; ++e) out.push_back(e);
  return out;
}

std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "gan_epoch_%04d", epoch);
  return buf;
}

std::string gan_fingerprint(const GanArchitecture& arch, const GanConfig& gan) {
  nlohmann::json j = {{"arch", arch.to_json()},
                      {"learning_rate", gan.learning_rate},
                      {"gp_weight", gan.gp_weight},
                      {"beta1", gan.beta1},
                      {"beta2", gan.beta2},
                      {"critic_iters", gan.critic_iters},
                      {"batch_size", gan.batch_size}};
  return config_fingerprint(j);
}

void save_checkpoint(const fs::path& path, int epoch, const GanArchitecture& arch,
                     const std::string& fingerprint, Generator& generator,
                     DiscriminatorSet& discriminators) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive root, g, d;
  generator->save(g);
  discriminators->save(d);
  root.write("generator", g);
  root.write("discriminators", d);
  root.write("epoch", c10::IValue(static_cast<std::int64_t>(epoch)));
  root.write("fingerprint", c10::IValue(fingerprint));
  root.write("arch", c10::IValue(arch.to_json().dump()));
  root.save_to(path.string());
}

LoadedGan load_checkpoint(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw FormatError("missing checkpoint " + path.string());
  torch::serialize::InputArchive root;
  try {
    root.load_from(path.string());
  } catch (const c10::Error& e) {
    throw FormatError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  c10::IValue arch_value, epoch_value, fingerprint_value;
  root.read("arch", arch_value);
  root.read("epoch", epoch_value);
  root.read("fingerprint", fingerprint_value);

  LoadedGan loaded;
  loaded.arch = GanArchitecture::from_json(nlohmann::json::parse(arch_value.toStringRef()));
  loaded.epoch = static_cast<int>(epoch_value.toInt());
  loaded.fingerprint = fingerprint_value.toStringRef();
  loaded.generator = Generator(loaded.arch);
  loaded.discriminators = DiscriminatorSet(loaded.arch);
  torch::serialize::InputArchive g, d;
  root.read("generator", g);
  root.read("discriminators", d);
  loaded.generator->load(g);
  loaded.discriminators->load(d);
  loaded.generator->eval();
  loaded.discriminators->eval();
  return loaded;
}

void write_gan_index(const fs::path& dir, const std::vector<EpochLoss>& losses) {
  fs::create_directories(dir);
  std::ofstream out(dir / "gan_index.csv");
  if (!out) throw FormatError("cannot write gan_index.csv under " + dir.string());
  out << "epoch,critic_loss,gen_loss\n" << std::setprecision(10);
  for (const auto& l : losses) out << l.epoch << ',' << l.critic_loss << ',' << l.gen_loss << '\n';
}

std::vector<EpochLoss> read_gan_index(const fs::path& dir) {
  std::ifstream in(dir / "gan_index.csv");
  if (!in) throw FormatError("missing gan_index.csv under " + dir.string());
  std::string line;
  std::getline(in, line);
  std::vector<EpochLoss> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochLoss l;
    char c1 = 0, c2 = 0;
    std::istringstream row(line);
    if (!(row >> l.epoch >> c1 >> l.critic_loss >> c2 >> l.gen_loss)) {
      throw FormatError("malformed gan_index.csv row: " + line);
    }
    out.push_back(l);
  }
  return out;
}

std::vector<GanCheckpoint> list_checkpoints(const fs::path& dir) {
  static const std::regex pattern(R"(gan_epoch_(\d+))");
  std::vector<GanCheckpoint> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (!entry.is_regular_file() || !std::regex_match(name, m, pattern)) continue;
    torch::serialize::InputArchive root;
    root.load_from(entry.path().string());
    c10::IValue arch_value, fingerprint_value;
    root.read("arch", arch_value);
    root.read("fingerprint", fingerprint_value);
    const auto arch = GanArchitecture::from_json(nlohmann::json::parse(arch_value.toStringRef()));
    out.push_back({std::stoi(m[1].str()), arch.stage_count, arch.class_count,
                   fingerprint_value.toStringRef(), entry.path()});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  return out;
}

GanRun train_gan(const PatchDataset& dataset, const ExperimentConfig& config, const fs::path& out_dir,
                 const std::function<void(const EpochLoss&)>& on_epoch) {
  config.validate();
  const auto& gc = config.gan;
  const auto n = static_cast<std::int64_t>(dataset.count(Split::train));
  if (n == 0) throw ValidationError("train_gan needs a non-empty train split");

  GanRun run;
  run.arch = GanArchitecture::from(dataset.profile(), gc);
  const auto fingerprint = gan_fingerprint(run.arch, gc);
  torch::manual_seed(mix_seed(config.seed, 0x6a11));

  Generator generator(run.arch);
  DiscriminatorSet critics(run.arch);
  const auto betas = std::make_tuple(gc.beta1, gc.beta2);
  torch::optim::Adam g_opt(generator->parameters(), torch::optim::AdamOptions(gc.learning_rate).betas(betas));
  torch::optim::Adam d_opt(critics->parameters(), torch::optim::AdamOptions(gc.learning_rate).betas(betas));

  const auto images = dataset.images(Split::train).mul(2.0).sub(1.0);
  const auto labels = dataset.labels(Split::train);
  const std::int64_t batch = std::min<std::int64_t>(gc.batch_size, n);
  const std::int64_t steps_per_epoch = std::max<std::int64_t>(1, n / batch);
  const int S = run.arch.stage_count;
  std::mt19937_64 rng(mix_seed(config.seed, 0x5bf1));
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  fs::create_directories(out_dir);
  bool stop = false;
  for (int epoch = 1; epoch <= gc.epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double critic_sum = 0.0, gen_sum = 0.0;
    int finite_steps = 0;
    generator->train();
    critics->train();
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      const auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + step * batch,
                                                               order.begin() + (step + 1) * batch));
      const auto y = labels.index_select(0, idx);
      const auto reals = real_pyramid(images.index_select(0, idx), S);

      torch::Tensor critic_total;
      for (int it = 0; it < gc.critic_iters; ++it) {
        std::vector<torch::Tensor> fakes;
        {
          torch::NoGradGuard no_grad;
          fakes = generator->forward(torch::randn({batch, run.arch.noise_dim}), y).images;
        }
        critic_total = torch::zeros({});
        for (int s = 0; s < S; ++s) {
          auto critic = critics->stage(s);
          const auto real_scores = critic->forward(reals[s], y);
          const auto fake_scores = critic->forward(fakes[s], y);
          const auto norms = interpolate_grad_norms(
              [&](const torch::Tensor& x) { return critic->forward(x, y); }, reals[s], fakes[s]);
          critic_total = critic_total + critic_loss(real_scores, fake_scores, norms, gc.gp_weight);
        }
        d_opt.zero_grad();
        critic_total.backward();
        d_opt.step();
      }

      auto pyramid = generator->forward(torch::randn({batch, run.arch.noise_dim}), y);
      std::vector<torch::Tensor> scores;
      for (int s = 0; s < S; ++s) scores.push_back(critics->forward(pyramid.images[s], y, s));
      const auto g_loss = generator_loss(scores);
      g_opt.zero_grad();
      g_loss.backward();
      g_opt.step();

      const double c = critic_total.item<double>(), g = g_loss.item<double>();
      if (std::isfinite(c) && std::isfinite(g)) {
        critic_sum += c;
        gen_sum += g;
        ++finite_steps;
      }
      ++run.steps;
      if (gc.max_steps > 0 && run.steps >= gc.max_steps) {
        stop = true;
        break;
      }
    }
    if (finite_steps == 0) {
      write_gan_index(out_dir, run.losses);
      throw NumericalError("GAN training produced only non-finite losses in epoch " + std::to_string(epoch));
    }
    EpochLoss loss{epoch, critic_sum / finite_steps, gen_sum / finite_steps};
    run.losses.push_back(loss);
    if (on_epoch) on_epoch(loss);
    if (epoch > gc.warmup_epochs) {
      const auto path = out_dir / checkpoint_name(epoch);
      save_checkpoint(path, epoch, run.arch, fingerprint, generator, critics);
      run.checkpoints.push_back({epoch, S, run.arch.class_count, fingerprint, path});
    }
  }
  if (run.checkpoints.empty()) {
    const int last = run.losses.back().epoch;
    run.warnings.push_back("training ended before the warm-up threshold; saved final epoch " +
                           std::to_string(last) + " only");
    const auto path = out_dir / checkpoint_name(last);
    save_checkpoint(path, last, run.arch, fingerprint, generator, critics);
    run.checkpoints.push_back({last, S, run.arch.class_count, fingerprint, path});
  }
  write_gan_index(out_dir, run.losses);
  return run;
}

torch::Tensor generate_images(Generator& generator, const torch::Tensor& z, const torch::Tensor& labels) {
  torch::NoGradGuard no_grad;
  generator->eval();
  return generator->forward(z, labels).images.back().add(1.0).div(2.0).clamp(0.0, 1.0);
}

torch::Tensor seeded_noise(std::uint64_t seed, int noise_dim) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn({noise_dim}, gen, torch::TensorOptions().dtype(torch::kFloat32));
}

}  // namespace histaug
