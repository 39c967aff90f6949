#include <cmath>

#include <gtest/gtest.h>

#include "histaug/errors.hpp"
#include "histaug/histogan.hpp"
#include "histaug/seed.hpp"
#include "test_util.hpp"

using namespace histaug;

namespace {

GanArchitecture small_arch(int stages = 2, int h = 32, int w = 32, int classes = 2) {
  GanArchitecture a;
  a.stage_count = stages;
  a.class_count = classes;
  a.noise_dim = 16;
  a.image_height = h;
  a.image_width = w;
  a.gen_width = 8;
  a.disc_width = 8;
  return a;
}

torch::Tensor labels_of(std::vector<int64_t> v) { return torch::tensor(v, torch::kInt64); }

ExperimentConfig toy_training_config() {
  ExperimentConfig c;
  c.seed = 21;
  c.data.profile = "toy";
  c.gan.stage_count = 2;
  c.gan.noise_dim = 32;
  c.gan.batch_size = 32;
  c.gan.epochs = 60;
  c.gan.warmup_epochs = 10;
  c.gan.max_steps = 200;
  c.gan.gp_weight = 10.0;
  c.gan.gen_width = 16;
  c.gan.disc_width = 16;
  return c;
}

// one toy training run shared by the smoke, checkpoint and conditioning tests
struct TrainedToy {
  histaug::testing::TempDir dir{"gan"};
  PatchDataset data = make_toy_dataset(100, 5, 3);
  ExperimentConfig config = toy_training_config();
  GanRun run;
  TrainedToy() { run = train_gan(data, config, dir.path()); }
};

TrainedToy& trained_toy() {
  static TrainedToy t;
  return t;
}

}  // namespace

TEST(StageResolutions, ProfilesHalveTowardsStageOne) {
  using R = std::vector<std::pair<int, int>>;
  const auto cervical = builtin_profile("cervical");
  EXPECT_EQ(stage_resolutions(cervical.height, cervical.width, 3), (R{{64, 32}, {128, 64}, {256, 128}}));
  const auto pcam = builtin_profile("pcam");
  EXPECT_EQ(stage_resolutions(pcam.height, pcam.width, 2), (R{{48, 48}, {96, 96}}));
  EXPECT_EQ(stage_resolutions(32, 32, 2), (R{{16, 16}, {32, 32}}));
  EXPECT_THROW(stage_resolutions(32, 32, 3), ValidationError);  // 8x8 cannot hold 4 upsampling blocks
  EXPECT_THROW(stage_resolutions(32, 32, 0), ValidationError);
}

TEST(Generator, PyramidContract) {
  torch::manual_seed(1);
  for (const auto& [stages, h, w] : std::vector<std::tuple<int, int, int>>{{2, 32, 32}, {1, 16, 32}, {3, 64, 64}}) {
    Generator g(small_arch(stages, h, w, 3));
    const auto p = g->forward(torch::randn({3, 16}), labels_of({0, 1, 2}));
    ASSERT_EQ(static_cast<int>(p.images.size()), stages);
    for (int s = 0; s < stages; ++s) {
      const auto& img = p.images[s];
      EXPECT_EQ(img.size(0), 3);
      EXPECT_EQ(img.size(1), 3);
      if (s > 0) {
        EXPECT_EQ(img.size(2), 2 * p.images[s - 1].size(2));
        EXPECT_EQ(img.size(3), 2 * p.images[s - 1].size(3));
      }
      EXPECT_LE(img.abs().max().item<double>(), 1.0);
    }
    EXPECT_EQ(p.images.back().size(2), h);
    EXPECT_EQ(p.images.back().size(3), w);
    const int64_t n = p.attention_height * p.attention_width;
    EXPECT_EQ(p.attention.sizes(), (std::vector<int64_t>{3, n, n}));
    EXPECT_LE((p.attention.sum(2) - 1).abs().max().item<double>(), 1e-5);
  }
}

TEST(Generator, InferenceIsDeterministic) {
  torch::manual_seed(2);
  Generator g(small_arch());
  g->eval();
  const auto z = torch::randn({4, 16});
  const auto y = labels_of({0, 1, 0, 1});
  torch::NoGradGuard guard;
  const auto a = g->forward(z, y).images.back();
  const auto b = g->forward(z, y).images.back();
  EXPECT_TRUE(torch::equal(a, b));
}

TEST(Generator, RejectsBadInputs) {
  Generator g(small_arch());
  EXPECT_THROW(g->forward(torch::randn({2, 15}), labels_of({0, 1})), ValidationError);
  EXPECT_THROW(g->forward(torch::randn({2, 16}), labels_of({0, 2})), ValidationError);
  EXPECT_THROW(g->forward(torch::randn({2, 16}), labels_of({0})), ValidationError);
}

TEST(Generator, GenerateImagesMapsToUnitRange) {
  torch::manual_seed(3);
  Generator g(small_arch());
  const auto img = generate_images(g, torch::randn({5, 16}), labels_of({0, 0, 1, 1, 0}));
  EXPECT_EQ(img.sizes(), (std::vector<int64_t>{5, 3, 32, 32}));
  EXPECT_GE(img.min().item<double>(), 0.0);
  EXPECT_LE(img.max().item<double>(), 1.0);
}

TEST(Discriminator, FiniteScoresPerImageAndLabelSensitive) {
  torch::manual_seed(4);
  const auto arch = small_arch();
  DiscriminatorSet d(arch);
  ASSERT_EQ(d->stage_count(), 2);
  for (int s = 0; s < 2; ++s) {
    const int side = 16 << s;
    const auto img = torch::rand({6, 3, side, side}) * 2 - 1;
    const auto scores = d->forward(img, labels_of({0, 1, 0, 1, 0, 1}), s);
    EXPECT_EQ(scores.sizes(), (std::vector<int64_t>{6}));
    EXPECT_TRUE(torch::isfinite(scores).all().item<bool>());
  }
  d->eval();
  const auto one = (torch::rand({1, 3, 32, 32}) * 2 - 1).repeat({2, 1, 1, 1});
  const auto both = d->forward(one, labels_of({0, 1}), 1);
  EXPECT_NE(both[0].item<double>(), both[1].item<double>());
}

TEST(Discriminator, StageAndResolutionChecked) {
  DiscriminatorSet d(small_arch());
  EXPECT_THROW(d->forward(torch::zeros({2, 3, 32, 32}), labels_of({0, 1}), 0), ValidationError);
  EXPECT_THROW(d->forward(torch::zeros({2, 3, 16, 16}), labels_of({0, 1}), 2), ValidationError);
  EXPECT_THROW(d->forward(torch::zeros({2, 3, 16, 16}), labels_of({0, 1}), -1), ValidationError);
}

TEST(Discriminator, SpectralLayersBoundedAfterTwentyIterations) {
  torch::manual_seed(5);
  DiscriminatorSet d(small_arch());
  d->train();
  const auto x1 = torch::rand({4, 3, 16, 16}) * 2 - 1, x2 = torch::rand({4, 3, 32, 32}) * 2 - 1;
  const auto y = labels_of({0, 1, 1, 0});
  for (int i = 0; i < 20; ++i) {
    d->forward(x1, y, 0);
    d->forward(x2, y, 1);
  }
  const auto layers = d->spectral_layers();
  ASSERT_FALSE(layers.empty());
  for (const auto& m : layers) {
    torch::Tensor w;
    if (auto conv = std::dynamic_pointer_cast<SNConv2dImpl>(m)) w = conv->normalized_weight();
    if (auto lin = std::dynamic_pointer_cast<SNLinearImpl>(m)) w = lin->normalized_weight();
    ASSERT_TRUE(w.defined());
    const auto s = torch::linalg_svdvals(w.detach().reshape({w.size(0), -1}).to(torch::kFloat64));
    EXPECT_GE(s[0].item<double>(), 0.9);
    EXPECT_LE(s[0].item<double>(), 1.1);
  }
}

TEST(RealPyramid, AreaAveragesPerStage) {
  const auto img = torch::rand({2, 3, 32, 32});
  const auto p = real_pyramid(img, 2);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_TRUE(torch::equal(p[1], img));
  EXPECT_EQ(p[0].sizes(), (std::vector<int64_t>{2, 3, 16, 16}));
  const double corner = img.index({0, 0, torch::indexing::Slice(0, 2), torch::indexing::Slice(0, 2)}).mean().item<double>();
  EXPECT_NEAR(p[0][0][0][0][0].item<double>(), corner, 1e-6);
}

TEST(Checkpoints, EpochSeries) {
  EXPECT_EQ(checkpoint_epochs(1000, 100).size(), 900u);
  EXPECT_EQ(checkpoint_epochs(1000, 100).front(), 101);
  EXPECT_EQ(checkpoint_epochs(1000, 100).back(), 1000);
  EXPECT_TRUE(checkpoint_epochs(10, 10).empty());
  EXPECT_EQ(checkpoint_name(101), "gan_epoch_0101");
}

TEST(Checkpoints, RoundTripReproducesGenerator) {
  histaug::testing::TempDir dir("ckpt");
  torch::manual_seed(6);
  const auto arch = small_arch();
  Generator g(arch);
  DiscriminatorSet d(arch);
  save_checkpoint(dir / "gan_epoch_0003", 3, arch, "abc", g, d);
  auto loaded = load_checkpoint(dir / "gan_epoch_0003");
  EXPECT_EQ(loaded.epoch, 3);
  EXPECT_EQ(loaded.fingerprint, "abc");
  EXPECT_TRUE(loaded.arch == arch);
  const auto z = torch::randn({3, 16});
  const auto y = labels_of({1, 0, 1});
  EXPECT_TRUE(torch::equal(generate_images(g, z, y), generate_images(loaded.generator, z, y)));
  const auto list = list_checkpoints(dir.path());
  ASSERT_EQ(list.size(), 1u);
  EXPECT_EQ(list[0].epoch, 3);
  EXPECT_THROW(load_checkpoint(dir / "missing"), FormatError);
}

TEST(Noise, SeededStreamsAreReproducible) {
  EXPECT_TRUE(torch::equal(seeded_noise(42, 8), seeded_noise(42, 8)));
  EXPECT_FALSE(torch::equal(seeded_noise(42, 8), seeded_noise(43, 8)));
  const auto big = seeded_noise(7, 20000);
  EXPECT_NEAR(big.mean().item<double>(), 0.0, 0.05);
  EXPECT_NEAR(big.std().item<double>(), 1.0, 0.05);
}

TEST(TrainGan, FirstEpochLossIsDeterministic) {
  const auto data = make_toy_dataset(40, 4, 9);
  auto config = toy_training_config();
  config.gan.epochs = 1;
  config.gan.warmup_epochs = 0;
  config.gan.max_steps = 3;
  histaug::testing::TempDir a("gan_a"), b("gan_b");
  const auto r1 = train_gan(data, config, a.path());
  const auto r2 = train_gan(data, config, b.path());
  ASSERT_EQ(r1.losses.size(), 1u);
  EXPECT_EQ(r1.losses[0].critic_loss, r2.losses[0].critic_loss);
  EXPECT_EQ(r1.losses[0].gen_loss, r2.losses[0].gen_loss);
}

TEST(TrainGan, ToySmokeRun) {
  auto& t = trained_toy();
  EXPECT_EQ(t.run.steps, 200);
  ASSERT_FALSE(t.run.checkpoints.empty());
  for (const auto& l : t.run.losses) {
    EXPECT_TRUE(std::isfinite(l.critic_loss));
    EXPECT_TRUE(std::isfinite(l.gen_loss));
  }
  for (std::size_t i = 1; i < t.run.checkpoints.size(); ++i)
    EXPECT_GT(t.run.checkpoints[i].epoch, t.run.checkpoints[i - 1].epoch);
  for (const auto& c : t.run.checkpoints) EXPECT_GT(c.epoch, t.config.gan.warmup_epochs);
  const auto index = read_gan_index(t.dir.path());
  EXPECT_EQ(index.size(), t.run.losses.size());
  EXPECT_EQ(list_checkpoints(t.dir.path()).size(), t.run.checkpoints.size());
}

TEST(TrainGan, ConditioningChangesOutput) {
  auto& t = trained_toy();
  auto gan = load_checkpoint(t.run.checkpoints.back().path);
  std::vector<torch::Tensor> zs;
  for (int i = 0; i < 16; ++i) zs.push_back(seeded_noise(mix_seed(5, i), gan.arch.noise_dim));
  const auto z = torch::stack(zs);
  const auto a = generate_images(gan.generator, z, torch::zeros({16}, torch::kInt64));
  const auto b = generate_images(gan.generator, z, torch::ones({16}, torch::kInt64));
  EXPECT_GT((a - b).abs().mean().item<double>(), 0.0);
}
