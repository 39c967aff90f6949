#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "histaug/errors.hpp"
#include "histaug/selector.hpp"
#include "test_util.hpp"

using namespace histaug;

namespace {

CandidateSample scored(std::int64_t id, int label, double entropy, double distance) {
  CandidateSample c;
  c.id = id;
  c.assigned_label = label;
  c.entropy = entropy;
  c.distance = distance;
  return c;
}

std::vector<ClassCentroid> dummy_centroids(int classes) {
  std::vector<ClassCentroid> out;
  for (int i = 0; i < classes; ++i) out.push_back({i, {torch::zeros({1, 1, 1})}});
  return out;
}

DatasetProfile four_class_profile() { return {"four", 32, 32, 2, {"a", "b", "c", "d"}}; }

std::vector<CandidateSample> random_pool(std::span<const std::int64_t> pool_sizes, std::uint64_t seed,
                                         bool coarse = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<CandidateSample> pool;
  std::int64_t id = 0;
  for (std::size_t label = 0; label < pool_sizes.size(); ++label) {
    for (std::int64_t j = 0; j < pool_sizes[label]; ++j) {
      double e = u(rng), d = u(rng) * 3;
      if (coarse) {  // many ties
        e = std::floor(e * 4) / 4;
        d = std::floor(d * 2) / 2;
      }
      pool.push_back(scored(id++, static_cast<int>(label), e, d));
    }
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  return pool;
}

std::vector<std::int64_t> ids(const std::vector<CandidateSample>& v) {
  std::vector<std::int64_t> out;
  for (const auto& c : v) out.push_back(c.id);
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace

TEST(Quotas, PoolSizeExamples) {
  const std::vector<std::int64_t> n4{4};
  EXPECT_EQ(pool_sizes(class_quotas(n4, 0.5), 4), (std::vector<std::int64_t>{8}));
  const std::vector<std::int64_t> n{10, 20};
  EXPECT_EQ(pool_sizes(class_quotas(n, 0.5), 4), (std::vector<std::int64_t>{20, 40}));
  EXPECT_EQ(pool_sizes(class_quotas(n, 0.5), 1), (std::vector<std::int64_t>{5, 10}));
  const std::vector<std::int64_t> split{60, 40};
  EXPECT_EQ(class_quotas(split, 0.5), (std::vector<std::int64_t>{30, 20}));
  EXPECT_THROW(class_quotas(n, 0.0), ValidationError);
  EXPECT_THROW(pool_sizes(n, 0), ValidationError);
}

TEST(Quotas, ZeroQuotaWarns) {
  const std::vector<std::int64_t> n{100, 1};
  std::vector<std::string> warnings;
  EXPECT_EQ(class_quotas(n, 0.3, &warnings), (std::vector<std::int64_t>{30, 0}));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("quota 0"), std::string::npos);
}

TEST(EntropyFilter, Examples) {
  std::vector<CandidateSample> pool{scored(0, 0, 0.1, 1), scored(1, 0, 0.9, 1), scored(2, 0, 0.2, 1),
                                    scored(3, 0, 0.8, 1)};
  EXPECT_EQ(ids(entropy_filter(pool)), (std::vector<std::int64_t>{0, 2}));
  for (auto& c : pool) c.entropy = 0.5;
  EXPECT_EQ(ids(entropy_filter(pool)), (std::vector<std::int64_t>{0, 1}));
  for (const auto& c : entropy_filter(pool)) EXPECT_TRUE(c.passed_entropy);
}

TEST(EntropyFilter, ClassesFilteredIndependently) {
  // class 1 is uniformly more uncertain than class 0, yet keeps its own half
  std::vector<CandidateSample> pool{scored(0, 0, 0.1, 1), scored(1, 0, 0.2, 1), scored(2, 1, 0.8, 1),
                                    scored(3, 1, 0.9, 1)};
  EXPECT_EQ(ids(entropy_filter(pool)), (std::vector<std::int64_t>{0, 2}));
}

TEST(EntropyFilter, EmptyRequiredClassAndBadScores) {
  const std::vector<CandidateSample> pool{scored(0, 0, 0.1, 1), scored(1, 0, 0.2, 1)};
  const std::vector<int> required{0, 1};
  EXPECT_THROW(entropy_filter(pool, required), ValidationError);
  const std::vector<CandidateSample> nan_pool{scored(0, 0, std::nan(""), 1), scored(1, 0, 0.2, 1)};
  EXPECT_THROW(entropy_filter(nan_pool), ValidationError);
}

TEST(DistanceFilter, Examples) {
  const std::vector<CandidateSample> survivors{scored(0, 0, 0, 0.3), scored(1, 0, 0, 1.2), scored(2, 0, 0, 0.5),
                                               scored(3, 0, 0, 2.0)};
  const auto centroids = dummy_centroids(1);
  EXPECT_EQ(ids(distance_filter(survivors, centroids)), (std::vector<std::int64_t>{0, 2}));
  const std::vector<CandidateSample> single{scored(7, 0, 0, 0.1)};
  EXPECT_TRUE(distance_filter(single, centroids).empty());
  const std::vector<CandidateSample> other{scored(8, 3, 0, 0.1), scored(9, 3, 0, 0.2)};
  EXPECT_THROW(distance_filter(other, centroids), ValidationError);
}

TEST(ApplyFilters, QuarterOfPoolReachesQuota) {
  const std::vector<std::int64_t> n{60, 40};
  const auto pool = random_pool(pool_sizes(class_quotas(n, 0.5), 4), 1);
  const DatasetProfile profile{"two", 32, 32, 2, {"x", "y"}};
  SelectionReport base;
  base.ratio = 0.5;
  const auto out = apply_filters(pool, dummy_centroids(2), profile, n, base);
  EXPECT_EQ(out.selected.size(), 50u);
  EXPECT_EQ(out.report.classes[0].selected, 30);
  EXPECT_EQ(out.report.classes[1].selected, 20);
  EXPECT_EQ(out.report.classes[0].pool_size, 120);
  EXPECT_TRUE(out.report.warnings.empty());
}

TEST(ApplyFilters, ZeroQuotaClassContributesNothing) {
  const std::vector<std::int64_t> n{40, 1};
  std::vector<std::string> warnings;
  const auto quotas = class_quotas(n, 0.25, &warnings);
  const auto pool = random_pool(pool_sizes(quotas, 4), 2);
  SelectionReport base;
  base.ratio = 0.25;
  base.warnings = warnings;
  const auto out = apply_filters(pool, dummy_centroids(2), {"two", 32, 32, 2, {"x", "y"}}, n, base);
  EXPECT_EQ(out.report.classes[1].selected, 0);
  EXPECT_EQ(out.report.classes[0].selected, 10);
  EXPECT_FALSE(out.report.warnings.empty());
}

TEST(ApplyFilters, CardinalityDominanceAndSubsets) {
  const auto profile = four_class_profile();
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    // roughly 1000 candidates over 4 classes, odd and even pool sizes, ties on every other trial
    std::vector<std::int64_t> sizes;
    std::uniform_int_distribution<std::int64_t> s(150, 350);
    for (int i = 0; i < 4; ++i) sizes.push_back(s(rng));
    const auto pool = random_pool(sizes, rng(), trial % 2 == 1);
    SelectionReport base;
    base.ratio = 0.5;
    const auto out = apply_filters(pool, dummy_centroids(4), profile, sizes, base);

    const std::set<std::int64_t> x0(out.report.pool_ids.begin(), out.report.pool_ids.end());
    const std::set<std::int64_t> x1(out.report.intermediate_ids.begin(), out.report.intermediate_ids.end());
    const std::set<std::int64_t> x(out.report.selected_ids.begin(), out.report.selected_ids.end());
    EXPECT_TRUE(std::includes(x0.begin(), x0.end(), x1.begin(), x1.end()));
    EXPECT_TRUE(std::includes(x1.begin(), x1.end(), x.begin(), x.end()));

    std::map<std::int64_t, const CandidateSample*> by_id;
    for (const auto& c : out.pool) by_id[c.id] = &c;
    for (const auto& c : out.selected) EXPECT_EQ(c.assigned_label, by_id.at(c.id)->assigned_label);

    for (int label = 0; label < 4; ++label) {
      std::vector<const CandidateSample*> c0, c1, c;
      for (const auto& p : out.pool) {
        if (p.assigned_label != label) continue;
        c0.push_back(&p);
        if (x1.count(p.id)) c1.push_back(&p);
        if (x.count(p.id)) c.push_back(&p);
      }
      EXPECT_EQ(c1.size(), c0.size() / 2);
      EXPECT_EQ(c.size(), c1.size() / 2);
      double kept_e = 0, rejected_e = 1e9, kept_d = 0, rejected_d = 1e9;
      for (const auto* p : c0) (x1.count(p->id) ? kept_e = std::max(kept_e, p->entropy) : rejected_e = std::min(rejected_e, p->entropy));
      for (const auto* p : c1) (x.count(p->id) ? kept_d = std::max(kept_d, p->distance) : rejected_d = std::min(rejected_d, p->distance));
      EXPECT_LE(kept_e, rejected_e);
      EXPECT_LE(kept_d, rejected_d);
      // on ties the lower id wins
      for (const auto* kept : c0) {
        if (!x1.count(kept->id)) continue;
        for (const auto* rej : c0)
          if (!x1.count(rej->id) && rej->entropy == kept->entropy) EXPECT_LT(kept->id, rej->id);
      }
      for (const auto* p : c0) {
        EXPECT_EQ(p->passed_entropy, x1.count(p->id) == 1);
        EXPECT_EQ(p->passed_distance, x.count(p->id) == 1);
      }
    }
  }
}

TEST(ApplyFilters, ReportIsByteIdenticalAcrossRuns) {
  const auto profile = four_class_profile();
  const std::vector<std::int64_t> sizes{100, 80, 60, 10};
  SelectionReport base;
  base.ratio = 0.5;
  base.seed = 17;
  base.checkpoint = "gan_epoch_0042";
  const auto a = apply_filters(random_pool(pool_sizes(class_quotas(sizes, 0.5), 4), 9), dummy_centroids(4), profile, sizes, base);
  const auto b = apply_filters(random_pool(pool_sizes(class_quotas(sizes, 0.5), 4), 9), dummy_centroids(4), profile, sizes, base);
  EXPECT_EQ(a.report.serialize(), b.report.serialize());
  const auto j = nlohmann::json::parse(a.report.serialize());
  EXPECT_EQ(j["classes"].size(), 4u);
  EXPECT_EQ(j["selected_ids"].size(), a.selected.size());
}

TEST(Median, EvenAndOdd) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
  EXPECT_TRUE(std::isnan(median({})));
}

TEST(RatioSelection, SelectionsAreNestedAcrossRatios) {
  const std::vector<std::int64_t> sizes{50, 30};
  // intermediate set of a pool built for the largest ratio with multiplier 4
  const auto pool = random_pool(std::vector<std::int64_t>{200, 120}, 5);
  const auto intermediate = entropy_filter(pool);
  std::vector<std::int64_t> previous;
  for (double r : {0.1, 0.25, 0.4, 0.5, 0.7, 1.0}) {
    const auto sel = select_for_ratio(intermediate, sizes, r);
    ASSERT_TRUE(sel.feasible) << r;
    const auto current = ids(sel.selected);
    EXPECT_TRUE(std::includes(current.begin(), current.end(), previous.begin(), previous.end())) << r;
    EXPECT_EQ(static_cast<std::int64_t>(current.size()), sel.quotas[0] + sel.quotas[1]);
    previous = current;
  }
  EXPECT_FALSE(select_for_ratio(intermediate, sizes, 1.5).feasible);
  EXPECT_TRUE(select_for_ratio(intermediate, sizes, 1.5).selected.empty());
}

TEST(RatioSelection, DefaultRatioMatchesDistanceFilter) {
  const std::vector<std::int64_t> sizes{40, 24};
  const auto pool = random_pool(pool_sizes(class_quotas(sizes, 0.5), 4), 6);
  const auto intermediate = entropy_filter(pool);
  EXPECT_EQ(ids(select_for_ratio(intermediate, sizes, 0.5).selected),
            ids(distance_filter(intermediate, dummy_centroids(2))));
}

TEST(Writers, SelectionCsvAndFeatureExport) {
  histaug::testing::TempDir dir("selcsv");
  std::vector<CandidateSample> pool{scored(0, 0, 0.25, 1.5), scored(1, 1, 0.5, 0.75)};
  pool[0].passed_entropy = true;
  const DatasetProfile profile{"two", 8, 8, 1, {"warm", "cool"}};
  write_selection_csv(pool, profile, dir / "selection.csv");
  EXPECT_EQ(slurp(dir / "selection.csv"),
            "id,class,entropy,distance,passed_entropy,passed_distance\n0,warm,0.25,1.5,1,0\n1,cool,0.5,0.75,0,0\n");
  write_feature_export(pool, 5, dir / "features.csv");
  std::istringstream lines(slurp(dir / "features.csv"));
  std::string header, first;
  std::getline(lines, header);
  std::getline(lines, first);
  EXPECT_EQ(header, "id,label,entropy,distance,K");
  EXPECT_EQ(first, "0,0,0.25,1.5,5");
}

TEST(Writers, SelectedImagesRoundTrip) {
  histaug::testing::TempDir dir("selimg");
  const DatasetProfile profile{"two", 8, 4, 1, {"warm", "cool"}};
  std::vector<CandidateSample> selected{scored(3, 1, 0, 0), scored(5, 0, 0, 0), scored(9, 1, 0, 0)};
  for (auto& c : selected) c.image = torch::full({3, 8, 4}, 0.2 * (c.id % 4));
  write_selected_images(selected, profile, dir / "selected");
  EXPECT_TRUE(std::filesystem::exists(dir / "selected" / "cool" / "cand_000003.png"));
  const auto back = read_selected_images(dir / "selected", profile);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back.images.sizes(), (std::vector<int64_t>{3, 3, 8, 4}));
  EXPECT_EQ(back.labels.sum().item<int64_t>(), 2);
  const auto synthetic = to_synthetic(selected, 8, 4);
  EXPECT_EQ(synthetic.size(), 3u);
}

TEST(RunSelection, ReproducibleAndWritesArtifacts) {
  histaug::testing::TempDir dir("runsel");
  torch::manual_seed(1);
  const auto data = make_toy_dataset(6, 2, 1);
  ExperimentConfig config;
  config.seed = 5;
  config.selection.ratio = 0.5;
  config.selection.mc_runs = 2;
  config.selection.pool_multiplier = 4;
  config.classifier.blocks = {1, 1, 1, 1};
  config.classifier.width = 8;

  GanArchitecture arch;
  arch.stage_count = 2;
  arch.noise_dim = 8;
  arch.gen_width = 8;
  arch.disc_width = 8;
  Generator g(arch);
  DiscriminatorSet d(arch);
  save_checkpoint(dir / "gan_epoch_0001", 1, arch, "fp", g, d);
  const GanCheckpoint ckpt{1, 2, 2, "fp", dir / "gan_epoch_0001"};

  ResidualClassifier extractor(ExtractorArchitecture::from(data.profile(), config.classifier));
  const auto centroids = train_centroids(extractor, data, config);
  const auto a = run_selection(ckpt, data, extractor, centroids, config, dir / "a");
  const auto b = run_selection(ckpt, data, extractor, centroids, config, dir / "b");

  EXPECT_EQ(a.pool.size(), 24u);  // quotas 3 + 3, four times over
  EXPECT_EQ(a.intermediate.size(), 12u);
  EXPECT_EQ(a.selected.size(), 6u);
  EXPECT_EQ(slurp(dir / "a" / "selection_report.json"), slurp(dir / "b" / "selection_report.json"));
  EXPECT_EQ(slurp(dir / "a" / "selection.csv"), slurp(dir / "b" / "selection.csv"));
  for (const auto& c : a.pool) {
    EXPECT_TRUE(std::isfinite(c.entropy));
    EXPECT_GE(c.distance, 0.0);
  }
  EXPECT_EQ(read_selected_images(dir / "a" / "selected", data.profile()).size(), 6u);
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "features.csv"));
}

TEST(RunSelection, FailureStillWritesReport) {
  histaug::testing::TempDir dir("runfail");
  const auto data = make_toy_dataset(6, 2, 1);
  ExperimentConfig config;
  config.classifier.blocks = {1, 1, 1, 1};
  config.classifier.width = 8;
  ResidualClassifier extractor(ExtractorArchitecture::from(data.profile(), config.classifier));
  const GanCheckpoint missing{1, 2, 2, "fp", dir / "gan_epoch_0001"};
  EXPECT_ANY_THROW(run_selection(missing, data, extractor, {}, config, dir / "out"));
  const auto report = nlohmann::json::parse(slurp(dir / "out" / "selection_report.json"));
  EXPECT_TRUE(report["failed"].get<bool>());
}

TEST(ScoreCandidates, MissingCentroidIsRejected) {
  const auto data = make_toy_dataset(2, 1, 1);
  ExperimentConfig config;
  config.classifier.blocks = {1, 1, 1, 1};
  config.classifier.width = 8;
  ResidualClassifier extractor(ExtractorArchitecture::from(data.profile(), config.classifier));
  std::vector<CandidateSample> pool{scored(0, 1, 0, 0)};
  pool[0].image = torch::rand({3, 32, 32});
  const std::vector<ClassCentroid> only_zero{{0, {}}};
  EXPECT_THROW(score_candidates(pool, extractor, only_zero, 2, 1), ValidationError);
}

TEST(GeneratePool, GeometryMismatchIsRejected) {
  GanArchitecture arch;
  arch.stage_count = 2;
  arch.noise_dim = 8;
  arch.gen_width = 8;
  arch.disc_width = 8;
  LoadedGan gan{arch, Generator(arch), DiscriminatorSet(arch), 1, ""};
  const std::vector<std::int64_t> sizes{2, 2, 2, 2};
  EXPECT_THROW(generate_pool(gan, four_class_profile(), sizes, 1), ValidationError);
  const std::vector<std::int64_t> two{3, 2};
  const auto pool = generate_pool(gan, builtin_profile("toy"), two, 1);
  ASSERT_EQ(pool.size(), 5u);
  EXPECT_EQ(pool[4].id, 4);
  EXPECT_EQ(pool[4].assigned_label, 1);
  const auto again = generate_pool(gan, builtin_profile("toy"), two, 1);
  EXPECT_TRUE(torch::equal(pool[2].image, again[2].image));
}
