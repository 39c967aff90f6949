#include "histaug/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "histaug/errors.hpp"
#include "histaug/plots.hpp"
#include "histaug/seed.hpp"
#include "histaug/tsne.hpp"

namespace fs = std::filesystem;

namespace histaug {

namespace {

void warn(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

LoadedGan load_best_gan(const RunPaths& paths) { return load_checkpoint(read_best_checkpoint(paths).path); }

struct SelectionCsvRow {
  std::int64_t id;
  bool passed_entropy, passed_distance;
};

std::vector<SelectionCsvRow> read_selection_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("missing " + path.string());
  std::string line;
  std::getline(f, line);
  std::vector<SelectionCsvRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string field; std::getline(ss, field, ',');) fields.push_back(field);
    if (fields.size() != 6) throw FormatError("bad selection row: " + line);
    rows.push_back({std::stoll(fields[0]), fields[4] == "1", fields[5] == "1"});
  }
  return rows;
}

}  // namespace

fs::path RunPaths::classifier(Regime regime, int round) const {
  char name[32];
  std::snprintf(name, sizeof(name), "round_%02d.pt", round);
  return classifiers() / std::string(to_string(regime)) / name;
}

RunIndex::RunIndex(fs::path path) : path_(std::move(path)) { reload(); }

void RunIndex::reload() {
  tree_ = nlohmann::json::object();
  if (fs::is_regular_file(path_)) {
    std::ifstream f(path_);
    try {
      tree_ = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception&) {
      tree_ = nlohmann::json::object();
    }
  }
  if (!tree_.is_object()) tree_ = nlohmann::json::object();
  if (!tree_.contains("stages")) tree_["stages"] = nlohmann::json::object();
}

void RunIndex::write() const {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  std::ofstream f(path_);
  f << tree_.dump(2) << '\n';
}

void RunIndex::set(const std::string& key, const nlohmann::json& value) {
  reload();
  tree_[key] = value;
  write();
}

void RunIndex::record(const std::string& stage, const std::string& status, const std::string& message,
                      double seconds) {
  reload();
  tree_["stages"][stage] = {{"status", status}, {"message", message}, {"seconds", seconds}};
  write();
}

bool RunIndex::ok(const std::string& stage) const {
  const auto& s = tree_["stages"];
  return s.contains(stage) && s[stage]["status"] == "ok";
}

const std::vector<std::string>& pipeline_stages() {
  static const std::vector<std::string> stages{"prepare-data", "train-gan",        "select-model",
                                               "generate",     "select-images",    "train-classifier",
                                               "evaluate",     "plot"};
  return stages;
}

std::vector<Regime> parse_regimes(const std::vector<std::string>& names) {
  std::vector<Regime> out;
  for (const auto& n : names) out.push_back(parse_regime(n));
  return out;
}

PatchDataset prepare_data(const ExperimentConfig& config, const RunPaths& paths) {
  if (config.data.root.empty()) throw ValidationError("data.root is not set");
  auto dataset = load_dataset(config.data.root, config.data.profile);
  if (config.data.resplit) {
    dataset = split_by_patient(dataset, {config.data.train_ratio, config.data.val_ratio, config.data.test_ratio},
                               mix_seed(config.seed, 0x5b1));
  }
  if (config.data.fraction < 1.0) dataset = subset_fraction(dataset, config.data.fraction, mix_seed(config.seed, 0xf4a));
  write_manifest(dataset, paths.manifest());
  return dataset;
}

PatchDataset load_prepared(const ExperimentConfig& config, const RunPaths& paths) {
  if (!fs::is_regular_file(paths.manifest())) {
    throw FormatError("no prepared data in " + paths.root.string() + "; run prepare-data first");
  }
  return load_manifest(paths.manifest(), builtin_profile(config.data.profile));
}

GanRun stage_train_gan(const ExperimentConfig& config, const RunPaths& paths) {
  const auto dataset = load_prepared(config, paths);
  return train_gan(dataset, config, paths.gan_dir(), [](const EpochLoss& l) {
    std::cerr << "gan epoch " << l.epoch << " critic " << l.critic_loss << " generator " << l.gen_loss << '\n';
  });
}

TrainedClassifier load_or_train_extractor(const PatchDataset& dataset, const ExperimentConfig& config,
                                          const RunPaths& paths) {
  if (fs::is_regular_file(paths.extractor())) {
    auto trained = load_classifier(paths.extractor());
    if (trained.arch.to_json() == ExtractorArchitecture::from(dataset.profile(), config.classifier).to_json()) {
      return trained;
    }
    warn("extractor architecture differs from config; retraining");
  }
  auto trained = train_extractor(dataset, config);
  save_classifier(paths.extractor(), trained);
  return trained;
}

GanCheckpoint read_best_checkpoint(const RunPaths& paths) {
  std::ifstream f(paths.best_checkpoint());
  if (!f) throw FormatError("no selected checkpoint; run select-model first");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad best_checkpoint.json: ") + e.what());
  }
  for (const auto& c : list_checkpoints(paths.gan_dir())) {
    if (c.epoch == j.at("epoch").get<int>()) return c;
  }
  throw FormatError("selected checkpoint is missing from " + paths.gan_dir().string());
}

CheckpointSelection stage_select_model(const ExperimentConfig& config, const RunPaths& paths) {
  const auto dataset = load_prepared(config, paths);
  const auto checkpoints = list_checkpoints(paths.gan_dir());
  if (checkpoints.empty()) throw FormatError("no GAN checkpoints in " + paths.gan_dir().string());
  auto extractor = load_or_train_extractor(dataset, config, paths);
  auto selection = select_checkpoint(checkpoints, dataset, extractor.model, config);
  write_fid_series(selection.series, paths.fid_series());
  std::ofstream f(paths.best_checkpoint());
  f << nlohmann::json{{"epoch", selection.best.epoch},
                      {"file", selection.best.path.filename().string()},
                      {"smoothed_fid", selection.series.smoothed[selection.series.best_index()]}}
           .dump(2)
    << '\n';
  RunIndex(paths.index()).set("best_epoch", selection.best.epoch);
  return selection;
}

std::size_t stage_generate(const ExperimentConfig& config, const RunPaths& paths) {
  const auto dataset = load_prepared(config, paths);
  auto gan = load_best_gan(paths);
  const auto quotas = class_quotas(dataset.class_sizes(Split::train), config.selection.ratio);
  const auto pool = generate_pool(gan, dataset.profile(), quotas, mix_seed(config.seed, 0x6e4));
  fs::remove_all(paths.generated());
  write_selected_images(pool, dataset.profile(), paths.generated());
  return pool.size();
}

SelectionOutcome stage_select_images(const ExperimentConfig& config, const RunPaths& paths) {
  const auto dataset = load_prepared(config, paths);
  auto extractor = load_or_train_extractor(dataset, config, paths);
  const auto centroids = train_centroids(extractor.model, dataset, config);
  fs::remove_all(paths.selection() / "selected");
  return run_selection(read_best_checkpoint(paths), dataset, extractor.model, centroids, config,
                       paths.selection());
}

void stage_train_classifiers(const ExperimentConfig& config, const RunPaths& paths,
                             const std::vector<Regime>& regimes) {
  const auto dataset = load_prepared(config, paths);
  for (auto regime : regimes) {
    SyntheticSet extra;
    if (regime == Regime::gan_aug) extra = read_selected_images(paths.generated(), dataset.profile());
    if (regime == Regime::selective) extra = read_selected_images(paths.selection() / "selected", dataset.profile());
    if (uses_synthetic(regime) && extra.size() == 0) {
      throw ValidationError("no synthetic images available for regime " + std::string(to_string(regime)));
    }
    for (int round = 0; round < config.classifier.runs; ++round) {
      const auto seed = round_seed(config.seed, round);
      auto trained = train_classifier(dataset, extra, regime, config, seed);
      save_classifier(paths.classifier(regime, round), trained);
      std::cerr << to_string(regime) << " round " << round << " val accuracy " << trained.val_accuracy << '\n';
    }
  }
}

std::vector<MetricsReport> stage_evaluate(const ExperimentConfig& config, const RunPaths& paths,
                                          const std::vector<Regime>& regimes) {
  const auto dataset = load_prepared(config, paths);
  std::vector<MetricsReport> reports;
  for (auto regime : regimes) {
    std::vector<RunMetrics> runs;
    std::vector<std::string> warnings;
    for (int round = 0; round < config.classifier.runs; ++round) {
      auto trained = load_classifier(paths.classifier(regime, round));
      const auto m = evaluate(trained.model, dataset);
      warnings.insert(warnings.end(), m.warnings.begin(), m.warnings.end());
      runs.push_back({round, round_seed(config.seed, round), m.accuracy, m.auc, m.sensitivity, m.specificity});
    }
    auto report = aggregate(regime, std::move(runs));
    report.warnings = std::move(warnings);
    for (const auto& w : std::set<std::string>(report.warnings.begin(), report.warnings.end())) warn(w);
    reports.push_back(std::move(report));
  }
  write_results(reports, paths.results());
  write_summary(reports, paths.summary());
  return reports;
}

std::vector<fs::path> stage_plot(const ExperimentConfig& config, const RunPaths& paths) {
  std::vector<fs::path> written;
  const auto dir = paths.plots();
  fs::create_directories(dir);

  if (fs::is_regular_file(paths.fid_series())) {
    const auto series = read_fid_series(paths.fid_series(), config.selection.ema_alpha);
    write_plot(plot_fid_curve(series), dir / "fid_curve.png");
    written.push_back(dir / "fid_curve.png");
  } else {
    warn("fid_series.csv missing; FID curve skipped");
  }

  const auto selection_csv = paths.selection() / "selection.csv";
  if (fs::is_regular_file(selection_csv) && fs::is_regular_file(paths.best_checkpoint()) &&
      fs::is_regular_file(paths.extractor())) {
    const auto dataset = load_prepared(config, paths);
    auto extractor = load_classifier(paths.extractor());
    auto gan = load_best_gan(paths);
    const auto quotas = class_quotas(dataset.class_sizes(Split::train), config.selection.ratio);
    const auto pool = generate_pool(gan, dataset.profile(), pool_sizes(quotas, config.selection.pool_multiplier),
                                    selection_pool_seed(config));
    const auto rows = read_selection_csv(selection_csv);
    if (rows.size() != pool.size()) throw FormatError("selection.csv does not match the regenerated pool");

    std::vector<torch::Tensor> images;
    std::vector<int> groups;
    const auto real = dataset.images(Split::train);
    for (std::int64_t i = 0; i < real.size(0); ++i) {
      images.push_back(real[i]);
      groups.push_back(0);
    }
    for (std::size_t i = 0; i < pool.size(); ++i) {
      images.push_back(pool[i].image);
      groups.push_back(rows[i].passed_distance ? 1 : 2);
    }
    // deterministic thinning down to the configured number of points
    const auto cap = static_cast<std::size_t>(config.harness.tsne_max_points);
    if (images.size() > cap) {
      std::vector<std::size_t> order(images.size());
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(mix_seed(config.seed, 0x75e));
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(cap);
      std::sort(order.begin(), order.end());
      std::vector<torch::Tensor> kept_images;
      std::vector<int> kept_groups;
      for (auto i : order) {
        kept_images.push_back(images[i]);
        kept_groups.push_back(groups[i]);
      }
      images = std::move(kept_images);
      groups = std::move(kept_groups);
    }
    const auto features = to_eigen(penultimate_features(extractor.model, torch::stack(images)));
    TsneOptions options;
    options.perplexity = config.harness.tsne_perplexity;
    options.iterations = config.harness.tsne_iterations;
    options.seed = mix_seed(config.seed, 0x75f);
    const auto embedding = tsne(features, options);
    write_plot(plot_scatter(embedding, groups, {"real", "selected", "rejected"},
                            {cv::Scalar(150, 150, 150), cv::Scalar(60, 170, 40), cv::Scalar(40, 40, 220)}),
               dir / "tsne.png");
    written.push_back(dir / "tsne.png");
  } else {
    warn("selection artifacts missing; t-SNE plot skipped");
  }

  if (fs::is_regular_file(paths.best_checkpoint())) {
    auto gan = load_best_gan(paths);
    torch::NoGradGuard no_grad;
    gan.generator->eval();
    const int n = config.harness.attention_maps;
    std::vector<torch::Tensor> z;
    std::vector<std::int64_t> labels;
    for (int i = 0; i < n; ++i) {
      z.push_back(seeded_noise(mix_seed(config.seed, 0xa77, i), gan.arch.noise_dim));
      labels.push_back(i % gan.arch.class_count);
    }
    if (n > 0) {
      const auto pyramid = gan.generator->forward(torch::stack(z), torch::tensor(labels));
      const auto images = pyramid.images.back().add(1.0).div(2.0).clamp(0.0, 1.0);
      for (int i = 0; i < n; ++i) {
        const auto mass = attention_mass(pyramid.attention[i], pyramid.attention_height, pyramid.attention_width);
        char name[32];
        std::snprintf(name, sizeof(name), "attention_%02d.png", i);
        cv::Mat overlay = attention_overlay(images[i], mass);
        const int scale = std::max(1, 256 / std::max(overlay.rows, overlay.cols));
        cv::resize(overlay, overlay, {}, scale, scale, cv::INTER_NEAREST);
        write_plot(overlay, dir / name);
        written.push_back(dir / name);
      }
    }
  } else {
    warn("no selected checkpoint; attention overlays skipped");
  }
  return written;
}

std::vector<AblationCell> sweep_ablation(const ExperimentConfig& config, const RunPaths& paths,
                                         const std::vector<int>& pools, const std::vector<double>& ratios,
                                         bool train) {
  const auto dataset = load_prepared(config, paths);
  auto extractor = load_or_train_extractor(dataset, config, paths);
  const auto centroids = train_centroids(extractor.model, dataset, config);
  auto gan = load_best_gan(paths);
  const auto sizes = dataset.class_sizes(Split::train);

  std::vector<AblationCell> cells;
  for (int multiplier : pools) {
    std::vector<std::int64_t> pool_size;
    for (auto n : sizes) pool_size.push_back(n * multiplier);
    auto pool = generate_pool(gan, dataset.profile(), pool_size, mix_seed(config.seed, 0xab1, multiplier));
    score_candidates(pool, extractor.model, centroids, config.selection.mc_runs,
                     mix_seed(config.seed, 0xab2, multiplier));
    const auto intermediate = entropy_filter(pool);
    for (double ratio : ratios) {
      AblationCell cell;
      cell.pool_multiplier = multiplier;
      cell.ratio = ratio;
      const auto pick = select_for_ratio(intermediate, sizes, ratio);
      cell.feasible = pick.feasible;
      cell.selected = static_cast<std::int64_t>(pick.selected.size());
      for (const auto& c : pick.selected) cell.selected_ids.push_back(c.id);
      cell.metrics.regime = Regime::selective;
      if (pick.feasible && train && !pick.selected.empty()) {
        const auto extra = to_synthetic(pick.selected, dataset.profile().height, dataset.profile().width);
        std::vector<RunMetrics> runs;
        for (int round = 0; round < config.classifier.runs; ++round) {
          const auto seed = round_seed(config.seed, round);
          auto trained = train_classifier(dataset, extra, Regime::selective, config, seed);
          const auto m = evaluate(trained.model, dataset);
          runs.push_back({round, seed, m.accuracy, m.auc, m.sensitivity, m.specificity});
        }
        cell.metrics = aggregate(Regime::selective, std::move(runs));
      }
      std::cerr << "ablation pool " << multiplier << "N ratio " << ratio
                << (cell.feasible ? "" : " infeasible") << '\n';
      cells.push_back(std::move(cell));
    }
  }

  std::ofstream f(paths.ablation());
  if (!f) throw FormatError("cannot write " + paths.ablation().string());
  f << "pool_multiplier,ratio,feasible,selected,runs,accuracy_mean,accuracy_std,auc_mean,auc_std,"
       "sensitivity_mean,sensitivity_std,specificity_mean,specificity_std,is_default_ratio\n"
    << std::setprecision(17);
  for (const auto& c : cells) {
    f << c.pool_multiplier << ',' << c.ratio << ',' << (c.feasible ? 1 : 0) << ',' << c.selected << ','
      << c.metrics.runs.size();
    for (const auto* s : {&c.metrics.accuracy, &c.metrics.auc, &c.metrics.sensitivity, &c.metrics.specificity}) {
      f << ',' << s->mean << ',' << s->std;
    }
    f << ',' << (std::abs(c.ratio - 0.5) < 1e-12 ? 1 : 0) << '\n';
  }
  return cells;
}

bool run_all(const ExperimentConfig& config, const RunPaths& paths) {
  fs::create_directories(paths.root);
  save_config(config, paths.config());
  RunIndex index(paths.index());
  const auto regimes = parse_regimes(config.harness.regimes);
  const bool need_generated = std::find(regimes.begin(), regimes.end(), Regime::gan_aug) != regimes.end();
  const bool need_selected = std::find(regimes.begin(), regimes.end(), Regime::selective) != regimes.end();

  const std::vector<std::pair<std::string, std::function<std::string()>>> stages{
      {"prepare-data", [&] { return std::to_string(prepare_data(config, paths).size()) + " patches"; }},
      {"train-gan",
       [&] {
         const auto run = stage_train_gan(config, paths);
         for (const auto& l : run.losses) {
           if (!std::isfinite(l.critic_loss) || !std::isfinite(l.gen_loss)) {
             throw NumericalError("non-finite GAN loss at epoch " + std::to_string(l.epoch));
           }
         }
         return std::to_string(run.steps) + " steps, " + std::to_string(run.checkpoints.size()) + " checkpoints";
       }},
      {"select-model",
       [&] { return "epoch " + std::to_string(stage_select_model(config, paths).best.epoch); }},
      {"generate",
       [&] { return need_generated ? std::to_string(stage_generate(config, paths)) + " images" : "not needed"; }},
      {"select-images",
       [&] {
         return need_selected ? std::to_string(stage_select_images(config, paths).selected.size()) + " images"
                              : "not needed";
       }},
      {"train-classifier", [&] { stage_train_classifiers(config, paths, regimes); return std::string("done"); }},
      {"evaluate",
       [&] {
         std::string message;
         for (const auto& r : stage_evaluate(config, paths, regimes)) {
           message += std::string(to_string(r.regime)) + " " + std::to_string(r.accuracy.mean) + " ";
         }
         return message;
       }},
      {"plot", [&] { return std::to_string(stage_plot(config, paths).size()) + " plots"; }},
  };

  bool failed = false;
  for (const auto& [name, body] : stages) {
    if (failed) {
      index.record(name, "skipped", "an earlier stage failed", 0.0);
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    try {
      std::cerr << "== " << name << '\n';
      const auto message = body();
      const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
      index.record(name, "ok", message, took.count());
    } catch (const std::exception& e) {
      const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
      index.record(name, "failed", e.what(), took.count());
      std::cerr << "error: stage " << name << " failed: " << e.what() << '\n';
      failed = true;
    }
  }
  return !failed;
}

}  // namespace histaug
