#include <chrono>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "histaug/config.hpp"
#include "histaug/errors.hpp"
#include "histaug/pipeline.hpp"
#include "histaug/seed.hpp"

namespace fs = std::filesystem;
using namespace histaug;

namespace {

struct Globals {
  std::string config_path;
  std::int64_t seed = -1;
  std::string out = "runs/default";
  std::vector<std::string> overrides;
};

ExperimentConfig resolve_config(const Globals& g) {
  nlohmann::json tree = to_json(ExperimentConfig{});
  fs::path source;
  if (!g.config_path.empty()) {
    source = g.config_path;
  } else if (fs::is_regular_file(fs::path(g.out) / "config.json")) {
    source = fs::path(g.out) / "config.json";
  }
  if (!source.empty()) tree = to_json(load_config(source));
  for (const auto& o : g.overrides) apply_override(tree, o);
  if (g.seed >= 0) tree["seed"] = static_cast<std::uint64_t>(g.seed);
  return config_from_json(tree);
}

int run_stage(const std::string& name, const ExperimentConfig& config, const RunPaths& paths,
              const std::function<std::string()>& body) {
  fs::create_directories(paths.root);
  save_config(config, paths.config());
  RunIndex index(paths.index());
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto message = body();
    const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
    index.record(name, "ok", message, took.count());
    std::cout << name << ": " << message << '\n';
    return 0;
  } catch (const std::exception& e) {
    const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
    index.record(name, "failed", e.what(), took.count());
    throw;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective synthetic augmentation for histopathology patch classification"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed (overrides the config)");
  app.add_option("--out", g.out, "run directory")->capture_default_str();
  app.add_option("--set", g.overrides, "config override such as gan.epochs=20 (repeatable)");

  auto* prepare = app.add_subcommand("prepare-data", "split the dataset by patient and write the run manifest");
  int toy_per_class = 0, toy_patients = 10;
  std::string data_root;
  prepare->add_option("--data", data_root, "dataset directory (overrides data.root)");
  prepare->add_option("--make-toy", toy_per_class, "first write a two-class toy dataset with this many images per class");
  prepare->add_option("--toy-patients", toy_patients, "patients in the toy dataset")->capture_default_str();

  auto* train_gan_cmd = app.add_subcommand("train-gan", "train the conditional multi-stage GAN");
  auto* select_model = app.add_subcommand("select-model", "score checkpoints by smoothed FID and keep the best");
  auto* generate = app.add_subcommand("generate", "write unfiltered synthetic images for the gan_aug regime");
  auto* select_images = app.add_subcommand("select-images", "over-generate, filter by entropy and centroid distance");

  std::vector<std::string> regimes;
  auto* train_cls = app.add_subcommand("train-classifier", "train classifiers for each regime");
  train_cls->add_option("--regime", regimes, "regimes (default: harness.regimes)");
  auto* evaluate_cmd = app.add_subcommand("evaluate", "evaluate trained classifiers on the test split");
  evaluate_cmd->add_option("--regime", regimes, "regimes (default: harness.regimes)");

  std::vector<int> pools;
  std::vector<double> ratios;
  bool no_train = false;
  auto* sweep = app.add_subcommand("sweep", "pool size x augmentation ratio ablation");
  sweep->add_option("--pools", pools, "pool multipliers (default: harness.sweep_pools)");
  sweep->add_option("--ratios", ratios, "ratios (default: harness.sweep_ratios)");
  sweep->add_flag("--no-train", no_train, "only compute the selections");

  auto* plot = app.add_subcommand("plot", "FID curve, t-SNE scatter and attention overlays");
  auto* run_all_cmd = app.add_subcommand("run-all", "every stage in order");

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed() && !data_root.empty()) g.overrides.push_back("data.root=\"" + data_root + "\"");
    auto config = resolve_config(g);
    const RunPaths paths{g.out};
    const auto regime_list = parse_regimes(regimes.empty() ? config.harness.regimes : regimes);

    if (prepare->parsed()) {
      return run_stage("prepare-data", config, paths, [&] {
        if (toy_per_class > 0) {
          if (config.data.root.empty()) config.data.root = (paths.root / "toy_data").string();
          if (config.data.profile != "toy") throw ValidationError("--make-toy needs data.profile=toy");
          const auto profile = builtin_profile("toy");
          save_dataset(make_toy_dataset(toy_per_class, toy_patients, mix_seed(config.seed, 0x70f), profile.height,
                                        profile.width),
                       config.data.root);
          save_config(config, paths.config());
        }
        const auto dataset = prepare_data(config, paths);
        return std::to_string(dataset.count(Split::train)) + " train, " + std::to_string(dataset.count(Split::val)) +
               " val, " + std::to_string(dataset.count(Split::test)) + " test patches";
      });
    }
    if (train_gan_cmd->parsed()) {
      return run_stage("train-gan", config, paths, [&] {
        const auto run = stage_train_gan(config, paths);
        return std::to_string(run.steps) + " steps, " + std::to_string(run.checkpoints.size()) + " checkpoints";
      });
    }
    if (select_model->parsed()) {
      return run_stage("select-model", config, paths, [&] {
        const auto s = stage_select_model(config, paths);
        return "best epoch " + std::to_string(s.best.epoch);
      });
    }
    if (generate->parsed()) {
      return run_stage("generate", config, paths,
                       [&] { return std::to_string(stage_generate(config, paths)) + " images"; });
    }
    if (select_images->parsed()) {
      return run_stage("select-images", config, paths, [&] {
        const auto out = stage_select_images(config, paths);
        return std::to_string(out.selected.size()) + " of " + std::to_string(out.pool.size()) + " candidates selected";
      });
    }
    if (train_cls->parsed()) {
      return run_stage("train-classifier", config, paths, [&] {
        stage_train_classifiers(config, paths, regime_list);
        return std::to_string(regime_list.size() * config.classifier.runs) + " classifiers";
      });
    }
    if (evaluate_cmd->parsed()) {
      return run_stage("evaluate", config, paths, [&] {
        std::string message;
        for (const auto& r : stage_evaluate(config, paths, regime_list)) {
          message += "\n  " + std::string(to_string(r.regime)) + " accuracy " + std::to_string(r.accuracy.mean) +
                     " +- " + std::to_string(r.accuracy.std);
        }
        return message;
      });
    }
    if (sweep->parsed()) {
      return run_stage("sweep", config, paths, [&] {
        const auto cells = sweep_ablation(config, paths, pools.empty() ? config.harness.sweep_pools : pools,
                                          ratios.empty() ? config.harness.sweep_ratios : ratios, !no_train);
        return std::to_string(cells.size()) + " cells written to " + paths.ablation().string();
      });
    }
    if (plot->parsed()) {
      return run_stage("plot", config, paths,
                       [&] { return std::to_string(stage_plot(config, paths).size()) + " plots"; });
    }
    if (run_all_cmd->parsed()) {
      const bool ok = run_all(config, paths);
      std::cout << (ok ? "run-all completed" : "run-all failed; see run_index.json") << '\n';
      return ok ? 0 : 1;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
