#include "histaug/config.hpp"

#include <fstream>

#include "histaug/errors.hpp"
#include "histaug/seed.hpp"

namespace histaug {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, root, profile, train_ratio, val_ratio,
                                                test_ratio, fraction, resplit)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GanConfig, stage_count, noise_dim, batch_size,
                                                epochs, warmup_epochs, max_steps, learning_rate,
                                                gp_weight, beta1, beta2, critic_iters, gen_width,
                                                disc_width, fid_samples)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SelectionConfig, ratio, mc_runs, ema_alpha,
                                                pool_multiplier, centroid_dropout)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ClassifierConfig, epochs, learning_rate, runs,
                                                batch_size, blocks, width, dropout, jitter)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HarnessConfig, regimes, sweep_pools, sweep_ratios,
                                                tsne_perplexity, tsne_iterations, tsne_max_points,
                                                attention_maps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, seed, data, gan, selection,
                                                classifier, harness)

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError("invalid config: " + what);
}

}  // namespace

void ExperimentConfig::validate() const {
  require(selection.ratio > 0.0, "selection.ratio must be > 0");
  require(selection.pool_multiplier >= 1, "selection.pool_multiplier must be >= 1");
  require(selection.mc_runs >= 1, "selection.mc_runs must be >= 1");
  require(selection.ema_alpha >= 0.0 && selection.ema_alpha <= 1.0,
          "selection.ema_alpha must lie in [0,1]");
  require(gan.stage_count >= 1, "gan.stage_count must be >= 1");
  require(gan.noise_dim >= 1, "gan.noise_dim must be >= 1");
  require(gan.batch_size >= 2, "gan.batch_size must be >= 2");
  require(gan.epochs >= 1, "gan.epochs must be >= 1");
  require(gan.warmup_epochs >= 0, "gan.warmup_epochs must be >= 0");
  require(gan.max_steps >= 0, "gan.max_steps must be >= 0");
  require(gan.learning_rate > 0.0, "gan.learning_rate must be > 0");
  require(gan.gp_weight >= 0.0, "gan.gp_weight must be >= 0");
  require(gan.critic_iters >= 1, "gan.critic_iters must be >= 1");
  require(gan.gen_width >= 1 && gan.disc_width >= 1, "gan widths must be >= 1");
  require(gan.fid_samples >= 2, "gan.fid_samples must be >= 2");
  require(classifier.epochs >= 1, "classifier.epochs must be >= 1");
  require(classifier.learning_rate > 0.0, "classifier.learning_rate must be > 0");
  require(classifier.runs >= 1, "classifier.runs must be >= 1");
  require(classifier.batch_size >= 1, "classifier.batch_size must be >= 1");
  require(classifier.blocks.size() == 4, "classifier.blocks must list 4 residual stages");
  for (int b : classifier.blocks) require(b >= 1, "classifier.blocks entries must be >= 1");
  require(classifier.width >= 1, "classifier.width must be >= 1");
  require(classifier.dropout >= 0.0 && classifier.dropout < 1.0,
          "classifier.dropout must lie in [0,1)");
  require(data.fraction > 0.0 && data.fraction <= 1.0, "data.fraction must lie in (0,1]");
  require(data.train_ratio > 0 && data.val_ratio > 0 && data.test_ratio > 0,
          "data split ratios must be positive");
  for (int p : harness.sweep_pools) require(p >= 1, "harness.sweep_pools entries must be >= 1");
  for (double r : harness.sweep_ratios) require(r > 0.0, "harness.sweep_ratios must be > 0");
  for (const auto& r : harness.regimes) {
    require(r == "baseline" || r == "traditional" || r == "gan_aug" || r == "selective",
            "unknown regime '" + r + "'");
  }
}

nlohmann::json to_json(const ExperimentConfig& config) {
  nlohmann::json j = config;
  return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  try {
    auto config = j.get<ExperimentConfig>();
    config.validate();
    return config;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const ExperimentConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write config " + path.string());
  out << to_json(config).dump(2) << '\n';
}

void apply_override(nlohmann::json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("override must look like key.path=value, got '" + assignment + "'");
  }
  std::string pointer = "/" + assignment.substr(0, eq);
  for (auto& ch : pointer) {
    if (ch == '.') ch = '/';
  }
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  tree[nlohmann::json::json_pointer(pointer)] = value;
}

std::string config_fingerprint(const nlohmann::json& subtree) {
  return fingerprint_hex(subtree.dump());
}

}  // namespace histaug
