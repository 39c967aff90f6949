#include "histaug/classifier.hpp"

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "histaug/errors.hpp"
#include "histaug/seed.hpp"

namespace fs = std::filesystem;

namespace histaug {

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::baseline: return "baseline";
    case Regime::traditional: return "traditional";
    case Regime::gan_aug: return "gan_aug";
    case Regime::selective: return "selective";
  }
  return "baseline";
}

Regime parse_regime(std::string_view text) {
  for (auto r : {Regime::baseline, Regime::traditional, Regime::gan_aug, Regime::selective}) {
    if (to_string(r) == text) return r;
  }
  throw ValidationError("unknown regime '" + std::string(text) + "'");
}

bool uses_synthetic(Regime regime) { return regime == Regime::gan_aug || regime == Regime::selective; }

JitterParams sample_jitter(double amplitude, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> factor(1.0 - amplitude, 1.0 + amplitude);
  std::bernoulli_distribution coin(0.5);
  JitterParams p;
  p.flip = coin(rng);
  p.brightness = factor(rng);
  p.contrast = factor(rng);
  p.saturation = factor(rng);
  return p;
}

torch::Tensor apply_jitter(const torch::Tensor& image, const JitterParams& params) {
  const bool batched = image.dim() == 4;
  auto x = batched ? image : image.unsqueeze(0);
  if (params.flip) x = x.flip({3});
  x = (x * params.brightness).clamp(0.0, 1.0);
  const auto rgb = torch::tensor({0.299, 0.587, 0.114}, x.options()).view({1, 3, 1, 1});
  const auto gray = (x * rgb).sum(1, true);
  x = ((x - gray.mean({1, 2, 3}, true)) * params.contrast + gray.mean({1, 2, 3}, true)).clamp(0.0, 1.0);
  const auto gray2 = (x * rgb).sum(1, true);
  x = ((x - gray2) * params.saturation + gray2).clamp(0.0, 1.0);
  return batched ? x : x.squeeze(0);
}

torch::Tensor traditional_augment(const torch::Tensor& image, double amplitude, std::mt19937_64& rng) {
  return apply_jitter(image, sample_jitter(amplitude, rng));
}

TrainingSet build_training_set(const PatchDataset& dataset, const SyntheticSet& extra, Regime regime) {
  const bool has_extra = extra.size() > 0;
  if (has_extra && !uses_synthetic(regime)) {
    throw ValidationError("regime " + std::string(to_string(regime)) + " takes no synthetic images");
  }
  if (!has_extra && uses_synthetic(regime)) {
    throw ValidationError("regime " + std::string(to_string(regime)) + " needs synthetic images");
  }
  TrainingSet set;
  set.images = dataset.images(Split::train);
  set.labels = dataset.labels(Split::train);
  set.real_count = set.images.size(0);
  if (has_extra) {
    if (extra.images.size(2) != set.images.size(2) || extra.images.size(3) != set.images.size(3)) {
      throw ValidationError("synthetic images do not match the dataset geometry");
    }
    set.images = torch::cat({set.images, extra.images.to(set.images.dtype())});
    set.labels = torch::cat({set.labels, extra.labels.to(torch::kInt64)});
    set.synthetic_count = extra.images.size(0);
  }
  return set;
}

std::string classifier_fingerprint(const ExperimentConfig& config) {
  auto j = to_json(config);
  return config_fingerprint({{"classifier", j["classifier"]}, {"profile", j["data"]["profile"]}});
}

std::uint64_t round_seed(std::uint64_t seed, int round) {
  return mix_seed(seed, 0xc1a, static_cast<std::uint64_t>(round));
}

TrainedClassifier train_classifier(const PatchDataset& dataset, const SyntheticSet& extra,
                                   Regime regime, const ExperimentConfig& config, std::uint64_t seed) {
  const auto set = build_training_set(dataset, extra, regime);
  const auto arch = ExtractorArchitecture::from(dataset.profile(), config.classifier);
  BatchAugment augment;
  if (regime == Regime::traditional) {
    const double amplitude = config.classifier.jitter;
    augment = [amplitude](const torch::Tensor& batch, std::mt19937_64& rng) {
      std::vector<torch::Tensor> out;
      for (std::int64_t i = 0; i < batch.size(0); ++i) out.push_back(traditional_augment(batch[i], amplitude, rng));
      return torch::stack(out);
    };
  }
  return train_residual_classifier(arch, config.classifier, set.images, set.labels,
                                   dataset.images(Split::val), dataset.labels(Split::val), seed, augment);
}

ClassificationMetrics evaluate(ResidualClassifier& model, const PatchDataset& dataset) {
  if (dataset.count(Split::test) == 0) throw ValidationError("evaluation needs a non-empty test split");
  return classification_metrics(predict_proba(model, dataset.images(Split::test)),
                                dataset.labels(Split::test));
}

MetricsReport aggregate(Regime regime, std::vector<RunMetrics> runs) {
  MetricsReport r;
  r.regime = regime;
  r.runs = std::move(runs);
  std::vector<double> acc, auc, sens, spec;
  for (const auto& m : r.runs) {
    acc.push_back(m.accuracy);
    auc.push_back(m.auc);
    sens.push_back(m.sensitivity);
    spec.push_back(m.specificity);
  }
  r.accuracy = mean_std(acc);
  r.auc = mean_std(auc);
  r.sensitivity = mean_std(sens);
  r.specificity = mean_std(spec);
  return r;
}

void write_results(const std::vector<MetricsReport>& reports, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "regime,round,seed,accuracy,auc,sensitivity,specificity\n" << std::setprecision(17);
  for (const auto& r : reports) {
    for (const auto& m : r.runs) {
      f << to_string(r.regime) << ',' << m.round << ',' << m.seed << ',' << m.accuracy << ','
        << m.auc << ',' << m.sensitivity << ',' << m.specificity << '\n';
    }
  }
}

std::vector<MetricsReport> read_results(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("missing results file " + path.string());
  std::string line;
  std::getline(f, line);
  if (line.rfind("regime,round,seed", 0) != 0) throw FormatError("bad results header in " + path.string());
  std::map<Regime, std::vector<RunMetrics>> runs;
  std::vector<Regime> order;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string regime, field;
    std::getline(ss, regime, ',');
    RunMetrics m;
    try {
      std::getline(ss, field, ',');
      m.round = std::stoi(field);
      std::getline(ss, field, ',');
      m.seed = std::stoull(field);
      double* targets[] = {&m.accuracy, &m.auc, &m.sensitivity, &m.specificity};
      for (double* t : targets) {
        std::getline(ss, field, ',');
        *t = std::stod(field);
      }
    } catch (const std::exception&) {
      throw FormatError("bad results row: " + line);
    }
    const auto r = parse_regime(regime);
    if (!runs.count(r)) order.push_back(r);
    runs[r].push_back(m);
  }
  std::vector<MetricsReport> out;
  for (auto r : order) out.push_back(aggregate(r, runs[r]));
  return out;
}

void write_summary(const std::vector<MetricsReport>& reports, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "regime,runs,accuracy_mean,accuracy_std,auc_mean,auc_std,sensitivity_mean,sensitivity_std,"
       "specificity_mean,specificity_std\n"
    << std::setprecision(17);
  for (const auto& r : reports) {
    f << to_string(r.regime) << ',' << r.runs.size();
    for (const auto* s : {&r.accuracy, &r.auc, &r.sensitivity, &r.specificity}) f << ',' << s->mean << ',' << s->std;
    f << '\n';
  }
}

}  // namespace histaug
