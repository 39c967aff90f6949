#include "histaug/selector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "histaug/errors.hpp"
#include "histaug/seed.hpp"

namespace fs = std::filesystem;

namespace histaug {

namespace {

nlohmann::json number_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

std::map<int, std::vector<const CandidateSample*>> by_class(const std::vector<CandidateSample>& pool) {
  std::map<int, std::vector<const CandidateSample*>> groups;
  for (const auto& c : pool) groups[c.assigned_label].push_back(&c);
  return groups;
}

// Keeps floor(n/2) of each class by ascending key, ties by id. Output is ordered by id.
template <typename Key>
std::vector<CandidateSample> keep_lower_half(const std::vector<CandidateSample>& pool, Key key,
                                             const char* what) {
  std::vector<CandidateSample> kept;
  for (auto& [label, members] : by_class(pool)) {
    for (const auto* c : members) {
      const double k = key(*c);
      if (!std::isfinite(k) || k < 0.0) {
        throw ValidationError(std::string(what) + " of candidate " + std::to_string(c->id) +
                              " is not a finite non-negative number");
      }
    }
    std::stable_sort(members.begin(), members.end(), [&](const auto* a, const auto* b) {
      const double ka = key(*a), kb = key(*b);
      return ka != kb ? ka < kb : a->id < b->id;
    });
    for (std::size_t i = 0; i < members.size() / 2; ++i) kept.push_back(*members[i]);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return kept;
}

std::string class_dir_name(const DatasetProfile& profile, int label) {
  return label >= 0 && label < profile.class_count() ? profile.class_names[label] : std::to_string(label);
}

std::string candidate_file(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "cand_%06lld.png", static_cast<long long>(id));
  return buf;
}

}  // namespace

nlohmann::json SelectionReport::to_json() const {
  nlohmann::json j;
  j["checkpoint"] = checkpoint;
  j["seed"] = seed;
  j["ratio"] = ratio;
  j["pool_multiplier"] = pool_multiplier;
  j["mc_runs"] = mc_runs;
  auto& cls = j["classes"] = nlohmann::json::array();
  for (const auto& c : classes) {
    cls.push_back({{"label", c.label},
                   {"name", c.name},
                   {"real_count", c.real_count},
                   {"quota", c.quota},
                   {"pool_size", c.pool_size},
                   {"entropy_kept", c.entropy_kept},
                   {"selected", c.selected},
                   {"entropy_median", number_or_null(c.entropy_median)},
                   {"distance_median", number_or_null(c.distance_median)}});
  }
  j["pool_ids"] = pool_ids;
  j["intermediate_ids"] = intermediate_ids;
  j["selected_ids"] = selected_ids;
  j["warnings"] = warnings;
  j["failed"] = failed;
  j["failure"] = failure;
  return j;
}

std::string SelectionReport::serialize() const { return to_json().dump(2) + "\n"; }

std::vector<std::int64_t> class_quotas(std::span<const std::int64_t> class_sizes, double ratio,
                                       std::vector<std::string>* warnings) {
  if (!(ratio > 0.0)) throw ValidationError("augmentation ratio must be positive");
  std::vector<std::int64_t> quotas;
  for (std::size_t i = 0; i < class_sizes.size(); ++i) {
    quotas.push_back(round_half_up(ratio * static_cast<double>(class_sizes[i])));
    if (quotas.back() == 0 && warnings) {
      warnings->push_back("class " + std::to_string(i) + " has quota 0 (r*N_i = " +
                          std::to_string(ratio * static_cast<double>(class_sizes[i])) +
                          "); it contributes no synthetic images");
    }
  }
  return quotas;
}

std::vector<std::int64_t> pool_sizes(std::span<const std::int64_t> quotas, int multiplier) {
  if (multiplier < 1) throw ValidationError("pool multiplier must be at least 1");
  std::vector<std::int64_t> sizes;
  for (auto q : quotas) sizes.push_back(q * multiplier);
  return sizes;
}

std::vector<CandidateSample> generate_pool(LoadedGan& gan, const DatasetProfile& profile,
                                           std::span<const std::int64_t> sizes, std::uint64_t seed) {
  const auto& arch = gan.arch;
  if (arch.class_count != profile.class_count() || arch.image_height != profile.height ||
      arch.image_width != profile.width) {
    throw ValidationError("checkpoint geometry does not match dataset profile " + profile.name);
  }
  if (static_cast<int>(sizes.size()) != profile.class_count()) {
    throw ValidationError("pool sizes must list every class");
  }
  std::vector<CandidateSample> pool;
  std::int64_t next_id = 0;
  constexpr std::int64_t kChunk = 64;
  for (int label = 0; label < profile.class_count(); ++label) {
    for (std::int64_t start = 0; start < sizes[label]; start += kChunk) {
      const auto stop = std::min(sizes[label], start + kChunk);
      std::vector<torch::Tensor> z;
      std::vector<std::uint64_t> seeds;
      for (auto j = start; j < stop; ++j) {
        seeds.push_back(mix_seed(seed, static_cast<std::uint64_t>(next_id + (j - start))));
        z.push_back(seeded_noise(seeds.back(), arch.noise_dim));
      }
      const auto labels = torch::full({stop - start}, label, torch::kInt64);
      const auto images = generate_images(gan.generator, torch::stack(z), labels);
      for (std::int64_t j = 0; j < stop - start; ++j) {
        CandidateSample c;
        c.id = next_id++;
        c.assigned_label = label;
        c.seed = seeds[j];
        c.image = images[j].clone();
        pool.push_back(std::move(c));
      }
    }
  }
  return pool;
}

void score_candidates(std::vector<CandidateSample>& pool, ResidualClassifier& extractor,
                      std::span<const ClassCentroid> centroids, int runs, std::uint64_t seed,
                      int chunk) {
  std::map<int, const ClassCentroid*> lookup;
  for (const auto& c : centroids) lookup[c.label] = &c;
  for (const auto& c : pool) {
    if (!lookup.count(c.assigned_label)) {
      throw ValidationError("no centroid for class " + std::to_string(c.assigned_label));
    }
  }
  for (std::size_t start = 0; start < pool.size(); start += chunk) {
    const auto stop = std::min(pool.size(), start + static_cast<std::size_t>(chunk));
    std::vector<torch::Tensor> images;
    std::vector<std::uint64_t> seeds;
    for (auto j = start; j < stop; ++j) {
      images.push_back(pool[j].image);
      seeds.push_back(mix_seed(seed, static_cast<std::uint64_t>(pool[j].id)));
    }
    const auto sets = mc_forward(extractor, torch::stack(images), runs, seeds, chunk);
    for (auto j = start; j < stop; ++j) {
      auto& c = pool[j];
      c.entropy = predictive_entropy(sets[j - start]);
      c.distance = feature_distance(sets[j - start], *lookup.at(c.assigned_label));
    }
  }
}

std::vector<CandidateSample> entropy_filter(const std::vector<CandidateSample>& pool,
                                            std::span<const int> required_classes) {
  const auto groups = by_class(pool);
  for (int label : required_classes) {
    if (!groups.count(label)) throw ValidationError("empty candidate pool for class " + std::to_string(label));
  }
  auto kept = keep_lower_half(pool, [](const CandidateSample& c) { return c.entropy; }, "entropy");
  for (auto& c : kept) c.passed_entropy = true;
  return kept;
}

std::vector<CandidateSample> distance_filter(const std::vector<CandidateSample>& survivors,
                                             std::span<const ClassCentroid> centroids) {
  for (const auto& [label, members] : by_class(survivors)) {
    const bool found = std::any_of(centroids.begin(), centroids.end(),
                                   [&](const ClassCentroid& c) { return c.label == label; });
    if (!found) throw ValidationError("no centroid for class " + std::to_string(label));
  }
  auto kept = keep_lower_half(survivors, [](const CandidateSample& c) { return c.distance; }, "distance");
  for (auto& c : kept) c.passed_distance = true;
  return kept;
}

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

SelectionOutcome apply_filters(std::vector<CandidateSample> pool,
                               std::span<const ClassCentroid> centroids,
                               const DatasetProfile& profile,
                               std::span<const std::int64_t> class_sizes, SelectionReport base) {
  SelectionOutcome out;
  out.report = std::move(base);
  auto& report = out.report;

  std::vector<int> required;
  std::vector<std::int64_t> pool_count(profile.class_count(), 0);
  for (const auto& c : pool) {
    if (c.assigned_label < 0 || c.assigned_label >= profile.class_count()) {
      throw ValidationError("candidate " + std::to_string(c.id) + " has an unknown label");
    }
    ++pool_count[c.assigned_label];
  }
  const auto quotas = class_quotas(class_sizes, report.ratio);
  for (int i = 0; i < profile.class_count(); ++i) {
    if (static_cast<std::size_t>(i) < quotas.size() && quotas[i] > 0) required.push_back(i);
  }

  out.intermediate = entropy_filter(pool, required);
  out.selected = distance_filter(out.intermediate, centroids);

  std::map<std::int64_t, CandidateSample*> index;
  for (auto& c : pool) {
    c.passed_entropy = c.passed_distance = false;
    index[c.id] = &c;
  }
  for (const auto& c : out.intermediate) index.at(c.id)->passed_entropy = true;
  for (const auto& c : out.selected) index.at(c.id)->passed_distance = true;
  for (auto& c : out.selected) c.passed_entropy = true;

  report.classes.clear();
  for (int i = 0; i < profile.class_count(); ++i) {
    ClassSelectionSummary s;
    s.label = i;
    s.name = profile.class_names[i];
    s.real_count = static_cast<std::size_t>(i) < class_sizes.size() ? class_sizes[i] : 0;
    s.quota = static_cast<std::size_t>(i) < quotas.size() ? quotas[i] : 0;
    s.pool_size = pool_count[i];
    std::vector<double> entropies, distances;
    for (const auto& c : pool) {
      if (c.assigned_label == i) entropies.push_back(c.entropy);
    }
    for (const auto& c : out.intermediate) {
      if (c.assigned_label == i) {
        ++s.entropy_kept;
        distances.push_back(c.distance);
      }
    }
    for (const auto& c : out.selected) s.selected += c.assigned_label == i;
    s.entropy_median = median(entropies);
    s.distance_median = median(distances);
    if (s.selected != s.quota) {
      report.warnings.push_back("class " + s.name + " selected " + std::to_string(s.selected) +
                                " images for a quota of " + std::to_string(s.quota));
    }
    report.classes.push_back(std::move(s));
  }
  report.pool_ids.clear();
  report.intermediate_ids.clear();
  report.selected_ids.clear();
  for (const auto& c : pool) report.pool_ids.push_back(c.id);
  for (const auto& c : out.intermediate) report.intermediate_ids.push_back(c.id);
  for (const auto& c : out.selected) report.selected_ids.push_back(c.id);
  out.pool = std::move(pool);
  return out;
}

void write_selection_csv(const std::vector<CandidateSample>& pool, const DatasetProfile& profile,
                         const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "id,class,entropy,distance,passed_entropy,passed_distance\n";
  f << std::setprecision(17);
  for (const auto& c : pool) {
    f << c.id << ',' << class_dir_name(profile, c.assigned_label) << ',' << c.entropy << ','
      << c.distance << ',' << (c.passed_entropy ? 1 : 0) << ',' << (c.passed_distance ? 1 : 0)
      << '\n';
  }
}

void write_selected_images(const std::vector<CandidateSample>& selected,
                           const DatasetProfile& profile, const fs::path& dir) {
  for (int i = 0; i < profile.class_count(); ++i) fs::create_directories(dir / profile.class_names[i]);
  for (const auto& c : selected) {
    write_image(dir / class_dir_name(profile, c.assigned_label) / candidate_file(c.id), to_pixels(c.image));
  }
}

void write_feature_export(const std::vector<CandidateSample>& pool, int runs, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "id,label,entropy,distance,K\n" << std::setprecision(17);
  for (const auto& c : pool) f << c.id << ',' << c.assigned_label << ',' << c.entropy << ',' << c.distance << ',' << runs << '\n';
}

void write_report(const SelectionReport& report, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << report.serialize();
}

SyntheticSet to_synthetic(const std::vector<CandidateSample>& samples, int height, int width) {
  SyntheticSet set;
  if (samples.empty()) {
    set.images = torch::zeros({0, 3, height, width});
    set.labels = torch::zeros({0}, torch::kInt64);
    return set;
  }
  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  for (const auto& c : samples) {
    images.push_back(c.image);
    labels.push_back(c.assigned_label);
  }
  set.images = torch::stack(images);
  set.labels = torch::tensor(labels, torch::kInt64);
  return set;
}

SyntheticSet read_selected_images(const fs::path& dir, const DatasetProfile& profile) {
  if (!fs::is_directory(dir)) throw FormatError("missing selected image directory " + dir.string());
  std::vector<CandidateSample> samples;
  for (int label = 0; label < profile.class_count(); ++label) {
    const auto sub = dir / profile.class_names[label];
    if (!fs::is_directory(sub)) continue;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(sub)) {
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      CandidateSample c;
      c.assigned_label = label;
      c.image = read_image(p).to(torch::kFloat32) / 255.0;
      if (c.image.size(1) != profile.height || c.image.size(2) != profile.width) {
        throw ValidationError("selected image " + p.string() + " has the wrong size");
      }
      samples.push_back(std::move(c));
    }
  }
  return to_synthetic(samples, profile.height, profile.width);
}

std::vector<ClassCentroid> train_centroids(ResidualClassifier& extractor, const PatchDataset& dataset,
                                           const ExperimentConfig& config) {
  std::vector<ClassCentroid> centroids;
  const auto seed = mix_seed(config.seed, 0xce7);
  for (int label = 0; label < dataset.class_count(); ++label) {
    const auto images = dataset.class_images(Split::train, label);
    if (images.size(0) == 0) continue;
    centroids.push_back(class_centroid(extractor, images, label, mix_seed(seed, label),
                                       config.selection.centroid_dropout));
  }
  return centroids;
}

std::uint64_t selection_pool_seed(const ExperimentConfig& config) { return mix_seed(config.seed, 0x5e1, 1); }
std::uint64_t selection_score_seed(const ExperimentConfig& config) { return mix_seed(config.seed, 0x5e1, 2); }

SelectionOutcome run_selection(const GanCheckpoint& checkpoint, const PatchDataset& dataset,
                               ResidualClassifier& extractor,
                               std::span<const ClassCentroid> centroids,
                               const ExperimentConfig& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  SelectionReport report;
  report.checkpoint = checkpoint.path.filename().string();
  report.seed = config.seed;
  report.ratio = config.selection.ratio;
  report.pool_multiplier = config.selection.pool_multiplier;
  report.mc_runs = config.selection.mc_runs;
  try {
    const auto sizes = dataset.class_sizes(Split::train);
    const auto quotas = class_quotas(sizes, config.selection.ratio, &report.warnings);
    for (auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
    auto gan = load_checkpoint(checkpoint.path);
    auto pool = generate_pool(gan, dataset.profile(), pool_sizes(quotas, config.selection.pool_multiplier),
                              selection_pool_seed(config));
    score_candidates(pool, extractor, centroids, config.selection.mc_runs, selection_score_seed(config));
    auto out = apply_filters(std::move(pool), centroids, dataset.profile(), sizes, report);
    write_selection_csv(out.pool, dataset.profile(), out_dir / "selection.csv");
    write_feature_export(out.pool, config.selection.mc_runs, out_dir / "features.csv");
    write_selected_images(out.selected, dataset.profile(), out_dir / "selected");
    write_report(out.report, out_dir / "selection_report.json");
    return out;
  } catch (const std::exception& e) {
    report.failed = true;
    report.failure = e.what();
    write_report(report, out_dir / "selection_report.json");
    throw;
  }
}

RatioSelection select_for_ratio(const std::vector<CandidateSample>& intermediate,
                                std::span<const std::int64_t> class_sizes, double ratio) {
  RatioSelection out;
  out.ratio = ratio;
  out.quotas = class_quotas(class_sizes, ratio);
  auto groups = by_class(intermediate);
  for (std::size_t i = 0; i < out.quotas.size(); ++i) {
    auto& members = groups[static_cast<int>(i)];
    const auto limit = static_cast<std::int64_t>(members.size() / 2);
    if (out.quotas[i] > limit) {
      out.feasible = false;
      continue;
    }
    std::stable_sort(members.begin(), members.end(), [](const auto* a, const auto* b) {
      return a->distance != b->distance ? a->distance < b->distance : a->id < b->id;
    });
    for (std::int64_t k = 0; k < out.quotas[i]; ++k) out.selected.push_back(*members[k]);
  }
  if (!out.feasible) out.selected.clear();
  std::sort(out.selected.begin(), out.selected.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

}  // namespace histaug
