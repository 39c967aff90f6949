#include "histaug/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "histaug/errors.hpp"
#include "histaug/seed.hpp"

namespace fs = std::filesystem;

namespace histaug {

std::int64_t round_half_up(double x) { return static_cast<std::int64_t>(std::floor(x + 0.5 + 1e-9)); }

namespace {

constexpr const char* kManifestHeader = "filename,label,patient_id,split";

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        current += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        current += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(current));
      current.clear();
    } else if (c != '\r') {
      current += c;
    }
  }
  fields.push_back(std::move(current));
  return fields;
}

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"") == std::string::npos) return value;
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw ValidationError("unknown split '" + std::string(text) + "'");
}

int DatasetProfile::class_index(std::string_view name) const {
  auto it = std::find(class_names.begin(), class_names.end(), name);
  return it == class_names.end() ? -1 : static_cast<int>(it - class_names.begin());
}

DatasetProfile builtin_profile(std::string_view name) {
  if (name == "cervical") return {"cervical", 256, 128, 3, {"Normal", "CIN1", "CIN2", "CIN3"}};
  if (name == "pcam") return {"pcam", 96, 96, 2, {"normal", "metastatic"}};
  if (name == "toy") return {"toy", 32, 32, 2, {"warm", "cool"}};
  throw ValidationError("unknown dataset profile '" + std::string(name) + "'");
}

std::vector<std::string> builtin_profile_names() { return {"cervical", "pcam", "toy"}; }

torch::Tensor LabeledPatch::image() const { return pixels.to(torch::kFloat32).div(255.0); }

PatchDataset::PatchDataset(DatasetProfile profile, std::vector<LabeledPatch> patches)
    : profile_(std::move(profile)), patches_(std::move(patches)) {
  if (profile_.class_count() < 1) throw ValidationError("profile has no classes");
  std::unordered_map<std::string, Split> patient_split;
  for (const auto& p : patches_) {
    if (!p.pixels.defined() || p.pixels.dim() != 3 || p.pixels.size(0) != 3 ||
        p.pixels.size(1) != profile_.height || p.pixels.size(2) != profile_.width) {
      std::ostringstream msg;
      msg << "patch '" << p.filename << "' has shape "
          << (p.pixels.defined() ? p.pixels.sizes() : c10::IntArrayRef{}) << ", profile '"
          << profile_.name << "' requires [3, " << profile_.height << ", " << profile_.width
          << "]";
      throw ValidationError(msg.str());
    }
    if (p.label < 0 || p.label >= profile_.class_count()) {
      throw ValidationError("patch '" + p.filename + "' has out-of-range label");
    }
    if (p.patient_id.empty()) throw ValidationError("patch '" + p.filename + "' has no patient id");
    auto [it, inserted] = patient_split.emplace(p.patient_id, p.split);
    if (!inserted && it->second != p.split) {
      throw ValidationError("patient '" + p.patient_id + "' appears in more than one split");
    }
  }
}

std::vector<std::int64_t> PatchDataset::class_sizes(Split split) const {
  std::vector<std::int64_t> sizes(class_count(), 0);
  for (const auto& p : patches_) {
    if (p.split == split) ++sizes[p.label];
  }
  return sizes;
}

std::size_t PatchDataset::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(patches_.begin(), patches_.end(), [&](const auto& p) { return p.split == split; }));
}

std::vector<const LabeledPatch*> PatchDataset::select(Split split) const {
  std::vector<const LabeledPatch*> out;
  for (const auto& p : patches_) {
    if (p.split == split) out.push_back(&p);
  }
  return out;
}

torch::Tensor PatchDataset::images(Split split) const {
  std::vector<torch::Tensor> items;
  for (const auto* p : select(split)) items.push_back(p->pixels);
  if (items.empty()) return torch::empty({0, 3, profile_.height, profile_.width});
  return torch::stack(items).to(torch::kFloat32).div_(255.0);
}

torch::Tensor PatchDataset::labels(Split split) const {
  std::vector<std::int64_t> out;
  for (const auto* p : select(split)) out.push_back(p->label);
  return torch::tensor(out, torch::kInt64);
}

torch::Tensor PatchDataset::class_images(Split split, int label) const {
  std::vector<torch::Tensor> items;
  for (const auto* p : select(split)) {
    if (p->label == label) items.push_back(p->pixels);
  }
  if (items.empty()) return torch::empty({0, 3, profile_.height, profile_.width});
  return torch::stack(items).to(torch::kFloat32).div_(255.0);
}

torch::Tensor read_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw FormatError("cannot decode image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto hwc = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).contiguous();
}

void write_image(const fs::path& path, const torch::Tensor& pixels) {
  if (pixels.dim() != 3 || pixels.size(0) != 3 || pixels.scalar_type() != torch::kUInt8) {
    throw ValidationError("write_image expects uint8 [3,H,W]");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto hwc = pixels.permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw FormatError("cannot write image " + path.string());
}

torch::Tensor to_pixels(const torch::Tensor& image) {
  return image.detach().to(torch::kFloat32).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
}

PatchDataset load_manifest(const fs::path& manifest, const DatasetProfile& profile) {
  if (!fs::is_regular_file(manifest)) throw FormatError("missing manifest " + manifest.string());
  std::ifstream in(manifest);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty manifest " + manifest.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw FormatError("manifest header must be '" + std::string(kManifestHeader) + "', got '" +
                      line + "'");
  }
  const fs::path root = manifest.parent_path();
  std::vector<LabeledPatch> patches;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 4) {
      throw FormatError(manifest.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    LabeledPatch patch;
    patch.filename = fields[0];
    patch.label = profile.class_index(fields[1]);
    if (patch.label < 0) {
      throw ValidationError(manifest.string() + ":" + std::to_string(line_no) +
                            ": unknown class '" + fields[1] + "' for profile '" + profile.name + "'");
    }
    patch.patient_id = fields[2];
    patch.split = parse_split(fields[3]);
    patch.source = fs::absolute(root / patch.filename).lexically_normal();
    patch.pixels = read_image(patch.source);
    patches.push_back(std::move(patch));
  }
  return PatchDataset(profile, std::move(patches));
}

PatchDataset load_dataset(const fs::path& root, const DatasetProfile& profile) {
  return load_manifest(root / "manifest.csv", profile);
}

PatchDataset load_dataset(const fs::path& root, std::string_view profile_name) {
  return load_dataset(root, builtin_profile(profile_name));
}

void save_dataset(const PatchDataset& dataset, const fs::path& root) {
  fs::create_directories(root);
  std::ofstream out(root / "manifest.csv");
  if (!out) throw FormatError("cannot write manifest under " + root.string());
  out << kManifestHeader << '\n';
  const auto& names = dataset.profile().class_names;
  std::size_t index = 0;
  for (const auto& p : dataset.patches()) {
    std::string name = fs::path(p.filename).filename().string();
    if (name.empty()) name = "patch_" + std::to_string(index) + ".png";
    const std::string rel = names[p.label] + "/" + name;
    write_image(root / rel, p.pixels);
    out << csv_field(rel) << ',' << csv_field(names[p.label]) << ',' << csv_field(p.patient_id)
        << ',' << to_string(p.split) << '\n';
    ++index;
  }
}

void write_manifest(const PatchDataset& dataset, const fs::path& manifest) {
  if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
  std::ofstream out(manifest);
  if (!out) throw FormatError("cannot write manifest " + manifest.string());
  out << kManifestHeader << '\n';
  const auto& names = dataset.profile().class_names;
  for (const auto& p : dataset.patches()) {
    if (p.source.empty()) {
      throw ValidationError("patch '" + p.filename + "' has no source file; use save_dataset");
    }
    out << csv_field(p.source.string()) << ',' << csv_field(names[p.label]) << ','
        << csv_field(p.patient_id) << ',' << to_string(p.split) << '\n';
  }
}

PatchDataset split_by_patient(const PatchDataset& dataset, SplitRatios ratios, std::uint64_t seed) {
  const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
  for (double v : r) {
    if (!(v > 0.0)) throw ValidationError("split ratios must be positive");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");

  std::set<std::string> unique;
  for (const auto& p : dataset.patches()) unique.insert(p.patient_id);
  const std::vector<std::string> patients(unique.begin(), unique.end());
  const auto n = static_cast<std::int64_t>(patients.size());
  if (n < 3) {
    throw InfeasibleSplitError("cannot split " + std::to_string(n) + " patients into 3 splits");
  }

  // Patient counts per split: largest remainder, then at least one patient each.
  std::array<std::int64_t, 3> target{};
  std::array<double, 3> rem{};
  std::int64_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = r[s] * static_cast<double>(n);
    target[s] = static_cast<std::int64_t>(std::floor(exact + 1e-9));
    rem[s] = exact - static_cast<double>(target[s]);
    assigned += target[s];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int k = 0; assigned < n; k = (k + 1) % 3, ++assigned) ++target[order[k]];
  for (int s = 0; s < 3; ++s) {
    while (target[s] < 1) {
      auto donor = std::max_element(target.begin(), target.end()) - target.begin();
      --target[donor];
      ++target[s];
    }
  }

  // Per-patient class histograms for proportion scoring.
  const int C = dataset.class_count();
  std::unordered_map<std::string, std::vector<std::int64_t>> hist;
  std::vector<double> global(C, 0.0);
  for (const auto& p : dataset.patches()) {
    auto& h = hist[p.patient_id];
    if (h.empty()) h.assign(C, 0);
    ++h[p.label];
    global[p.label] += 1.0;
  }
  const double total = static_cast<double>(dataset.size());
  for (auto& g : global) g /= std::max(total, 1.0);

  auto deviation = [&](const std::vector<std::string>& order_) {
    double worst = 0.0;
    std::size_t idx = 0;
    for (int s = 0; s < 3; ++s) {
      std::vector<double> counts(C, 0.0);
      double sum = 0.0;
      for (std::int64_t k = 0; k < target[s]; ++k, ++idx) {
        for (int c = 0; c < C; ++c) counts[c] += static_cast<double>(hist[order_[idx]][c]);
      }
      for (double v : counts) sum += v;
      if (sum == 0.0) continue;
      for (int c = 0; c < C; ++c) worst = std::max(worst, std::abs(counts[c] / sum - global[c]));
    }
    return worst;
  };

  constexpr int kAttempts = 64;
  std::vector<std::string> best;
  double best_dev = std::numeric_limits<double>::infinity();
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    std::vector<std::string> candidate = patients;
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(attempt)));
    std::shuffle(candidate.begin(), candidate.end(), rng);
    const double dev = deviation(candidate);
    if (dev < best_dev) {
      best_dev = dev;
      best = std::move(candidate);
    }
  }

  std::unordered_map<std::string, Split> assignment;
  std::size_t idx = 0;
  for (int s = 0; s < 3; ++s) {
    for (std::int64_t k = 0; k < target[s]; ++k) assignment[best[idx++]] = static_cast<Split>(s);
  }
  std::vector<LabeledPatch> patches = dataset.patches();
  for (auto& p : patches) p.split = assignment.at(p.patient_id);
  return PatchDataset(dataset.profile(), std::move(patches));
}

std::vector<std::int64_t> stratified_quotas(std::span<const std::int64_t> class_sizes,
                                            double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ValidationError("fraction must lie in (0, 1]");
  }
  const std::int64_t n = std::accumulate(class_sizes.begin(), class_sizes.end(), std::int64_t{0});
  const std::int64_t total = round_half_up(fraction * static_cast<double>(n));
  std::vector<std::int64_t> quotas(class_sizes.size());
  std::vector<double> remainder(class_sizes.size());
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < class_sizes.size(); ++i) {
    const double exact = fraction * static_cast<double>(class_sizes[i]);
    quotas[i] = std::min(round_half_up(exact), class_sizes[i]);
    remainder[i] = exact - std::floor(exact + 1e-9);
    sum += quotas[i];
  }
  std::vector<std::size_t> order(class_sizes.size());
  std::iota(order.begin(), order.end(), 0);
  // Only classes that were rounded up give a unit back (smallest remainder first), and only
  // classes that were rounded down receive one (largest remainder first).
  if (sum > total) {
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return remainder[a] < remainder[b]; });
    for (auto i : order) {
      if (sum == total) break;
      const double exact = fraction * static_cast<double>(class_sizes[i]);
      if (static_cast<double>(quotas[i]) > exact) {
        --quotas[i];
        --sum;
      }
    }
  } else if (sum < total) {
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return remainder[a] > remainder[b]; });
    for (auto i : order) {
      if (sum == total) break;
      const double exact = fraction * static_cast<double>(class_sizes[i]);
      if (static_cast<double>(quotas[i]) < exact && quotas[i] < class_sizes[i]) {
        ++quotas[i];
        ++sum;
      }
    }
  }
  return quotas;
}

PatchDataset subset_fraction(const PatchDataset& dataset, double fraction, std::uint64_t seed) {
  const auto sizes = dataset.class_sizes(Split::train);
  const auto quotas = stratified_quotas(sizes, fraction);
  const auto& all = dataset.patches();

  std::vector<std::vector<std::size_t>> by_class(dataset.class_count());
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].split == Split::train) by_class[all[i].label].push_back(i);
  }
  std::vector<bool> keep(all.size(), false);
  for (std::size_t i = 0; i < all.size(); ++i) keep[i] = all[i].split != Split::train;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    std::mt19937_64 rng(mix_seed(seed, c));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::int64_t k = 0; k < quotas[c]; ++k) keep[idx[k]] = true;
  }
  std::vector<LabeledPatch> kept;
  kept.reserve(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (keep[i]) kept.push_back(all[i]);
  }
  return PatchDataset(dataset.profile(), std::move(kept));
}

PatchDataset make_toy_dataset(int per_class, int patients, std::uint64_t seed, int height,
                              int width) {
  if (per_class < 1 || patients < 1) throw ValidationError("toy dataset needs images and patients");
  DatasetProfile profile = builtin_profile("toy");
  profile.height = height;
  profile.width = width;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const float base[2][3] = {{0.78f, 0.38f, 0.32f}, {0.30f, 0.42f, 0.78f}};

  std::vector<LabeledPatch> patches;
  for (int label = 0; label < 2; ++label) {
    for (int j = 0; j < per_class; ++j) {
      auto img = torch::empty({3, height, width});
      auto acc = img.accessor<float, 3>();
      const float phase = unit(rng) * 6.2831853f;
      const float period = 4.0f + 4.0f * unit(rng);
      const float shift = (unit(rng) - 0.5f) * 0.16f;
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const float t = label == 0 ? static_cast<float>(y) : static_cast<float>(x);
          const float stripe = 0.15f * std::sin(6.2831853f * t / period + phase);
          for (int c = 0; c < 3; ++c) {
            acc[c][y][x] = std::clamp(base[label][c] + shift + stripe + noise(rng), 0.0f, 1.0f);
          }
        }
      }
      LabeledPatch patch;
      char name[32];
      std::snprintf(name, sizeof(name), "img_%04d.png", j);
      patch.filename = profile.class_names[label] + "/" + name;
      patch.pixels = to_pixels(img);
      patch.label = label;
      patch.patient_id = "patient_" + std::to_string(j % patients);
      patch.split = Split::train;
      patches.push_back(std::move(patch));
    }
  }
  return PatchDataset(std::move(profile), std::move(patches));
}

}  // namespace histaug
