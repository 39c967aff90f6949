#include "histaug/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "histaug/errors.hpp"

namespace histaug {

double binary_auc(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw ValidationError("AUC needs one label per score");
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    auto j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (auto k = i; k < j; ++k) {
      if (positive[order[k]]) {
        rank_sum += rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const auto n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("AUC needs both positive and negative samples");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

ClassificationMetrics classification_metrics(const torch::Tensor& probabilities,
                                             const torch::Tensor& labels) {
  if (probabilities.dim() != 2 || labels.dim() != 1 || probabilities.size(0) != labels.size(0)) {
    throw ValidationError("metrics need [N,C] probabilities and [N] labels");
  }
  const auto n = probabilities.size(0);
  const auto classes = probabilities.size(1);
  if (n == 0) throw ValidationError("metrics need a non-empty test set");
  const auto p = probabilities.to(torch::kFloat64).contiguous();
  const auto y = labels.to(torch::kInt64).contiguous();
  const double* pp = p.data_ptr<double>();
  const std::int64_t* yy = y.data_ptr<std::int64_t>();

  ClassificationMetrics m;
  m.confusion.assign(classes, std::vector<std::int64_t>(classes, 0));
  std::vector<std::int64_t> predicted(n);
  for (std::int64_t i = 0; i < n; ++i) {
    if (yy[i] < 0 || yy[i] >= classes) throw ValidationError("label out of range");
    const double* row = pp + i * classes;
    predicted[i] = std::max_element(row, row + classes) - row;
    ++m.confusion[yy[i]][predicted[i]];
  }
  std::int64_t correct = 0;
  for (std::int64_t c = 0; c < classes; ++c) correct += m.confusion[c][c];
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  for (std::int64_t c = 0; c < classes; ++c) {
    ClassRates r;
    r.label = static_cast<int>(c);
    std::int64_t tp = 0, fn = 0, fp = 0, tn = 0;
    std::vector<double> scores(n);
    std::vector<int> positive(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const bool is_pos = yy[i] == c, said_pos = predicted[i] == c;
      tp += is_pos && said_pos;
      fn += is_pos && !said_pos;
      fp += !is_pos && said_pos;
      tn += !is_pos && !said_pos;
      scores[i] = pp[i * classes + c];
      positive[i] = is_pos;
    }
    r.present = tp + fn > 0;
    if (r.present) r.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (fp + tn > 0) r.specificity = static_cast<double>(tn) / static_cast<double>(fp + tn);
    if (r.present && fp + tn > 0) r.auc = binary_auc(scores, positive);
    m.per_class.push_back(r);
  }

  if (classes == 2) {
    const auto& pos = m.per_class[1];
    m.sensitivity = pos.sensitivity;
    m.specificity = pos.specificity;
    if (m.per_class[0].present && pos.present) {
      m.auc = pos.auc;
    } else {
      m.warnings.push_back("test set holds a single class; AUC reported as 0");
    }
    if (!pos.present) m.warnings.push_back("positive class absent from test set");
    return m;
  }

  int used = 0;
  for (const auto& r : m.per_class) {
    if (!r.present) {
      m.warnings.push_back("class " + std::to_string(r.label) + " absent from test set; excluded from macro average");
      continue;
    }
    m.sensitivity += r.sensitivity;
    m.specificity += r.specificity;
    m.auc += r.auc;
    ++used;
  }
  if (used > 0) {
    m.sensitivity /= used;
    m.specificity /= used;
    m.auc /= used;
  }
  return m;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

}  // namespace histaug
