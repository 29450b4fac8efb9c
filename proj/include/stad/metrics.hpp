#pragma once

// Ranking metrics for anomaly scoring: Mann-Whitney AUC and F1 at the
// true-prevalence threshold.

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stad {

class MetricsError : public std::runtime_error {
 public:
  explicit MetricsError(const std::string& what) : std::runtime_error(what) {}
};

struct EvalResult {
  double auc = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double threshold_used = 0.0;
};

// Probability that a random positive outranks a random negative; tied pairs
// count one half. Computed through average ranks.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw MetricsError("auc: size mismatch");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += static_cast<std::size_t>(l != 0);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricsError("auc: labels contain a single class");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (labels[k] != 0) rank_sum_pos += rank[k];
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Calls exactly as many spots anomalous as there are true anomalies, ties at
// the cut resolved by ascending spot index, then scores the confusion matrix.
// Predicted and actual positive counts coincide, so precision == recall == F1.
inline EvalResult f1_at_prevalence(const std::vector<double>& scores,
                                   const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw MetricsError("f1_at_prevalence: size mismatch");
  const std::size_t n = scores.size();
  std::size_t q = 0;
  for (int l : labels) q += static_cast<std::size_t>(l != 0);
  if (q == 0) throw MetricsError("f1_at_prevalence: no positive labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  std::size_t tp = 0;
  for (std::size_t k = 0; k < q; ++k) tp += static_cast<std::size_t>(labels[order[k]] != 0);

  EvalResult r;
  r.threshold_used = scores[order[q - 1]];
  r.precision = static_cast<double>(tp) / static_cast<double>(q);
  r.recall = r.precision;
  r.f1 = r.precision;
  return r;
}

// Full scorecard: ranking quality plus the prevalence-threshold confusion
// metrics in one row.
inline EvalResult evaluate(const std::vector<double>& scores, const std::vector<int>& labels) {
  EvalResult r = f1_at_prevalence(scores, labels);
  r.auc = auc(scores, labels);
  return r;
}

inline std::string eval_csv(const std::vector<std::pair<std::string, EvalResult>>& rows) {
  std::ostringstream os;
  os << "name,auc,f1,precision,recall,threshold\n";
  os.precision(10);
  for (const auto& [name, r] : rows) {
    os << name << ',' << r.auc << ',' << r.f1 << ',' << r.precision << ',' << r.recall << ','
       << r.threshold_used << '\n';
  }
  return os.str();
}

}  // namespace stad
