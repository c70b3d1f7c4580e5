#include "ulp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ulp/errors.hpp"

namespace ulp {

std::pair<std::vector<RocPoint>, double> roc_auc(const std::vector<double>& scores,
                                                 const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("scores/labels size mismatch");
  size_t n_pos = 0, n_neg = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InvalidArgument("labels must be 0/1");
    if (!std::isfinite(scores[i])) throw InvalidArgument("scores must be finite");
    labels[i] == 1 ? ++n_pos : ++n_neg;
  }
  if (n_pos == 0 || n_neg == 0)
    throw InvalidArgument("ROC needs both classes present");

  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  std::vector<RocPoint> roc;
  roc.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double auc = 0.0;
  size_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    // Group ties: one ROC step per unique score keeps the trapezoid area
    // equal to the Mann-Whitney U statistic with half credit for ties.
    const double s = scores[order[i]];
    size_t j = i;
    while (j < order.size() && scores[order[j]] == s) {
      labels[order[j]] == 1 ? ++tp : ++fp;
      ++j;
    }
    const double tpr = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double fpr = static_cast<double>(fp) / static_cast<double>(n_neg);
    auc += (fpr - roc.back().fpr) * (tpr + roc.back().tpr) / 2.0;
    roc.push_back({fpr, tpr, s});
    i = j;
  }
  return {std::move(roc), auc};
}

double youden_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
  auto [roc, auc] = roc_auc(scores, labels);
  (void)auc;
  double best_j = -1.0;
  double best_thr = 0.5;
  for (size_t i = 1; i < roc.size(); ++i) {  // skip the sentinel at (0,0)
    const double j = roc[i].tpr - roc[i].fpr;
    if (j > best_j) {
      best_j = j;
      best_thr = roc[i].threshold;
    }
  }
  return best_thr;
}

double accuracy_at_threshold(const std::vector<double>& scores, const std::vector<int>& labels,
                             double threshold) {
  if (scores.size() != labels.size() || scores.empty())
    throw InvalidArgument("bad accuracy inputs");
  size_t hit = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const int pred = scores[i] >= threshold ? 1 : 0;
    hit += (pred == labels[i]);
  }
  return static_cast<double>(hit) / static_cast<double>(scores.size());
}

}  // namespace ulp
