#pragma once

#include <vector>

namespace ulp {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

// Threshold sweep over unique scores (higher score = more positive). AUC by
// the trapezoidal rule, which under tie grouping equals the normalized
// Mann-Whitney U statistic. Throws InvalidArgument unless both classes are
// present.
std::pair<std::vector<RocPoint>, double> roc_auc(const std::vector<double>& scores,
                                                 const std::vector<int>& labels);

// Threshold maximizing Youden's J (tpr - fpr); classify positive when
// score >= threshold.
double youden_threshold(const std::vector<double>& scores, const std::vector<int>& labels);

double accuracy_at_threshold(const std::vector<double>& scores, const std::vector<int>& labels,
                             double threshold);

}  // namespace ulp
