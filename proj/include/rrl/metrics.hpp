#pragma once
// Matching evaluation: false positive rate at 95% recall, area under the ROC
// curve, and ROC export.

#include <string>
#include <vector>

namespace rrl {

struct RocPoint {
    double threshold, tpr, fpr;
};

struct EvalReport {
    double fpr95 = 0;
    double auc = 0;
    std::vector<RocPoint> roc;  // (inf,0,0) endpoint plus one row per distinct score
    int positives = 0, negatives = 0;
};

// Scores sorted descending with ties kept in original index order (stable
// sort); returns FP/negatives at the first prefix whose recall reaches 0.95.
double fpr95(const std::vector<double>& scores, const std::vector<int>& labels);

// Trapezoidal ROC integration with tie groups entering together, which equals
// the pairwise Mann-Whitney statistic with ties counted 0.5.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

EvalReport eval_scores(const std::vector<double>& scores, const std::vector<int>& labels);

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc);

}  // namespace rrl
