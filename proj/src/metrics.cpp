#include "rrl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "rrl/common.hpp"

namespace rrl {

namespace {

struct Counts {
    int positives = 0, negatives = 0;
};

Counts validate(const std::vector<double>& scores, const std::vector<int>& labels, const char* op) {
    if (scores.size() != labels.size()) throw ConfigError(std::string(op) + ": scores/labels length mismatch");
    if (scores.empty()) throw ConfigError(std::string(op) + ": empty input");
    Counts c;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ConfigError(std::string(op) + ": labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw NumericError(std::string(op) + ": non-finite score");
        (labels[i] ? c.positives : c.negatives)++;
    }
    if (c.positives == 0 || c.negatives == 0)
        throw ConfigError(std::string(op) + ": undefined metric: need at least one positive and one negative label");
    return c;
}

std::vector<size_t> order_desc(const std::vector<double>& scores) {
    std::vector<size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    return idx;
}

}  // namespace

double fpr95(const std::vector<double>& scores, const std::vector<int>& labels) {
    const Counts c = validate(scores, labels, "fpr95");
    const auto idx = order_desc(scores);
    int tp = 0, fp = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
        (labels[idx[i]] ? tp : fp)++;
        if (static_cast<double>(tp) / c.positives >= 0.95)
            return static_cast<double>(fp) / c.negatives;
    }
    return 1.0;  // unreachable: recall hits 1.0 at the full prefix
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    const Counts c = validate(scores, labels, "auc");
    const auto idx = order_desc(scores);
    double area = 0.0, prev_tpr = 0.0, prev_fpr = 0.0;
    int tp = 0, fp = 0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp)++;
            ++j;
        }
        const double tpr = static_cast<double>(tp) / c.positives;
        const double fpr = static_cast<double>(fp) / c.negatives;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j;
    }
    return area;
}

EvalReport eval_scores(const std::vector<double>& scores, const std::vector<int>& labels) {
    const Counts c = validate(scores, labels, "eval_scores");
    EvalReport r;
    r.positives = c.positives;
    r.negatives = c.negatives;
    r.fpr95 = fpr95(scores, labels);
    r.auc = auc(scores, labels);
    r.roc.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    const auto idx = order_desc(scores);
    int tp = 0, fp = 0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp)++;
            ++j;
        }
        r.roc.push_back({scores[idx[i]], static_cast<double>(tp) / c.positives,
                         static_cast<double>(fp) / c.negatives});
        i = j;
    }
    return r;
}

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& roc) {
    std::ofstream out(path);
    if (!out) throw IoError("write_roc_csv: cannot open " + path);
    out << "threshold,tpr,fpr\n";
    out.precision(10);
    for (const auto& p : roc) out << p.threshold << "," << p.tpr << "," << p.fpr << "\n";
    if (!out) throw IoError("write_roc_csv: write failed for " + path);
}

}  // namespace rrl
