#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "rrl/metrics.hpp"

using namespace rrl;

TEST_CASE("fpr95 hand examples") {
    // perfect separation
    CHECK(fpr95({0.9, 0.8, 0.7, 0.2, 0.1, 0.05}, {1, 1, 1, 0, 0, 0}) == 0.0);
    // prefix through 0.4 reaches recall 1.0 with one false positive
    CHECK(fpr95({0.9, 0.8, 0.7, 0.4, 0.3, 0.2}, {1, 1, 0, 1, 0, 0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK_THROWS_AS(fpr95({0.5, 0.6}, {1, 1}), ConfigError);  // undefined without negatives
    CHECK_THROWS_AS(fpr95({0.5, 0.6}, {0, 0}), ConfigError);
}

TEST_CASE("auc hand examples") {
    CHECK(auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(auc({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
    // pairwise: wins (0.9>0.8),(0.9>0.7) of 4
    CHECK(auc({0.9, 0.8, 0.4, 0.7}, {1, 0, 1, 0}) == doctest::Approx(0.5).epsilon(1e-12));
    // ties count half
    CHECK(auc({0.5, 0.5}, {1, 0}) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("fpr95 and auc match brute-force oracles on 200 random sets with ties") {
    Rng rng(2718);
    for (int rep = 0; rep < 200; ++rep) {
        const int n = 5 + static_cast<int>(rng.below(60));
        std::vector<double> scores(static_cast<size_t>(n));
        std::vector<int> labels(static_cast<size_t>(n));
        // quantized scores force plenty of ties
        const int levels = 2 + static_cast<int>(rng.below(20));
        int pos = 0;
        for (int i = 0; i < n; ++i) {
            scores[static_cast<size_t>(i)] = static_cast<double>(rng.below(static_cast<uint64_t>(levels))) / levels;
            labels[static_cast<size_t>(i)] = static_cast<int>(rng.below(2));
            pos += labels[static_cast<size_t>(i)];
        }
        if (pos == 0) labels[0] = 1;
        if (pos == n) labels[0] = 0;

        INFO("rep=", rep);
        CHECK(fpr95(scores, labels) == oracles::fpr95(scores, labels));       // exact
        CHECK(std::abs(auc(scores, labels) - oracles::auc(scores, labels)) <= 1e-12);
    }
}

TEST_CASE("roc is monotone with one row per distinct score plus the endpoint") {
    Rng rng(31415);
    const int n = 64;
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
        scores[static_cast<size_t>(i)] = static_cast<double>(rng.below(9)) / 8.0;
        labels[static_cast<size_t>(i)] = static_cast<int>(rng.below(2));
    }
    labels[0] = 1;
    labels[1] = 0;
    auto report = eval_scores(scores, labels);

    std::vector<double> distinct = scores;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    CHECK(report.roc.size() == distinct.size() + 1);

    CHECK(report.roc.front().tpr == 0.0);
    CHECK(report.roc.front().fpr == 0.0);
    CHECK(std::isinf(report.roc.front().threshold));
    CHECK(report.roc.back().tpr == doctest::Approx(1.0));
    CHECK(report.roc.back().fpr == doctest::Approx(1.0));
    for (size_t i = 1; i < report.roc.size(); ++i) {
        CHECK(report.roc[i].tpr >= report.roc[i - 1].tpr);      // monotone as threshold decreases
        CHECK(report.roc[i].fpr >= report.roc[i - 1].fpr);
        CHECK(report.roc[i].threshold < report.roc[i - 1].threshold);
    }
    CHECK(report.positives + report.negatives == n);

    const auto path = (std::filesystem::temp_directory_path() / "rrl_roc_test.csv").string();
    write_roc_csv(path, report.roc);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "threshold,tpr,fpr");
    size_t rows = 0;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) ++rows;
    CHECK(rows == report.roc.size());
    std::filesystem::remove(path);
}
