#pragma once

#include <array>
#include <string>
#include <vector>

#include "m3net/errors.hpp"

namespace m3net {

// Per-sample class-1 probabilities plus ground truth. Predicted positive iff
// score >= threshold.
struct PredictionSet {
    std::vector<double> scores;
    std::vector<int> labels;
    double threshold = 0.5;

    void validate() const;
};

struct ClassCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }
};

// One-vs-rest confusion per class with frequency weights w_c = N_c / N.
struct Confusion {
    std::array<ClassCounts, 2> per_class{};
    std::array<double, 2> w{};
    std::size_t n = 0;
};

struct MetricsReport {
    Confusion confusion;
    double acc = 0, acc_std = 0, bacc = 0;
    double precision = 0, recall = 0, specificity = 0, f1 = 0;
    double roc_auc = 0, pr_auc = 0;
    // set when any per-class ratio had a zero denominator and contributed 0
    bool zero_division = false;
    std::vector<std::string> flags;

    std::string to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

Confusion confusion(const PredictionSet& preds);

struct WeightedPrf {
    double precision = 0, recall = 0, specificity = 0, f1 = 0;
    bool zero_division = false;
    std::vector<std::string> flags;
};
WeightedPrf weighted_metrics(const Confusion& c);

double accuracy(const Confusion& c);
double balanced_accuracy(const Confusion& c);

// Weighted one-vs-rest curve areas. ROC sweeps unique scores with trapezoids
// (equal scores grouped); PR integrates step-wise (average-precision style).
// Both require both labels present.
double roc_auc(const PredictionSet& preds);
double pr_auc(const PredictionSet& preds);

MetricsReport compute_metrics(const PredictionSet& preds);

}  // namespace m3net
