#pragma once

// Imbalance-sensitive evaluation: confusion-matrix metrics at a threshold,
// average-precision PR-AUC, threshold sweeps, and mean/std summaries over
// repeated runs. Zero-denominator conventions (F1 0/0 -> 0, MCC -> 0,
// sens/spec -> 0) are part of the contract; degenerate all-positive
// predictors must come out at specificity 0, MCC 0, balanced accuracy 0.5.

#include <array>
#include <string>
#include <vector>

namespace xkd {

struct ConfusionCounts {
    long tp = 0, fp = 0, tn = 0, fn = 0;
    long total() const { return tp + fp + tn + fn; }
};

struct MetricsReport {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double balanced_accuracy = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double mcc = 0.0;
    double pr_auc = 0.0;
    double positive_rate = 0.0;
};

inline constexpr int kMetricCount = 8;
extern const std::array<double MetricsReport::*, kMetricCount> kMetricFields;
extern const std::array<const char*, kMetricCount> kMetricNames;

struct ThresholdCurve {
    std::vector<double> thresholds;
    std::vector<MetricsReport> reports;  // one per threshold
};

struct MetricsSummary {
    MetricsReport mean;
    MetricsReport stdev;  // sample std (n-1); 0 when n == 1
    int n_runs = 0;
};

ConfusionCounts confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                          double threshold);

// scores in [0,1], labels in {0,1}; prediction = score >= threshold.
MetricsReport evaluate(const std::vector<double>& scores, const std::vector<int>& labels,
                       double threshold = 0.5);

// Average precision with tied scores grouped. Requires >= 1 positive label.
double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Default grid 0.00..1.00 in steps of 0.05.
ThresholdCurve threshold_sweep(const std::vector<double>& scores, const std::vector<int>& labels);
ThresholdCurve threshold_sweep(const std::vector<double>& scores, const std::vector<int>& labels,
                               const std::vector<double>& grid);

MetricsSummary summarize(const std::vector<MetricsReport>& reports);

}  // namespace xkd
