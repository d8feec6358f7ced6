#include "xkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xkd/common.hpp"

namespace xkd {

const std::array<double MetricsReport::*, kMetricCount> kMetricFields = {
    &MetricsReport::accuracy,    &MetricsReport::macro_f1, &MetricsReport::balanced_accuracy,
    &MetricsReport::sensitivity, &MetricsReport::specificity, &MetricsReport::mcc,
    &MetricsReport::pr_auc,      &MetricsReport::positive_rate};

const std::array<const char*, kMetricCount> kMetricNames = {
    "accuracy", "macro_f1", "balanced_accuracy", "sensitivity",
    "specificity", "mcc", "pr_auc", "positive_rate"};

static void validate_inputs(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.empty()) fail("evaluate: empty input");
    if (scores.size() != labels.size()) fail("evaluate: scores/labels length mismatch");
    for (double s : scores)
        if (!(s >= 0.0 && s <= 1.0)) fail("evaluate: score outside [0,1]");
    for (int y : labels)
        if (y != 0 && y != 1) fail("evaluate: label outside {0,1}");
}

ConfusionCounts confusion(const std::vector<double>& scores, const std::vector<int>& labels,
                          double threshold) {
    ConfusionCounts c;
    for (size_t i = 0; i < scores.size(); ++i) {
        bool pred = scores[i] >= threshold;
        bool pos = labels[i] == 1;
        if (pred && pos) ++c.tp;
        else if (pred && !pos) ++c.fp;
        else if (!pred && pos) ++c.fn;
        else ++c.tn;
    }
    return c;
}

static double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

static double f1_for(long tp, long fp, long fn) {
    // 0/0 -> 0 convention
    double denom = 2.0 * tp + fp + fn;
    return denom == 0.0 ? 0.0 : 2.0 * tp / denom;
}

MetricsReport evaluate(const std::vector<double>& scores, const std::vector<int>& labels,
                       double threshold) {
    validate_inputs(scores, labels);
    const ConfusionCounts c = confusion(scores, labels, threshold);
    const double n = static_cast<double>(c.total());

    MetricsReport r;
    r.accuracy = (c.tp + c.tn) / n;
    double f1_pos = f1_for(c.tp, c.fp, c.fn);
    double f1_neg = f1_for(c.tn, c.fn, c.fp);  // negative class: tn as "tp", fn as "fp"
    r.macro_f1 = 0.5 * (f1_pos + f1_neg);
    r.sensitivity = safe_div(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fn));
    r.specificity = safe_div(static_cast<double>(c.tn), static_cast<double>(c.tn + c.fp));
    r.balanced_accuracy = 0.5 * (r.sensitivity + r.specificity);

    double den = std::sqrt(static_cast<double>(c.tp + c.fp)) * std::sqrt(static_cast<double>(c.tp + c.fn)) *
                 std::sqrt(static_cast<double>(c.tn + c.fp)) * std::sqrt(static_cast<double>(c.tn + c.fn));
    r.mcc = den == 0.0 ? 0.0
                       : (static_cast<double>(c.tp) * c.tn - static_cast<double>(c.fp) * c.fn) / den;

    long n_pos = c.tp + c.fn;
    r.pr_auc = n_pos > 0 ? pr_auc(scores, labels) : 0.0;  // guard: undefined without positives
    r.positive_rate = (c.tp + c.fp) / n;
    return r;
}

double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    validate_inputs(scores, labels);
    long n_pos = std::count(labels.begin(), labels.end(), 1);
    if (n_pos == 0) fail("pr_auc: no positive labels");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    // Average precision: sum precision * delta-recall over distinct score
    // groups, highest score first. Ties enter together.
    double ap = 0.0;
    long tp = 0, fp = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        long gtp = 0, gfp = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            if (labels[order[j]] == 1) ++gtp;
            else ++gfp;
            ++j;
        }
        long prev_tp = tp;
        tp += gtp;
        fp += gfp;
        if (gtp > 0) {
            double precision = static_cast<double>(tp) / (tp + fp);
            double delta_recall = static_cast<double>(tp - prev_tp) / n_pos;
            ap += precision * delta_recall;
        }
        i = j;
    }
    return ap;
}

ThresholdCurve threshold_sweep(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::vector<double> grid;
    for (int i = 0; i <= 20; ++i) grid.push_back(i / 20.0);
    return threshold_sweep(scores, labels, grid);
}

ThresholdCurve threshold_sweep(const std::vector<double>& scores, const std::vector<int>& labels,
                               const std::vector<double>& grid) {
    for (size_t i = 1; i < grid.size(); ++i)
        if (grid[i] <= grid[i - 1]) fail("threshold_sweep: grid must be strictly increasing");
    ThresholdCurve curve;
    curve.thresholds = grid;
    curve.reports.reserve(grid.size());
    for (double t : grid) curve.reports.push_back(evaluate(scores, labels, t));
    return curve;
}

MetricsSummary summarize(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) fail("summarize: empty report list");
    MetricsSummary s;
    s.n_runs = static_cast<int>(reports.size());
    const double n = static_cast<double>(reports.size());
    for (auto field : kMetricFields) {
        double mean = 0.0;
        for (const auto& r : reports) mean += r.*field;
        mean /= n;
        double var = 0.0;
        if (reports.size() > 1) {
            for (const auto& r : reports) {
                double d = r.*field - mean;
                var += d * d;
            }
            var /= (n - 1.0);
        }
        s.mean.*field = mean;
        s.stdev.*field = std::sqrt(var);
    }
    return s;
}

}  // namespace xkd
