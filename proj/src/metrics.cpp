#include "dialoscope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dialoscope/error.hpp"

namespace dialoscope::metrics {

using corpus::BinaryLabel;

double MetricsReport::coverage() const {
    const auto total = n_scored + n_parse_failed;
    return total == 0 ? 0.0 : static_cast<double>(n_scored) / static_cast<double>(total);
}

ConfusionCounts confusion(std::span<const BinaryLabel> predictions, std::span<const BinaryLabel> golds) {
    if (predictions.size() != golds.size()) {
        throw DataError("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                        std::to_string(golds.size()) + " golds");
    }
    if (predictions.empty()) throw DataError("confusion: no items");
    ConfusionCounts c;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const bool pred_defect = predictions[i] == BinaryLabel::defect;
        const bool gold_defect = golds[i] == BinaryLabel::defect;
        if (pred_defect && gold_defect) ++c.tp_defect;
        else if (pred_defect) ++c.fp_defect;
        else if (gold_defect) ++c.fn_defect;
        else ++c.tn_defect;
    }
    return c;
}

namespace {

double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

ClassMetrics class_metrics(const ConfusionCounts& c, BinaryLabel positive) {
    std::size_t tp = c.tp_defect, fp = c.fp_defect, fn = c.fn_defect;
    if (positive == BinaryLabel::non_defect) {
        tp = c.tn_defect;
        fp = c.fn_defect;
        fn = c.fp_defect;
    }
    ClassMetrics m;
    m.precision = ratio(tp, tp + fp);
    m.recall = ratio(tp, tp + fn);
    m.f1 = harmonic(m.precision, m.recall);
    return m;
}

Averages averages(const ClassMetrics& defect, const ClassMetrics& non_defect, std::size_t support_defect,
                  std::size_t support_non_defect) {
    const std::size_t total = support_defect + support_non_defect;
    if (total == 0) throw DataError("averages: both class supports are zero");
    const double wd = static_cast<double>(support_defect) / static_cast<double>(total);
    const double wn = static_cast<double>(support_non_defect) / static_cast<double>(total);

    Averages a;
    a.macro = {(defect.precision + non_defect.precision) / 2.0, (defect.recall + non_defect.recall) / 2.0,
               (defect.f1 + non_defect.f1) / 2.0};
    a.weighted = {wd * defect.precision + wn * non_defect.precision, wd * defect.recall + wn * non_defect.recall,
                  wd * defect.f1 + wn * non_defect.f1};
    return a;
}

double f1_micro(const ConfusionCounts& c) {
    if (c.total() == 0) throw DataError("f1_micro: no items");
    return ratio(c.tp_defect + c.tn_defect, c.total());
}

std::vector<double> fractional_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && values[order[j]] == values[order[i]]) ++j;
        // Positions i..j-1 hold ranks i+1..j; their mean is (i + 1 + j) / 2.
        const double rank = static_cast<double>(i + 1 + j) / 2.0;
        for (std::size_t t = i; t < j; ++t) ranks[order[t]] = rank;
        i = j;
    }
    return ranks;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw DataError("correlation over series of unequal length");
    if (xs.size() < 2) throw DataError("correlation needs at least two items");
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("correlation of a constant series is undefined");
    return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw DataError("correlation over series of unequal length");
    const auto rx = fractional_ranks(xs);
    const auto ry = fractional_ranks(ys);
    return pearson(rx, ry);
}

namespace {

std::optional<double> try_correlation(double (*fn)(std::span<const double>, std::span<const double>),
                                      const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() < 2) return std::nullopt;
    try {
        return fn(xs, ys);
    } catch (const UndefinedCorrelation&) {
        return std::nullopt;
    }
}

}  // namespace

MetricsReport build_report(std::span<const scoring::ScoredDialogue> scored,
                           const std::map<std::string, corpus::LikertRating>& golds, int threshold) {
    std::vector<BinaryLabel> all_gold_labels;
    std::vector<BinaryLabel> pred_labels;
    std::vector<BinaryLabel> gold_labels;
    std::vector<double> gold_values;
    std::vector<double> pred_values;
    MetricsReport report;

    for (const auto& s : scored) {
        auto it = golds.find(s.dialogue_id);
        if (it == golds.end()) throw DataError("no gold rating for scored dialogue " + s.dialogue_id);
        const auto gold_label = corpus::binarize(it->second, threshold);
        all_gold_labels.push_back(gold_label);
        if (!s.parse_ok || !s.likert) {
            ++report.n_parse_failed;
            continue;
        }
        ++report.n_scored;
        gold_labels.push_back(gold_label);
        pred_labels.push_back(corpus::binarize(*s.likert, threshold));
        gold_values.push_back(static_cast<double>(it->second.value()));
        pred_values.push_back(s.continuous_rating ? *s.continuous_rating : static_cast<double>(s.likert->value()));
    }
    if (report.n_scored == 0) throw DataError("no successfully parsed items to build a report from");

    report.defect_rate = corpus::defect_rate(all_gold_labels);
    const auto c = confusion(pred_labels, gold_labels);
    report.defect = class_metrics(c, BinaryLabel::defect);
    report.non_defect = class_metrics(c, BinaryLabel::non_defect);
    const auto avg = averages(report.defect, report.non_defect, c.tp_defect + c.fn_defect, c.tn_defect + c.fp_defect);
    report.weighted_avg = avg.weighted;
    report.macro_avg = avg.macro;
    report.f1_micro = f1_micro(c);
    report.spearman = try_correlation(&spearman, gold_values, pred_values);
    report.pearson = try_correlation(&pearson, gold_values, pred_values);
    return report;
}

}  // namespace dialoscope::metrics
