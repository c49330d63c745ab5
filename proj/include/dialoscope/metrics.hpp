#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dialoscope/corpus.hpp"
#include "dialoscope/scoring.hpp"

namespace dialoscope::metrics {

/// Defect is the positive class.
struct ConfusionCounts {
    std::size_t tp_defect = 0;
    std::size_t fp_defect = 0;
    std::size_t fn_defect = 0;
    std::size_t tn_defect = 0;

    std::size_t total() const noexcept { return tp_defect + fp_defect + fn_defect + tn_defect; }
    bool operator==(const ConfusionCounts&) const = default;
};

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;

    bool operator==(const ClassMetrics&) const = default;
};

struct Averages {
    ClassMetrics weighted;
    ClassMetrics macro;
};

/// One result-table row. Correlations are empty when undefined (a constant
/// series or fewer than two scored items).
struct MetricsReport {
    double defect_rate = 0.0;
    ClassMetrics defect;
    ClassMetrics non_defect;
    ClassMetrics weighted_avg;
    ClassMetrics macro_avg;
    double f1_micro = 0.0;
    std::optional<double> spearman;
    std::optional<double> pearson;
    std::size_t n_scored = 0;
    std::size_t n_parse_failed = 0;

    /// n_scored / (n_scored + n_parse_failed)
    double coverage() const;

    bool operator==(const MetricsReport&) const = default;
};

ConfusionCounts confusion(std::span<const corpus::BinaryLabel> predictions,
                          std::span<const corpus::BinaryLabel> golds);

/// Zero denominators give 0 for precision, recall and F1.
ClassMetrics class_metrics(const ConfusionCounts& counts, corpus::BinaryLabel positive);

/// Throws DataError when both supports are zero.
Averages averages(const ClassMetrics& defect, const ClassMetrics& non_defect,
                  std::size_t support_defect, std::size_t support_non_defect);

/// (tp + tn) / total
double f1_micro(const ConfusionCounts& counts);

/// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> fractional_ranks(std::span<const double> values);

/// Throws UndefinedCorrelation on a constant input, DataError on a length
/// mismatch or fewer than two items.
double pearson(std::span<const double> xs, std::span<const double> ys);
double spearman(std::span<const double> xs, std::span<const double> ys);

/// Golds are binarized at `threshold`; correlations pair the Likert gold
/// with the continuous rating when present, else the parsed Likert value.
/// Parse failures only count towards n_parse_failed.
MetricsReport build_report(std::span<const scoring::ScoredDialogue> scored,
                           const std::map<std::string, corpus::LikertRating>& golds,
                           int threshold = corpus::kDefaultDefectThreshold);

// ---------------------------------------------------------------------------
// Serialization

/// Flat, ordered (name, value) view of a report. Nested fields use dotted
/// names ("defect.precision"); an empty value is an undefined metric.
using ReportFields = std::vector<std::pair<std::string, std::optional<double>>>;

ReportFields flatten(const MetricsReport& report);
/// Throws DataError when a required field is missing or undefined.
MetricsReport unflatten(const ReportFields& fields);

nlohmann::json fields_to_json(const ReportFields& fields);
ReportFields fields_from_json(const nlohmann::json& j);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

/// Field-wise arithmetic mean; a field undefined in any input stays
/// undefined. Throws DataError on an empty list or mismatched field names.
ReportFields mean_fields(std::span<const ReportFields> reports);

enum class ReportFormat { json, csv, markdown };

ReportFormat parse_report_format(std::string_view name);

/// Result-table column titles, in order, for the CSV and markdown forms.
const std::vector<std::string>& table_columns();

struct LabelledRow {
    std::string label;
    ReportFields fields;
};

/// Renders one row, or several under a leading "Run" column when labels are
/// given. JSON output is the nested object (an array for several rows).
std::string render_report(const ReportFields& fields, ReportFormat format);
std::string render_table(std::span<const LabelledRow> rows, ReportFormat format);

/// Throws DataError on I/O failure.
void emit_report(const ReportFields& fields, ReportFormat format, std::ostream& out);
void emit_report(const ReportFields& fields, ReportFormat format, const std::filesystem::path& path);

}  // namespace dialoscope::metrics
