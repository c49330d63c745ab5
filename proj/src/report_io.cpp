#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "dialoscope/error.hpp"
#include "dialoscope/metrics.hpp"

namespace dialoscope::metrics {

using json = nlohmann::json;

namespace {

constexpr const char* kClassBlocks[] = {"defect", "non_defect", "weighted_avg", "macro_avg"};

void push_class(ReportFields& out, const std::string& block, const ClassMetrics& m) {
    out.emplace_back(block + ".precision", m.precision);
    out.emplace_back(block + ".recall", m.recall);
    out.emplace_back(block + ".f1", m.f1);
}

const std::optional<double>& find_field(const ReportFields& fields, std::string_view name) {
    for (const auto& [n, v] : fields) {
        if (n == name) return v;
    }
    throw DataError("report field '" + std::string(name) + "' missing");
}

double required(const ReportFields& fields, std::string_view name) {
    const auto& v = find_field(fields, name);
    if (!v) throw DataError("report field '" + std::string(name) + "' is undefined");
    return *v;
}

std::size_t required_count(const ReportFields& fields, std::string_view name) {
    const double v = required(fields, name);
    if (v < 0.0 || v != std::floor(v)) throw DataError("report field '" + std::string(name) + "' is not a count");
    return static_cast<std::size_t>(v);
}

ClassMetrics class_from(const ReportFields& fields, const std::string& block) {
    return {required(fields, block + ".precision"), required(fields, block + ".recall"),
            required(fields, block + ".f1")};
}

// Shortest representation that parses back to the same double.
std::string shortest(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

}  // namespace

ReportFields flatten(const MetricsReport& r) {
    ReportFields out;
    out.emplace_back("defect_rate", r.defect_rate);
    push_class(out, "defect", r.defect);
    push_class(out, "non_defect", r.non_defect);
    push_class(out, "weighted_avg", r.weighted_avg);
    push_class(out, "macro_avg", r.macro_avg);
    out.emplace_back("spearman", r.spearman);
    out.emplace_back("pearson", r.pearson);
    out.emplace_back("f1_micro", r.f1_micro);
    out.emplace_back("coverage", r.coverage());
    out.emplace_back("n_scored", static_cast<double>(r.n_scored));
    out.emplace_back("n_parse_failed", static_cast<double>(r.n_parse_failed));
    return out;
}

MetricsReport unflatten(const ReportFields& fields) {
    MetricsReport r;
    r.defect_rate = required(fields, "defect_rate");
    r.defect = class_from(fields, "defect");
    r.non_defect = class_from(fields, "non_defect");
    r.weighted_avg = class_from(fields, "weighted_avg");
    r.macro_avg = class_from(fields, "macro_avg");
    r.spearman = find_field(fields, "spearman");
    r.pearson = find_field(fields, "pearson");
    r.f1_micro = required(fields, "f1_micro");
    r.n_scored = required_count(fields, "n_scored");
    r.n_parse_failed = required_count(fields, "n_parse_failed");
    return r;
}

json fields_to_json(const ReportFields& fields) {
    json j = json::object();
    for (const auto& [name, value] : fields) {
        json v = value ? json(*value) : json(nullptr);
        const auto dot = name.find('.');
        if (dot == std::string::npos) {
            j[name] = std::move(v);
        } else {
            j[name.substr(0, dot)][name.substr(dot + 1)] = std::move(v);
        }
    }
    return j;
}

ReportFields fields_from_json(const json& j) {
    if (!j.is_object()) throw DataError("report JSON must be an object");
    // Canonical order comes from a default report's layout.
    ReportFields out = flatten(MetricsReport{});
    for (auto& [name, value] : out) {
        const auto dot = name.find('.');
        const json* node = &j;
        try {
            node = dot == std::string::npos ? &j.at(name) : &j.at(name.substr(0, dot)).at(name.substr(dot + 1));
        } catch (const json::exception&) {
            throw DataError("report JSON lacks field '" + name + "'");
        }
        if (node->is_null()) {
            value.reset();
        } else if (node->is_number()) {
            value = node->get<double>();
        } else {
            throw DataError("report JSON field '" + name + "' is not a number");
        }
    }
    return out;
}

json to_json(const MetricsReport& report) { return fields_to_json(flatten(report)); }

MetricsReport report_from_json(const json& j) { return unflatten(fields_from_json(j)); }

ReportFields mean_fields(std::span<const ReportFields> reports) {
    if (reports.empty()) throw DataError("cannot average zero reports");
    ReportFields out = reports.front();
    for (auto& [name, value] : out) {
        if (value) value = 0.0;
    }
    for (const auto& r : reports) {
        if (r.size() != out.size()) throw DataError("reports have different field sets");
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (r[i].first != out[i].first) throw DataError("reports have different field sets");
            if (!r[i].second) {
                out[i].second.reset();
            } else if (out[i].second) {
                *out[i].second += *r[i].second;
            }
        }
    }
    const double n = static_cast<double>(reports.size());
    for (auto& [name, value] : out) {
        if (value) *value /= n;
    }
    return out;
}

ReportFormat parse_report_format(std::string_view name) {
    if (name == "json") return ReportFormat::json;
    if (name == "csv") return ReportFormat::csv;
    if (name == "md" || name == "markdown") return ReportFormat::markdown;
    throw ConfigError("unknown report format: " + std::string(name));
}

namespace {

// Field name per table column, parallel to table_columns().
const std::vector<std::string>& column_fields() {
    static const std::vector<std::string> fields = [] {
        std::vector<std::string> f{"defect_rate"};
        for (const char* block : kClassBlocks) {
            for (const char* m : {".precision", ".recall", ".f1"}) f.push_back(std::string(block) + m);
        }
        f.insert(f.end(), {"spearman", "pearson", "f1_micro", "coverage"});
        return f;
    }();
    return fields;
}

std::string csv_cell(const std::optional<double>& v) { return v ? shortest(*v) : ""; }

std::string md_cell(const std::string& field, const std::optional<double>& v) {
    if (!v) return "n/a";
    if (field == "defect_rate") return fixed(*v * 100.0, 0) + "%";
    return fixed(*v, 2);
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

const std::vector<std::string>& table_columns() {
    static const std::vector<std::string> columns = {
        "Defect Rate",
        "Defect Precision", "Defect Recall", "Defect F1",
        "Non-Defect Precision", "Non-Defect Recall", "Non-Defect F1",
        "Weighted Precision", "Weighted Recall", "Weighted F1",
        "Macro Precision", "Macro Recall", "Macro F1",
        "Spearman", "Pearson", "F1-micro", "Coverage"};
    return columns;
}

std::string render_table(std::span<const LabelledRow> rows, ReportFormat format) {
    const bool labelled = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return !r.label.empty(); });
    std::ostringstream os;
    switch (format) {
        case ReportFormat::json: {
            if (rows.size() == 1 && !labelled) {
                os << fields_to_json(rows.front().fields).dump(2) << '\n';
                break;
            }
            json arr = json::array();
            for (const auto& r : rows) arr.push_back({{"label", r.label}, {"report", fields_to_json(r.fields)}});
            os << arr.dump(2) << '\n';
            break;
        }
        case ReportFormat::csv: {
            if (labelled) os << "Run,";
            for (std::size_t i = 0; i < table_columns().size(); ++i) os << (i ? "," : "") << table_columns()[i];
            os << '\n';
            for (const auto& r : rows) {
                if (labelled) os << csv_escape(r.label) << ',';
                for (std::size_t i = 0; i < column_fields().size(); ++i) {
                    os << (i ? "," : "") << csv_cell(find_field(r.fields, column_fields()[i]));
                }
                os << '\n';
            }
            break;
        }
        case ReportFormat::markdown: {
            os << '|';
            if (labelled) os << " Run |";
            for (const auto& c : table_columns()) os << ' ' << c << " |";
            os << "\n|";
            if (labelled) os << "---|";
            for (std::size_t i = 0; i < table_columns().size(); ++i) os << "---:|";
            os << '\n';
            for (const auto& r : rows) {
                os << '|';
                if (labelled) os << ' ' << r.label << " |";
                for (const auto& f : column_fields()) os << ' ' << md_cell(f, find_field(r.fields, f)) << " |";
                os << '\n';
            }
            break;
        }
    }
    return os.str();
}

std::string render_report(const ReportFields& fields, ReportFormat format) {
    const LabelledRow row{"", fields};
    return render_table(std::span<const LabelledRow>(&row, 1), format);
}

void emit_report(const ReportFields& fields, ReportFormat format, std::ostream& out) {
    out << render_report(fields, format);
    if (!out) throw DataError("report write failed");
}

void emit_report(const ReportFields& fields, ReportFormat format, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write report to " + path.string());
    emit_report(fields, format, out);
}

}  // namespace dialoscope::metrics
