// dialoscope: command-line front end for dialogue-quality evaluation runs.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dialoscope/corpus.hpp"
#include "dialoscope/error.hpp"
#include "dialoscope/harness.hpp"
#include "dialoscope/metrics.hpp"

namespace {

namespace fs = std::filesystem;
using namespace dialoscope;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitBackend = 2;
constexpr int kExitData = 3;

void write_output(const std::string& text, const std::string& output) {
    if (output.empty() || output == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(output, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + output);
    out << text;
}

int cmd_run(const std::string& config_path, const std::string& format) {
    const auto config = harness::load_config(config_path);
    const auto fmt = metrics::parse_report_format(format);
    const auto configs = harness::expand_seeds(config);

    std::vector<harness::RunArtifact> artifacts;
    for (const auto& c : configs) {
        std::cerr << "running " << harness::to_string(c.selector) << "-" << c.shots << " ("
                  << prompting::to_string(c.template_kind) << ") -> " << c.output_dir.string() << '\n';
        artifacts.push_back(harness::run_experiment(c));
    }
    if (config.selector == harness::SelectorKind::random) {
        const auto aggregate = harness::aggregate_random_runs(artifacts);
        std::ofstream(config.output_dir / "aggregate.json", std::ios::binary | std::ios::trunc)
            << harness::to_json(aggregate).dump(2) << '\n';
        std::vector<metrics::LabelledRow> rows;
        for (std::size_t i = 0; i < aggregate.per_seed.size(); ++i) {
            rows.push_back({"seed " + std::to_string(aggregate.seeds[i]), metrics::flatten(aggregate.per_seed[i])});
        }
        rows.push_back({"mean", aggregate.mean});
        std::cout << metrics::render_table(rows, fmt);
    } else {
        std::cout << metrics::render_report(metrics::flatten(artifacts.front().report), fmt);
    }
    return kExitOk;
}

int cmd_aggregate(const std::vector<std::string>& dirs, const std::string& format, const std::string& output) {
    std::vector<harness::RunArtifact> artifacts;
    for (const auto& d : dirs) artifacts.push_back(harness::load_artifact(d));
    const auto aggregate = harness::aggregate_random_runs(artifacts);
    const auto fmt = metrics::parse_report_format(format);
    if (fmt == metrics::ReportFormat::json) {
        write_output(harness::to_json(aggregate).dump(2) + '\n', output);
    } else {
        write_output(metrics::render_report(aggregate.mean, fmt), output);
    }
    return kExitOk;
}

int cmd_report(const std::string& dir, const std::string& format, const std::string& output) {
    const auto artifact = harness::load_artifact(dir);
    write_output(metrics::render_report(metrics::flatten(artifact.report), metrics::parse_report_format(format)),
                 output);
    return kExitOk;
}

int cmd_split(const std::string& input, double fraction, std::uint64_t seed, const std::string& out_dir) {
    const fs::path in(input);
    const auto dialogues = corpus::load_dataset(in);
    const auto split = corpus::split_dataset(dialogues, fraction, seed);
    const fs::path dir = out_dir.empty() ? in.parent_path() : fs::path(out_dir);
    if (!dir.empty()) fs::create_directories(dir);
    const auto stem = in.stem().string();
    corpus::save_dataset(dir / (stem + ".train.jsonl"), split.train);
    corpus::save_dataset(dir / (stem + ".test.jsonl"), split.test);
    std::cout << "train " << split.train.size() << " -> " << (dir / (stem + ".train.jsonl")).string() << '\n'
              << "test  " << split.test.size() << " -> " << (dir / (stem + ".test.jsonl")).string() << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Evaluate task-oriented dialogues for user satisfaction with an LLM judge"};
    app.require_subcommand(1);

    std::string config_path;
    std::string format = "md";
    std::string output;
    auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
    run->add_option("--config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
    run->add_option("--format", format, "Report format printed on stdout: md, csv or json");

    std::vector<std::string> dirs;
    auto* aggregate = app.add_subcommand("aggregate", "Average reports of runs that differ only in the random seed");
    aggregate->add_option("dirs", dirs, "Artifact directories")->required()->check(CLI::ExistingDirectory);
    aggregate->add_option("--format", format, "md, csv or json");
    aggregate->add_option("--output", output, "Write to this file instead of stdout");

    std::string artifact_dir;
    auto* report = app.add_subcommand("report", "Render the report of a finished run");
    report->add_option("dir", artifact_dir, "Artifact directory")->required()->check(CLI::ExistingDirectory);
    report->add_option("--format", format, "md, csv or json");
    report->add_option("--output", output, "Write to this file instead of stdout");

    std::string input;
    double fraction = 0.1;
    std::uint64_t seed = 0;
    std::string out_dir;
    auto* split = app.add_subcommand("split", "Split a JSONL dataset into train and test files");
    split->add_option("--input", input, "Dataset JSONL")->required()->check(CLI::ExistingFile);
    split->add_option("--fraction", fraction, "Test fraction in (0, 1)");
    split->add_option("--seed", seed, "Shuffle seed");
    split->add_option("--output-dir", out_dir, "Directory for <stem>.train.jsonl and <stem>.test.jsonl");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*run) return cmd_run(config_path, format);
        if (*aggregate) return cmd_aggregate(dirs, format, output);
        if (*report) return cmd_report(artifact_dir, format, output);
        if (*split) return cmd_split(input, fraction, seed, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << '\n';
        return kExitBackend;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    }
    return kExitOk;
}
