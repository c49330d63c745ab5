#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dialoscope/backend.hpp"
#include "dialoscope/corpus.hpp"
#include "dialoscope/metrics.hpp"
#include "dialoscope/prompting.hpp"
#include "dialoscope/scoring.hpp"

namespace dialoscope::harness {

enum class SelectorKind { none, random, bm25, embedding };

std::string_view to_string(SelectorKind kind);
SelectorKind parse_selector(std::string_view name);

struct BackendConfig {
    std::string type = "replay";  // "replay" | "openai"
    std::filesystem::path fixture;
    std::string base_url;
    std::string model;
    int timeout_ms = 60000;
    int max_retries = 3;
    int initial_backoff_ms = 500;
};

struct ExperimentConfig {
    std::filesystem::path dataset_path;
    double test_fraction = 0.10;
    std::uint64_t split_seed = 0;
    prompting::TemplateKind template_kind = prompting::TemplateKind::logits;
    SelectorKind selector = SelectorKind::none;
    std::size_t shots = 0;
    std::vector<std::uint64_t> random_seeds{1, 2, 3};
    BackendConfig backend;
    int k = 5;
    scoring::WeightMode weight_mode = scoring::WeightMode::probability;
    int binarize_threshold = corpus::kDefaultDefectThreshold;
    std::size_t max_prompt_chars = 32000;
    std::optional<std::filesystem::path> embeddings_path;
    std::optional<std::filesystem::path> vocabulary_path;
    double temperature = backend::kDefaultTemperature;
    int top_logprobs = backend::kDefaultTopLogprobs;
    std::optional<int> max_new_tokens;  // 4 for logits, 512 otherwise
    double bm25_k1 = 1.2;
    double bm25_b = 0.75;

    // Execution settings. They do not change results and are left out of
    // the config snapshot stored with an artifact.
    std::size_t parallelism = 4;
    std::filesystem::path output_dir;
    std::optional<std::filesystem::path> cache_path;

    /// Throws ConfigError when the fields are inconsistent.
    void validate() const;
    int effective_max_new_tokens() const;
    int effective_top_logprobs() const;
};

/// Relative paths are resolved against base_dir. Unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Experiment-defining fields only.
nlohmann::json config_snapshot(const ExperimentConfig& config);

struct PlannedItem {
    std::size_t index = 0;  // position in the test split
    corpus::Dialogue dialogue;
    prompting::AssembledPrompt prompt;
    backend::CompletionRequest request;
};

struct ExperimentPlan {
    corpus::DatasetSplit split;
    std::vector<PlannedItem> items;
};

/// Split, example selection and prompt assembly for every test dialogue;
/// no backend calls.
ExperimentPlan plan_experiment(const ExperimentConfig& config);

struct RunRecord {
    std::size_t index = 0;
    std::string dialogue_id;
    std::string prompt_sha256;
    std::string response_key;  // cache digest of the request
    std::vector<std::string> example_ids;
    bool truncated = false;
    scoring::ScoredDialogue scored;

    bool operator==(const RunRecord&) const = default;
};

nlohmann::json to_json(const RunRecord& record);
RunRecord record_from_json(const nlohmann::json& j);

struct RunArtifact {
    nlohmann::json config;
    std::vector<RunRecord> records;  // test-split order
    metrics::MetricsReport report;
    double duration_seconds = 0.0;
    std::filesystem::path directory;
};

std::unique_ptr<backend::CompletionBackend> make_backend(const ExperimentConfig& config);

/// Runs one experiment (the first of random_seeds for the random selector)
/// and writes config.json, records.jsonl, report.json and timing.json into
/// config.output_dir. Records already present for the same config are
/// reused. On a backend failure the completed records are flushed before
/// the error propagates.
RunArtifact run_experiment(const ExperimentConfig& config);
RunArtifact run_experiment(const ExperimentConfig& config, backend::CompletionBackend& backend);

RunArtifact load_artifact(const std::filesystem::path& directory);

/// build_report over the artifact's records and the dataset golds.
metrics::MetricsReport recompute_report(const RunArtifact& artifact, const std::vector<corpus::Dialogue>& test);

struct AggregateReport {
    std::vector<std::uint64_t> seeds;
    std::vector<metrics::MetricsReport> per_seed;
    metrics::ReportFields mean;
};

/// Throws ConfigError when the artifacts differ in anything but the seed.
AggregateReport aggregate_random_runs(std::span<const RunArtifact> artifacts);

nlohmann::json to_json(const AggregateReport& aggregate);

/// One config per random seed, each writing to output_dir/seed-<n>; the
/// config itself for other selectors.
std::vector<ExperimentConfig> expand_seeds(const ExperimentConfig& config);

}  // namespace dialoscope::harness
