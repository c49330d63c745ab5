#include "dialoscope/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "dialoscope/error.hpp"
#include "dialoscope/retrieval.hpp"
#include "random.hpp"
#include "str_util.hpp"

namespace dialoscope::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(SelectorKind kind) {
    switch (kind) {
        case SelectorKind::none: return "none";
        case SelectorKind::random: return "random";
        case SelectorKind::bm25: return "bm25";
        case SelectorKind::embedding: return "embedding";
    }
    return "unknown";
}

SelectorKind parse_selector(std::string_view name) {
    if (name == "none") return SelectorKind::none;
    if (name == "random") return SelectorKind::random;
    if (name == "bm25") return SelectorKind::bm25;
    if (name == "embedding" || name == "bert") return SelectorKind::embedding;
    throw ConfigError("unknown selector: " + std::string(name));
}

void ExperimentConfig::validate() const {
    if (dataset_path.empty()) throw ConfigError("dataset_path is required");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must lie in (0, 1)");
    if ((selector == SelectorKind::none) != (shots == 0)) {
        throw ConfigError("selector \"none\" goes with shots = 0, and any other selector with shots >= 1");
    }
    if (selector == SelectorKind::embedding && !embeddings_path) {
        throw ConfigError("the embedding selector needs embeddings_path");
    }
    if (selector == SelectorKind::random && random_seeds.empty()) {
        throw ConfigError("the random selector needs at least one entry in random_seeds");
    }
    if (k < 1 || k > 5) throw ConfigError("k must be in 1..5");
    if (binarize_threshold < 1 || binarize_threshold > 4) throw ConfigError("binarize_threshold must be in 1..4");
    if (max_prompt_chars == 0) throw ConfigError("max_prompt_chars must be positive");
    if (parallelism == 0) throw ConfigError("parallelism must be positive");
    if (template_kind == prompting::TemplateKind::logits && top_logprobs < backend::kDefaultTopLogprobs) {
        throw ConfigError("the logits template needs top_logprobs >= 5");
    }
    if (top_logprobs < 0 || top_logprobs > backend::kMaxTopLogprobs) throw ConfigError("top_logprobs must be in [0, 20]");
    if (max_new_tokens && *max_new_tokens < 1) throw ConfigError("max_new_tokens must be positive");
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    if (!(bm25_k1 > 0.0) || !(bm25_b >= 0.0 && bm25_b <= 1.0)) throw ConfigError("bm25 needs k1 > 0 and b in [0, 1]");
    if (backend.type == "replay") {
        if (backend.fixture.empty()) throw ConfigError("the replay backend needs backend.fixture");
    } else if (backend.type == "openai") {
        if (backend.base_url.empty()) throw ConfigError("the openai backend needs backend.base_url");
        if (backend.model.empty()) throw ConfigError("the openai backend needs backend.model");
    } else {
        throw ConfigError("unknown backend type: " + backend.type);
    }
}

int ExperimentConfig::effective_max_new_tokens() const {
    if (max_new_tokens) return *max_new_tokens;
    return template_kind == prompting::TemplateKind::logits ? 4 : 512;
}

int ExperimentConfig::effective_top_logprobs() const {
    return template_kind == prompting::TemplateKind::logits ? top_logprobs : 0;
}

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
}

template <typename T>
T get_as(const json& j, const char* key) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config field '") + key + "' has the wrong type");
    }
}

BackendConfig backend_from_json(const json& j, const fs::path& base) {
    if (!j.is_object()) throw ConfigError("config field 'backend' must be an object");
    BackendConfig b;
    for (const auto& [key, value] : j.items()) {
        if (key == "type") b.type = get_as<std::string>(value, "backend.type");
        else if (key == "fixture") b.fixture = resolve(base, get_as<std::string>(value, "backend.fixture"));
        else if (key == "base_url") b.base_url = get_as<std::string>(value, "backend.base_url");
        else if (key == "model") b.model = get_as<std::string>(value, "backend.model");
        else if (key == "timeout_ms") b.timeout_ms = get_as<int>(value, "backend.timeout_ms");
        else if (key == "max_retries") b.max_retries = get_as<int>(value, "backend.max_retries");
        else if (key == "initial_backoff_ms") b.initial_backoff_ms = get_as<int>(value, "backend.initial_backoff_ms");
        else throw ConfigError("unknown config field 'backend." + key + "'");
    }
    return b;
}

scoring::WeightMode parse_weight_mode(const std::string& s) {
    if (s == "probability") return scoring::WeightMode::probability;
    if (s == "raw_logprob") return scoring::WeightMode::raw_logprob;
    throw ConfigError("unknown weight_mode: " + s);
}

std::string_view to_string(scoring::WeightMode m) {
    return m == scoring::WeightMode::probability ? "probability" : "raw_logprob";
}

}  // namespace

ExperimentConfig config_from_json(const json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    ExperimentConfig c;
    for (const auto& [key, v] : j.items()) {
        const char* k = key.c_str();
        if (key == "dataset_path") c.dataset_path = resolve(base_dir, get_as<std::string>(v, k));
        else if (key == "test_fraction") c.test_fraction = get_as<double>(v, k);
        else if (key == "split_seed") c.split_seed = get_as<std::uint64_t>(v, k);
        else if (key == "template_kind") c.template_kind = prompting::parse_template_kind(get_as<std::string>(v, k));
        else if (key == "selector") c.selector = parse_selector(get_as<std::string>(v, k));
        else if (key == "shots") c.shots = get_as<std::size_t>(v, k);
        else if (key == "random_seeds") c.random_seeds = get_as<std::vector<std::uint64_t>>(v, k);
        else if (key == "backend") c.backend = backend_from_json(v, base_dir);
        else if (key == "k") c.k = get_as<int>(v, k);
        else if (key == "weight_mode") c.weight_mode = parse_weight_mode(get_as<std::string>(v, k));
        else if (key == "binarize_threshold") c.binarize_threshold = get_as<int>(v, k);
        else if (key == "max_prompt_chars") c.max_prompt_chars = get_as<std::size_t>(v, k);
        else if (key == "embeddings_path") {
            if (!v.is_null()) c.embeddings_path = resolve(base_dir, get_as<std::string>(v, k));
        } else if (key == "vocabulary_path") {
            if (!v.is_null()) c.vocabulary_path = resolve(base_dir, get_as<std::string>(v, k));
        } else if (key == "temperature") c.temperature = get_as<double>(v, k);
        else if (key == "top_logprobs") c.top_logprobs = get_as<int>(v, k);
        else if (key == "max_new_tokens") {
            if (!v.is_null()) c.max_new_tokens = get_as<int>(v, k);
        } else if (key == "bm25_k1") c.bm25_k1 = get_as<double>(v, k);
        else if (key == "bm25_b") c.bm25_b = get_as<double>(v, k);
        else if (key == "parallelism") c.parallelism = get_as<std::size_t>(v, k);
        else if (key == "output_dir") c.output_dir = resolve(base_dir, get_as<std::string>(v, k));
        else if (key == "cache_path") {
            if (!v.is_null()) c.cache_path = resolve(base_dir, get_as<std::string>(v, k));
        } else throw ConfigError("unknown config field '" + key + "'");
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j, path.parent_path());
}

json config_snapshot(const ExperimentConfig& c) {
    json backend{{"type", c.backend.type}, {"model", c.backend.model}};
    if (c.backend.type == "replay") backend["fixture"] = c.backend.fixture.generic_string();
    else backend["base_url"] = c.backend.base_url;
    auto opt_path = [](const std::optional<fs::path>& p) { return p ? json(p->generic_string()) : json(nullptr); };
    return {{"dataset_path", c.dataset_path.generic_string()},
            {"test_fraction", c.test_fraction},
            {"split_seed", c.split_seed},
            {"template_kind", prompting::to_string(c.template_kind)},
            {"selector", to_string(c.selector)},
            {"shots", c.shots},
            {"random_seeds", c.random_seeds},
            {"backend", backend},
            {"k", c.k},
            {"weight_mode", to_string(c.weight_mode)},
            {"binarize_threshold", c.binarize_threshold},
            {"max_prompt_chars", c.max_prompt_chars},
            {"embeddings_path", opt_path(c.embeddings_path)},
            {"vocabulary_path", opt_path(c.vocabulary_path)},
            {"temperature", c.temperature},
            {"top_logprobs", c.effective_top_logprobs()},
            {"max_new_tokens", c.effective_max_new_tokens()},
            {"bm25_k1", c.bm25_k1},
            {"bm25_b", c.bm25_b}};
}

// ---------------------------------------------------------------------------
// Planning

namespace {

class ExampleSelector {
public:
    ExampleSelector(const ExperimentConfig& config, const std::vector<corpus::Dialogue>& train)
        : config_(config) {
        for (const auto& d : train) {
            if (!d.gold) continue;
            pool_.push_back(&d);
            pool_ids_.push_back(d.id);
        }
        switch (config.selector) {
            case SelectorKind::bm25: {
                std::vector<retrieval::IndexDocument> docs;
                docs.reserve(pool_.size());
                for (const auto* d : pool_) docs.push_back({d->id, corpus::serialize_dialogue(*d)});
                bm25_ = retrieval::Bm25Index::build(docs, {config.bm25_k1, config.bm25_b});
                break;
            }
            case SelectorKind::embedding:
                all_embeddings_ = retrieval::load_embeddings(*config.embeddings_path);
                train_embeddings_ = all_embeddings_.subset(pool_ids_);
                break;
            default:
                break;
        }
        for (std::size_t i = 0; i < pool_.size(); ++i) by_id_.emplace(pool_ids_[i], pool_[i]);
    }

    std::vector<prompting::InContextExample> select(const corpus::Dialogue& target) const {
        if (config_.selector == SelectorKind::none) return {};
        retrieval::SelectionResult result;
        switch (config_.selector) {
            case SelectorKind::bm25:
                result = retrieval::select_bm25(bm25_, corpus::serialize_dialogue(target), config_.shots);
                break;
            case SelectorKind::embedding:
                result = retrieval::select_embedding(train_embeddings_, all_embeddings_.at(target.id), config_.shots);
                break;
            case SelectorKind::random: {
                const auto seed = detail::splitmix64(config_.random_seeds.front() ^ detail::fnv1a64(target.id));
                result = retrieval::select_random(pool_ids_, config_.shots, seed);
                break;
            }
            case SelectorKind::none:
                break;
        }
        std::vector<prompting::InContextExample> out;
        out.reserve(result.selected.size());
        for (const auto& s : result.selected) out.push_back(prompting::InContextExample::from(*by_id_.at(s.doc_id)));
        return out;
    }

private:
    const ExperimentConfig& config_;
    std::vector<const corpus::Dialogue*> pool_;
    std::vector<std::string> pool_ids_;
    std::unordered_map<std::string, const corpus::Dialogue*> by_id_;
    retrieval::Bm25Index bm25_;
    retrieval::EmbeddingStore all_embeddings_;
    retrieval::EmbeddingStore train_embeddings_;
};

}  // namespace

ExperimentPlan plan_experiment(const ExperimentConfig& config) {
    config.validate();
    const auto dataset = corpus::load_dataset(config.dataset_path);
    ExperimentPlan plan;
    plan.split = corpus::split_dataset(dataset, config.test_fraction, config.split_seed);

    std::unordered_set<std::string> test_ids;
    for (const auto& d : plan.split.test) {
        if (!d.gold) throw DataError("test dialogue " + d.id + " has no gold rating");
        test_ids.insert(d.id);
    }

    const ExampleSelector selector(config, plan.split.train);
    plan.items.reserve(plan.split.test.size());
    for (std::size_t i = 0; i < plan.split.test.size(); ++i) {
        const auto& target = plan.split.test[i];
        const auto examples = selector.select(target);
        for (const auto& e : examples) {
            if (test_ids.count(e.dialogue.id) != 0) {
                throw Error("in-context example " + e.dialogue.id + " leaked from the test split");
            }
        }
        PlannedItem item;
        item.index = i;
        item.dialogue = target;
        item.prompt = prompting::fit_to_budget(
            prompting::render_few_shot(config.template_kind, target, examples), config.max_prompt_chars);
        item.request.prompt = item.prompt.text;
        item.request.max_new_tokens = config.effective_max_new_tokens();
        item.request.temperature = config.temperature;
        item.request.top_logprobs = config.effective_top_logprobs();
        item.request.model = config.backend.model;
        plan.items.push_back(std::move(item));
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Records and artifacts

json to_json(const RunRecord& r) {
    return {{"index", r.index},
            {"dialogue_id", r.dialogue_id},
            {"prompt_sha256", r.prompt_sha256},
            {"response_key", r.response_key},
            {"example_ids", r.example_ids},
            {"truncated", r.truncated},
            {"scored", scoring::to_json(r.scored)}};
}

RunRecord record_from_json(const json& j) {
    try {
        RunRecord r;
        r.index = j.at("index").get<std::size_t>();
        r.dialogue_id = j.at("dialogue_id").get<std::string>();
        r.prompt_sha256 = j.at("prompt_sha256").get<std::string>();
        r.response_key = j.at("response_key").get<std::string>();
        r.example_ids = j.at("example_ids").get<std::vector<std::string>>();
        r.truncated = j.at("truncated").get<bool>();
        r.scored = scoring::scored_from_json(j.at("scored"));
        return r;
    } catch (const json::exception& e) {
        throw DataError(std::string("run record: ") + e.what());
    }
}

std::unique_ptr<backend::CompletionBackend> make_backend(const ExperimentConfig& config) {
    if (config.backend.type == "replay") {
        return std::make_unique<backend::ReplayBackend>(backend::ReplayBackend::load(config.backend.fixture));
    }
    auto http = backend::HttpBackendConfig::from_environment(config.backend.base_url);
    http.timeout = std::chrono::milliseconds(config.backend.timeout_ms);
    http.max_retries = config.backend.max_retries;
    http.initial_backoff = std::chrono::milliseconds(config.backend.initial_backoff_ms);
    http.max_concurrency = config.parallelism;
    return std::make_unique<backend::OpenAiCompletionsBackend>(std::move(http));
}

namespace {

constexpr const char* kConfigFile = "config.json";
constexpr const char* kRecordsFile = "records.jsonl";
constexpr const char* kReportFile = "report.json";
constexpr const char* kTimingFile = "timing.json";

void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp.string());
        out << text;
        if (!out) throw DataError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string records_text(const std::vector<std::optional<RunRecord>>& records) {
    std::string out;
    for (const auto& r : records) {
        if (r) out += to_json(*r).dump() + '\n';
    }
    return out;
}

std::vector<RunRecord> read_records(const fs::path& path) {
    std::vector<RunRecord> out;
    std::ifstream in(path, std::ios::binary);
    if (!in) return out;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (detail::trim(raw).empty()) continue;
        try {
            out.push_back(record_from_json(json::parse(raw)));
        } catch (const json::exception& e) {
            throw DataError(path.string() + " line " + std::to_string(line) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path.string() + " line " + std::to_string(line) + ": " + e.what());
        }
    }
    return out;
}

json read_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

scoring::RatingVocabulary vocabulary_for(const ExperimentConfig& config) {
    return config.vocabulary_path ? scoring::RatingVocabulary::load(*config.vocabulary_path)
                                  : scoring::RatingVocabulary::defaults();
}

}  // namespace

RunArtifact run_experiment(const ExperimentConfig& config) {
    auto backend = make_backend(config);
    return run_experiment(config, *backend);
}

RunArtifact run_experiment(const ExperimentConfig& config, backend::CompletionBackend& inner) {
    const auto started = std::chrono::steady_clock::now();
    config.validate();
    if (config.output_dir.empty()) throw ConfigError("output_dir is required");

    const auto plan = plan_experiment(config);
    const auto vocab = vocabulary_for(config);
    const json snapshot = config_snapshot(config);

    fs::create_directories(config.output_dir);
    const fs::path config_path = config.output_dir / kConfigFile;
    const fs::path records_path = config.output_dir / kRecordsFile;

    std::vector<std::optional<RunRecord>> results(plan.items.size());
    if (fs::exists(config_path)) {
        if (read_json(config_path) != snapshot) {
            throw ConfigError(config.output_dir.string() + " holds an artifact for a different config");
        }
        // Resume: keep records whose prompt still matches the plan.
        for (auto& r : read_records(records_path)) {
            if (r.index < results.size() && plan.items[r.index].dialogue.id == r.dialogue_id &&
                backend::sha256_hex(plan.items[r.index].request.prompt) == r.prompt_sha256) {
                results[r.index] = std::move(r);
            }
        }
    } else {
        write_text(config_path, snapshot.dump(2) + '\n');
    }
    write_text(records_path, records_text(results));

    std::optional<backend::ResponseCache> cache;
    std::optional<backend::CachingBackend> caching;
    if (config.cache_path) {
        cache.emplace(*config.cache_path);
        caching.emplace(inner, *cache);
    }
    backend::CompletionBackend& client = caching ? static_cast<backend::CompletionBackend&>(*caching) : inner;
    const std::string backend_id = inner.id();
    const scoring::LogitsOptions logits{config.k, config.weight_mode};

    std::mutex write_mutex;
    std::ofstream progress(records_path, std::ios::binary | std::ios::app);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;

    auto worker = [&] {
        for (;;) {
            if (failed.load()) return;
            const std::size_t i = next.fetch_add(1);
            if (i >= plan.items.size()) return;
            if (results[i]) continue;
            const auto& item = plan.items[i];
            try {
                const auto response = client.complete(item.request);
                RunRecord r;
                r.index = i;
                r.dialogue_id = item.dialogue.id;
                r.prompt_sha256 = backend::sha256_hex(item.request.prompt);
                r.response_key = backend::make_cache_key(backend_id, item.request).digest;
                r.example_ids = item.prompt.example_ids;
                r.truncated = item.prompt.truncated;
                r.scored = config.template_kind == prompting::TemplateKind::logits
                               ? scoring::score_logits_response(item.dialogue.id, response, vocab, logits)
                               : scoring::score_generated_response(item.dialogue.id, response, config.template_kind);
                std::lock_guard lock(write_mutex);
                progress << to_json(r).dump() << '\n';
                progress.flush();
                results[i] = std::move(r);
            } catch (...) {
                std::lock_guard lock(write_mutex);
                if (!first_error) first_error = std::current_exception();
                failed.store(true);
                return;
            }
        }
    };

    const std::size_t n_threads = std::min(config.parallelism, std::max<std::size_t>(plan.items.size(), 1));
    std::vector<std::thread> threads;
    threads.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    progress.close();

    // Completion order never reaches the final file.
    write_text(records_path, records_text(results));
    if (first_error) std::rethrow_exception(first_error);

    RunArtifact artifact;
    artifact.config = snapshot;
    artifact.directory = config.output_dir;
    for (auto& r : results) artifact.records.push_back(std::move(*r));
    artifact.report = recompute_report(artifact, plan.split.test);
    write_text(config.output_dir / kReportFile, metrics::to_json(artifact.report).dump(2) + '\n');

    artifact.duration_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_text(config.output_dir / kTimingFile,
               json{{"duration_seconds", artifact.duration_seconds}}.dump(2) + '\n');
    return artifact;
}

metrics::MetricsReport recompute_report(const RunArtifact& artifact, const std::vector<corpus::Dialogue>& test) {
    std::map<std::string, corpus::LikertRating> golds;
    for (const auto& d : test) {
        if (d.gold) golds.emplace(d.id, *d.gold);
    }
    std::vector<scoring::ScoredDialogue> scored;
    scored.reserve(artifact.records.size());
    for (const auto& r : artifact.records) scored.push_back(r.scored);
    const int threshold = artifact.config.value("binarize_threshold", corpus::kDefaultDefectThreshold);
    return metrics::build_report(scored, golds, threshold);
}

RunArtifact load_artifact(const fs::path& directory) {
    RunArtifact a;
    a.directory = directory;
    a.config = read_json(directory / kConfigFile);
    a.records = read_records(directory / kRecordsFile);
    a.report = metrics::report_from_json(read_json(directory / kReportFile));
    if (fs::exists(directory / kTimingFile)) {
        a.duration_seconds = read_json(directory / kTimingFile).value("duration_seconds", 0.0);
    }
    return a;
}

AggregateReport aggregate_random_runs(std::span<const RunArtifact> artifacts) {
    if (artifacts.empty()) throw ConfigError("aggregate needs at least one artifact");
    auto without_seed = [](json j) {
        j.erase("random_seeds");
        return j;
    };
    const json reference = without_seed(artifacts.front().config);
    AggregateReport out;
    std::vector<metrics::ReportFields> flat;
    for (const auto& a : artifacts) {
        if (without_seed(a.config) != reference) {
            throw ConfigError("artifact " + a.directory.string() + " differs from " +
                              artifacts.front().directory.string() + " in more than the random seed");
        }
        const auto seeds = a.config.value("random_seeds", std::vector<std::uint64_t>{});
        out.seeds.push_back(seeds.empty() ? 0 : seeds.front());
        out.per_seed.push_back(a.report);
        flat.push_back(metrics::flatten(a.report));
    }
    out.mean = metrics::mean_fields(flat);
    return out;
}

json to_json(const AggregateReport& a) {
    json per_seed = json::array();
    for (std::size_t i = 0; i < a.per_seed.size(); ++i) {
        per_seed.push_back({{"seed", a.seeds[i]}, {"report", metrics::to_json(a.per_seed[i])}});
    }
    return {{"seeds", a.seeds}, {"per_seed", std::move(per_seed)}, {"mean", metrics::fields_to_json(a.mean)}};
}

std::vector<ExperimentConfig> expand_seeds(const ExperimentConfig& config) {
    if (config.selector != SelectorKind::random) return {config};
    std::vector<ExperimentConfig> out;
    for (auto seed : config.random_seeds) {
        auto c = config;
        c.random_seeds = {seed};
        c.output_dir = config.output_dir / ("seed-" + std::to_string(seed));
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace dialoscope::harness
