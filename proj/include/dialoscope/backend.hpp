#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace dialoscope::backend {

inline constexpr double kDefaultTemperature = 0.7;
inline constexpr int kDefaultTopLogprobs = 5;
inline constexpr int kMaxTopLogprobs = 20;

struct CompletionRequest {
    std::string prompt;
    int max_new_tokens = 4;
    double temperature = kDefaultTemperature;
    int top_logprobs = kDefaultTopLogprobs;
    std::string model;

    /// Throws ConfigError when a field is out of range.
    void validate() const;

    bool operator==(const CompletionRequest&) const = default;
};

/// Candidate tokens with their log-probabilities at one generated position.
struct TokenCandidates {
    std::size_t position = 0;
    std::map<std::string, double> candidates;

    bool operator==(const TokenCandidates&) const = default;
};

struct CompletionResponse {
    std::string text;
    std::vector<TokenCandidates> token_candidates;
    std::string backend_id;
    bool cached = false;

    bool operator==(const CompletionResponse&) const = default;
};

/// `cached` is not serialized; it describes how a response was obtained.
nlohmann::json to_json(const CompletionResponse& response);
/// Throws DataError on a malformed object.
CompletionResponse response_from_json(const nlohmann::json& j);

/// Checks logprobs are finite and <= 0 and that the probabilities at one
/// position sum to at most 1 + 1e-6; keeps only the `limit` most likely
/// tokens. Throws ProtocolError on violations.
void sanitize_candidates(TokenCandidates& candidates, int limit);

struct CacheKey {
    std::string digest;  // 64 hex chars, SHA-256

    bool operator==(const CacheKey&) const = default;
};

std::string sha256_hex(std::string_view data);

CacheKey make_cache_key(std::string_view backend_id, const CompletionRequest& request);

class CompletionBackend {
public:
    virtual ~CompletionBackend() = default;

    virtual std::string id() const = 0;
    virtual CompletionResponse complete(const CompletionRequest& request) = 0;
};

/// Request fields a fixture entry is matched on. Only the prompt is
/// mandatory; absent fields match any request value.
struct ReplayKeyFields {
    std::string prompt;
    std::optional<std::string> model;
    std::optional<int> max_new_tokens;
    std::optional<double> temperature;
    std::optional<int> top_logprobs;

    bool matches(const CompletionRequest& request) const;
};

struct ReplayEntry {
    ReplayKeyFields key_fields;
    CompletionResponse response;
};

/// Serves pre-recorded responses. Thread-safe; entries never change after
/// construction.
class ReplayBackend final : public CompletionBackend {
public:
    explicit ReplayBackend(std::vector<ReplayEntry> entries);

    /// JSONL of {"key_fields": {...}, "response": {...}}.
    static ReplayBackend parse(std::istream& in);
    static ReplayBackend load(const std::filesystem::path& path);

    std::string id() const override { return "replay"; }
    /// Throws CapabilityError when no entry matches, or when logprobs were
    /// requested but the entry has none.
    CompletionResponse complete(const CompletionRequest& request) override;

    std::size_t size() const noexcept { return entries_.size(); }

private:
    std::vector<ReplayEntry> entries_;
    std::unordered_multimap<std::string, std::size_t> by_prompt_;
};

void write_replay_fixture(std::ostream& out, std::span<const ReplayEntry> entries);

struct HttpBackendConfig {
    std::string base_url;  // scheme://host[:port][/prefix]
    std::string api_key;   // sent as a bearer token when non-empty
    std::chrono::milliseconds timeout{60000};
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{500};
    std::size_t max_concurrency = 4;

    /// api_key from DIALOSCOPE_API_KEY, everything else defaulted.
    static HttpBackendConfig from_environment(std::string base_url);
};

/// Client for the OpenAI-compatible /v1/completions endpoint.
class OpenAiCompletionsBackend final : public CompletionBackend {
public:
    explicit OpenAiCompletionsBackend(HttpBackendConfig config);
    ~OpenAiCompletionsBackend() override;

    std::string id() const override;
    CompletionResponse complete(const CompletionRequest& request) override;

    /// Parses a /v1/completions body. Exposed for tests.
    static CompletionResponse parse_completion_body(std::string_view body,
                                                    const CompletionRequest& request,
                                                    const std::string& backend_id);

private:
    HttpBackendConfig config_;
    std::string origin_;       // scheme://host:port
    std::string path_prefix_;  // may be empty
    std::unique_ptr<std::counting_semaphore<1024>> slots_;
};

/// Append-only JSONL response store keyed by CacheKey digests. Reads may run
/// concurrently; writes are serialized.
class ResponseCache {
public:
    /// Loads existing records; throws DataError naming the line of the
    /// first corrupt record.
    explicit ResponseCache(std::filesystem::path path);

    std::optional<CompletionResponse> lookup(const CacheKey& key) const;
    /// Last writer wins. Throws DataError on I/O failure.
    void put(const CacheKey& key, const CompletionResponse& response);

    std::size_t size() const;
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::string, CompletionResponse> entries_;
    std::ofstream out_;
};

std::optional<CompletionResponse> cache_lookup(const ResponseCache& store, const CacheKey& key);
void cache_put(ResponseCache& store, const CacheKey& key, const CompletionResponse& response);

/// Consults the cache before delegating, and stores fresh responses.
class CachingBackend final : public CompletionBackend {
public:
    CachingBackend(CompletionBackend& inner, ResponseCache& cache) : inner_(inner), cache_(cache) {}

    std::string id() const override { return inner_.id(); }
    CompletionResponse complete(const CompletionRequest& request) override;

private:
    CompletionBackend& inner_;
    ResponseCache& cache_;
};

}  // namespace dialoscope::backend
