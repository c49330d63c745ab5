#include <algorithm>
#include <cstdlib>
#include <thread>

#include "httplib.h"

#include "dialoscope/backend.hpp"
#include "dialoscope/error.hpp"

namespace dialoscope::backend {

using json = nlohmann::json;

HttpBackendConfig HttpBackendConfig::from_environment(std::string base_url) {
    HttpBackendConfig config;
    config.base_url = std::move(base_url);
    if (const char* key = std::getenv("DIALOSCOPE_API_KEY")) config.api_key = key;
    return config;
}

namespace {

// Splits scheme://host[:port][/prefix] into origin and path prefix.
std::pair<std::string, std::string> split_base_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("backend base_url needs a scheme: " + url);
    }
    const auto scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") throw ConfigError("unsupported URL scheme: " + scheme);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, ""};
    std::string prefix = url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, path_start), prefix};
}

std::string excerpt(const std::string& body) {
    constexpr std::size_t kMax = 200;
    return body.size() <= kMax ? body : body.substr(0, kMax) + "...";
}

bool transient_status(int status) { return status == 408 || status == 429 || status >= 500; }

class SlotGuard {
public:
    explicit SlotGuard(std::counting_semaphore<1024>& s) : s_(s) { s_.acquire(); }
    ~SlotGuard() { s_.release(); }
    SlotGuard(const SlotGuard&) = delete;
    SlotGuard& operator=(const SlotGuard&) = delete;

private:
    std::counting_semaphore<1024>& s_;
};

}  // namespace

OpenAiCompletionsBackend::OpenAiCompletionsBackend(HttpBackendConfig config)
    : config_(std::move(config)) {
    std::tie(origin_, path_prefix_) = split_base_url(config_.base_url);
    if (config_.max_retries < 0) throw ConfigError("max_retries must be >= 0");
    const auto slots = static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(config_.max_concurrency, 1, 1024));
    slots_ = std::make_unique<std::counting_semaphore<1024>>(slots);
}

OpenAiCompletionsBackend::~OpenAiCompletionsBackend() = default;

std::string OpenAiCompletionsBackend::id() const { return "openai:" + config_.base_url; }

CompletionResponse OpenAiCompletionsBackend::parse_completion_body(std::string_view body,
                                                                   const CompletionRequest& request,
                                                                   const std::string& backend_id) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::parse_error& e) {
        throw ProtocolError(200, std::string("completion body is not JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
        throw ProtocolError(200, "completion body has no choices: " + excerpt(std::string(body)));
    }
    const auto& choice = j["choices"][0];
    CompletionResponse r;
    r.backend_id = backend_id;
    if (choice.contains("text") && choice["text"].is_string()) r.text = choice["text"].get<std::string>();

    if (request.top_logprobs > 0) {
        const json* top = nullptr;
        if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
            const auto& lp = choice["logprobs"];
            if (lp.contains("top_logprobs") && lp["top_logprobs"].is_array()) top = &lp["top_logprobs"];
        }
        if (!top || top->empty()) {
            throw CapabilityError("backend " + backend_id + " returned no top_logprobs although " +
                                  std::to_string(request.top_logprobs) + " were requested");
        }
        for (std::size_t pos = 0; pos < top->size(); ++pos) {
            TokenCandidates tc;
            tc.position = pos;
            const auto& entry = (*top)[pos];
            if (entry.is_object()) {
                for (const auto& [token, value] : entry.items()) {
                    if (!value.is_number()) {
                        throw ProtocolError(200, "logprob for token '" + token + "' is not a number");
                    }
                    tc.candidates.emplace(token, value.get<double>());
                }
            } else if (!entry.is_null()) {
                throw ProtocolError(200, "top_logprobs entry is neither an object nor null");
            }
            sanitize_candidates(tc, request.top_logprobs);
            r.token_candidates.push_back(std::move(tc));
        }
    }
    return r;
}

CompletionResponse OpenAiCompletionsBackend::complete(const CompletionRequest& request) {
    request.validate();
    SlotGuard slot(*slots_);

    json payload{{"model", request.model},
                 {"prompt", request.prompt},
                 {"max_tokens", request.max_new_tokens},
                 {"temperature", request.temperature}};
    if (request.top_logprobs > 0) payload["logprobs"] = request.top_logprobs;
    const std::string body = payload.dump();
    const std::string path = path_prefix_ + "/v1/completions";

    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

    auto backoff = config_.initial_backoff;
    std::string last_failure;
    int last_status = 0;
    std::string last_body;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
        httplib::Client client(origin_);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
        client.set_connection_timeout(secs.count(), usecs.count());
        client.set_read_timeout(secs.count(), usecs.count());
        client.set_write_timeout(secs.count(), usecs.count());

        auto res = client.Post(path, headers, body, "application/json");
        if (!res) {
            last_status = 0;
            last_failure = httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 200 && res->status < 300) {
            return parse_completion_body(res->body, request, id());
        }
        last_status = res->status;
        last_body = res->body;
        if (!transient_status(res->status)) break;
    }
    const std::string tries = std::to_string(config_.max_retries + 1);
    if (last_status == 0) {
        throw TransportError("POST " + origin_ + path + " failed after " + tries +
                             " attempt(s): " + last_failure);
    }
    throw ProtocolError(last_status, "POST " + origin_ + path + " returned HTTP " +
                                         std::to_string(last_status) + ": " + excerpt(last_body));
}

}  // namespace dialoscope::backend
