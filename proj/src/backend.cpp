#include "dialoscope/backend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>

#include <openssl/evp.h>

#include "dialoscope/error.hpp"
#include "str_util.hpp"

namespace dialoscope::backend {

using json = nlohmann::json;

void CompletionRequest::validate() const {
    if (prompt.empty()) throw ConfigError("completion request has an empty prompt");
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be positive");
    if (!std::isfinite(temperature) || temperature < 0.0) {
        throw ConfigError("temperature must be a finite value >= 0");
    }
    if (top_logprobs < 0 || top_logprobs > kMaxTopLogprobs) {
        throw ConfigError("top_logprobs must be in [0, 20], got " + std::to_string(top_logprobs));
    }
}

json to_json(const CompletionResponse& response) {
    json positions = json::array();
    for (const auto& tc : response.token_candidates) {
        json cands = json::object();
        for (const auto& [token, lp] : tc.candidates) cands[token] = lp;
        positions.push_back({{"position", tc.position}, {"candidates", std::move(cands)}});
    }
    return {{"text", response.text},
            {"token_candidates", std::move(positions)},
            {"backend_id", response.backend_id}};
}

CompletionResponse response_from_json(const json& j) {
    if (!j.is_object()) throw DataError("response: expected an object");
    CompletionResponse r;
    if (!j.contains("text") || !j["text"].is_string()) {
        throw DataError("response: field 'text' missing or not a string");
    }
    r.text = j["text"].get<std::string>();
    if (auto it = j.find("backend_id"); it != j.end()) {
        if (!it->is_string()) throw DataError("response: field 'backend_id' is not a string");
        r.backend_id = it->get<std::string>();
    }
    if (auto it = j.find("token_candidates"); it != j.end()) {
        if (!it->is_array()) throw DataError("response: field 'token_candidates' is not an array");
        std::size_t next = 0;
        for (const auto& pos : *it) {
            TokenCandidates tc;
            tc.position = next++;
            if (!pos.is_object() || !pos.contains("candidates") || !pos["candidates"].is_object()) {
                throw DataError("response: token_candidates entry lacks a 'candidates' object");
            }
            if (auto p = pos.find("position"); p != pos.end()) {
                if (!p->is_number_unsigned()) throw DataError("response: bad 'position'");
                tc.position = p->get<std::size_t>();
            }
            for (const auto& [token, lp] : pos["candidates"].items()) {
                if (!lp.is_number()) throw DataError("response: logprob for '" + token + "' is not a number");
                tc.candidates.emplace(token, lp.get<double>());
            }
            r.token_candidates.push_back(std::move(tc));
        }
    }
    return r;
}

void sanitize_candidates(TokenCandidates& tc, int limit) {
    double mass = 0.0;
    for (const auto& [token, lp] : tc.candidates) {
        if (!std::isfinite(lp) || lp > 0.0) {
            throw ProtocolError(0, "invalid logprob " + std::to_string(lp) + " for token '" + token +
                                       "' at position " + std::to_string(tc.position));
        }
        mass += std::exp(lp);
    }
    if (mass > 1.0 + 1e-6) {
        throw ProtocolError(0, "candidate probabilities at position " + std::to_string(tc.position) +
                                   " sum to " + std::to_string(mass));
    }
    const auto keep = static_cast<std::size_t>(std::max(limit, 0));
    if (tc.candidates.size() <= keep) return;

    std::vector<std::pair<std::string, double>> ranked(tc.candidates.begin(), tc.candidates.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    ranked.resize(keep);
    tc.candidates = std::map<std::string, double>(ranked.begin(), ranked.end());
}

std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 computation failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0x0f]);
    }
    return out;
}

CacheKey make_cache_key(std::string_view backend_id, const CompletionRequest& request) {
    const json tuple = json::array({backend_id, request.model, request.prompt, request.max_new_tokens,
                                    request.temperature, request.top_logprobs});
    return {sha256_hex(tuple.dump())};
}

bool ReplayKeyFields::matches(const CompletionRequest& request) const {
    return prompt == request.prompt && (!model || *model == request.model) &&
           (!max_new_tokens || *max_new_tokens == request.max_new_tokens) &&
           (!temperature || *temperature == request.temperature) &&
           (!top_logprobs || *top_logprobs == request.top_logprobs);
}

ReplayBackend::ReplayBackend(std::vector<ReplayEntry> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        by_prompt_.emplace(entries_[i].key_fields.prompt, i);
    }
}

namespace {

ReplayKeyFields key_fields_from_json(const json& j) {
    if (!j.is_object() || !j.contains("prompt") || !j["prompt"].is_string()) {
        throw DataError("key_fields: 'prompt' missing or not a string");
    }
    ReplayKeyFields k;
    k.prompt = j["prompt"].get<std::string>();
    if (j.contains("model")) k.model = j["model"].get<std::string>();
    if (j.contains("max_new_tokens")) k.max_new_tokens = j["max_new_tokens"].get<int>();
    if (j.contains("temperature")) k.temperature = j["temperature"].get<double>();
    if (j.contains("top_logprobs")) k.top_logprobs = j["top_logprobs"].get<int>();
    return k;
}

json key_fields_to_json(const ReplayKeyFields& k) {
    json j{{"prompt", k.prompt}};
    if (k.model) j["model"] = *k.model;
    if (k.max_new_tokens) j["max_new_tokens"] = *k.max_new_tokens;
    if (k.temperature) j["temperature"] = *k.temperature;
    if (k.top_logprobs) j["top_logprobs"] = *k.top_logprobs;
    return j;
}

}  // namespace

ReplayBackend ReplayBackend::parse(std::istream& in) {
    std::vector<ReplayEntry> entries;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (detail::trim(raw).empty()) continue;
        try {
            const auto j = json::parse(raw);
            if (!j.is_object() || !j.contains("key_fields") || !j.contains("response")) {
                throw DataError("expected {\"key_fields\", \"response\"}");
            }
            entries.push_back({key_fields_from_json(j["key_fields"]), response_from_json(j["response"])});
        } catch (const json::exception& e) {
            throw DataError("replay fixture line " + std::to_string(line) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError("replay fixture line " + std::to_string(line) + ": " + e.what());
        }
    }
    return ReplayBackend(std::move(entries));
}

ReplayBackend ReplayBackend::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open replay fixture " + path.string());
    return parse(in);
}

CompletionResponse ReplayBackend::complete(const CompletionRequest& request) {
    request.validate();
    auto [first, last] = by_prompt_.equal_range(request.prompt);
    // Later entries shadow earlier ones, like the cache.
    const ReplayEntry* hit = nullptr;
    std::size_t hit_index = 0;
    for (auto it = first; it != last; ++it) {
        if (entries_[it->second].key_fields.matches(request) && (!hit || it->second > hit_index)) {
            hit = &entries_[it->second];
            hit_index = it->second;
        }
    }
    if (!hit) {
        throw CapabilityError("replay fixture has no entry for request key " +
                              make_cache_key(id(), request).digest + " (prompt sha256 " +
                              sha256_hex(request.prompt).substr(0, 16) + ")");
    }
    CompletionResponse out = hit->response;
    out.backend_id = id();
    out.cached = false;
    if (request.top_logprobs > 0) {
        if (out.token_candidates.empty()) {
            throw CapabilityError("replay entry for prompt sha256 " +
                                  sha256_hex(request.prompt).substr(0, 16) +
                                  " has no logprobs but they were requested");
        }
        for (auto& tc : out.token_candidates) sanitize_candidates(tc, request.top_logprobs);
    }
    return out;
}

void write_replay_fixture(std::ostream& out, std::span<const ReplayEntry> entries) {
    for (const auto& e : entries) {
        out << json{{"key_fields", key_fields_to_json(e.key_fields)}, {"response", to_json(e.response)}}.dump()
            << '\n';
    }
}

CompletionResponse CachingBackend::complete(const CompletionRequest& request) {
    const auto key = make_cache_key(inner_.id(), request);
    if (auto hit = cache_.lookup(key)) return *std::move(hit);
    auto response = inner_.complete(request);
    cache_.put(key, response);
    return response;
}

}  // namespace dialoscope::backend
