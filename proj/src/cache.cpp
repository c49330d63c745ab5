#include <istream>

#include "dialoscope/backend.hpp"
#include "dialoscope/error.hpp"
#include "str_util.hpp"

namespace dialoscope::backend {

using json = nlohmann::json;

ResponseCache::ResponseCache(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
        std::ifstream in(path_, std::ios::binary);
        if (!in) throw DataError("cannot read response cache " + path_.string());
        std::string raw;
        std::size_t line = 0;
        while (std::getline(in, raw)) {
            ++line;
            if (detail::trim(raw).empty()) continue;
            const std::string where = path_.string() + ": record at line " + std::to_string(line) + ": ";
            try {
                const auto j = json::parse(raw);
                if (!j.is_object() || !j.contains("key") || !j["key"].is_string() || !j.contains("response")) {
                    throw DataError("expected {\"key\", \"response\"}");
                }
                entries_[j["key"].get<std::string>()] = response_from_json(j["response"]);
            } catch (const json::exception& e) {
                throw DataError(where + "corrupt: " + e.what());
            } catch (const DataError& e) {
                throw DataError(where + "corrupt: " + e.what());
            }
        }
    } else if (path_.has_parent_path()) {
        std::filesystem::create_directories(path_.parent_path());
    }
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw DataError("cannot open response cache " + path_.string() + " for append");
}

std::optional<CompletionResponse> ResponseCache::lookup(const CacheKey& key) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(key.digest);
    if (it == entries_.end()) return std::nullopt;
    CompletionResponse r = it->second;
    r.cached = true;
    return r;
}

void ResponseCache::put(const CacheKey& key, const CompletionResponse& response) {
    const std::string line = json{{"key", key.digest}, {"response", to_json(response)}}.dump();
    std::unique_lock lock(mutex_);
    out_ << line << '\n';
    out_.flush();
    if (!out_) throw DataError("write to response cache " + path_.string() + " failed");
    auto stored = response;
    stored.cached = false;
    entries_.insert_or_assign(key.digest, std::move(stored));
}

std::size_t ResponseCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

std::optional<CompletionResponse> cache_lookup(const ResponseCache& store, const CacheKey& key) {
    return store.lookup(key);
}

void cache_put(ResponseCache& store, const CacheKey& key, const CompletionResponse& response) {
    store.put(key, response);
}

}  // namespace dialoscope::backend
