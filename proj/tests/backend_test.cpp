#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "httplib.h"

#include "dialoscope/backend.hpp"
#include "dialoscope/error.hpp"
#include "support/temp_dir.hpp"

namespace dialoscope::backend {
namespace {

using json = nlohmann::json;

CompletionResponse with_candidates(std::map<std::string, double> c, std::string text = "") {
    CompletionResponse r;
    r.text = std::move(text);
    r.token_candidates.push_back({0, std::move(c)});
    return r;
}

CompletionRequest request_for(std::string prompt) {
    CompletionRequest req;
    req.prompt = std::move(prompt);
    req.model = "m";
    return req;
}

TEST(Request, Validate) {
    EXPECT_NO_THROW(request_for("x").validate());
    auto bad = request_for("x");
    bad.max_new_tokens = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = request_for("x");
    bad.temperature = -0.1;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = request_for("x");
    bad.top_logprobs = kMaxTopLogprobs + 1;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(CacheKey, SensitiveToEveryField) {
    const auto base = request_for("prompt");
    const auto k = make_cache_key("replay", base).digest;
    EXPECT_EQ(k.size(), 64u);
    EXPECT_EQ(k, make_cache_key("replay", base).digest);
    std::set<std::string> keys{k};
    auto r = base;
    r.temperature = 0.0;
    keys.insert(make_cache_key("replay", r).digest);
    r = base;
    r.prompt += " ";
    keys.insert(make_cache_key("replay", r).digest);
    r = base;
    r.model = "n";
    keys.insert(make_cache_key("replay", r).digest);
    r = base;
    r.max_new_tokens = 5;
    keys.insert(make_cache_key("replay", r).digest);
    r = base;
    r.top_logprobs = 4;
    keys.insert(make_cache_key("replay", r).digest);
    keys.insert(make_cache_key("openai:http://x", base).digest);
    EXPECT_EQ(keys.size(), 7u);
}

TEST(CacheKey, NoCollisionsOverManyPrompts) {
    std::set<std::string> keys;
    for (int i = 0; i < 2000; ++i) keys.insert(make_cache_key("b", request_for("p" + std::to_string(i))).digest);
    EXPECT_EQ(keys.size(), 2000u);
}

TEST(Sanitize, RejectsInvalidLogprobs) {
    TokenCandidates pos{0, {{"a", 0.1}}};
    EXPECT_THROW(sanitize_candidates(pos, 5), ProtocolError);
    pos = {0, {{"a", NAN}}};
    EXPECT_THROW(sanitize_candidates(pos, 5), ProtocolError);
    pos = {0, {{"a", std::log(0.7)}, {"b", std::log(0.6)}}};
    EXPECT_THROW(sanitize_candidates(pos, 5), ProtocolError);
}

TEST(Sanitize, KeepsMostLikely) {
    TokenCandidates pos{0, {{"a", std::log(0.05)}, {"b", std::log(0.5)}, {"c", std::log(0.2)}, {"d", std::log(0.1)}}};
    sanitize_candidates(pos, 2);
    ASSERT_EQ(pos.candidates.size(), 2u);
    EXPECT_TRUE(pos.candidates.count("b"));
    EXPECT_TRUE(pos.candidates.count("c"));
}

TEST(ResponseJson, RoundTrip) {
    auto r = with_candidates({{" 4", -0.2}, {"3", -2.0}}, "Score: 4");
    r.backend_id = "replay";
    r.cached = true;
    const auto back = response_from_json(to_json(r));
    EXPECT_EQ(back.text, r.text);
    EXPECT_EQ(back.token_candidates, r.token_candidates);
    EXPECT_EQ(back.backend_id, "replay");
    EXPECT_FALSE(back.cached);
    EXPECT_THROW(response_from_json(json::array()), DataError);
}

TEST(Replay, ServesMatchingEntry) {
    std::vector<ReplayEntry> entries = {
        {{"alpha"}, with_candidates({{" 4", std::log(0.6)}, {" 2", std::log(0.2)}})},
        {{"beta", std::nullopt, std::nullopt, 0.0}, with_candidates({{"1", -0.1}})},
    };
    ReplayBackend replay(entries);
    const auto r = replay.complete(request_for("alpha"));
    EXPECT_EQ(r.token_candidates, entries[0].response.token_candidates);
    EXPECT_EQ(r.backend_id, "replay");
    EXPECT_FALSE(r.cached);

    auto cold = request_for("beta");
    cold.temperature = 0.0;
    EXPECT_NO_THROW(replay.complete(cold));
    EXPECT_THROW(replay.complete(request_for("beta")), CapabilityError);
}

TEST(Replay, MissingPromptNamesKey) {
    ReplayBackend replay({});
    const auto req = request_for("unknown prompt");
    try {
        replay.complete(req);
        FAIL();
    } catch (const CapabilityError& e) {
        EXPECT_NE(std::string(e.what()).find(make_cache_key("replay", req).digest), std::string::npos);
    }
}

TEST(Replay, LogprobsRequestedButAbsent) {
    CompletionResponse text_only;
    text_only.text = "Score: 3";
    ReplayBackend replay({{{"p"}, text_only}});
    EXPECT_THROW(replay.complete(request_for("p")), CapabilityError);
    auto cot = request_for("p");
    cot.top_logprobs = 0;
    cot.max_new_tokens = 512;
    EXPECT_EQ(replay.complete(cot).text, "Score: 3");
}

TEST(Replay, LaterEntryWins) {
    ReplayBackend replay({{{"p"}, with_candidates({{"1", -0.1}})}, {{"p"}, with_candidates({{"5", -0.1}})}});
    EXPECT_TRUE(replay.complete(request_for("p")).token_candidates[0].candidates.count("5"));
}

TEST(Replay, FixtureFileRoundTrip) {
    std::vector<ReplayEntry> entries = {{{"one", "m", 4, 0.7, 5}, with_candidates({{" 3", -0.5}})},
                                        {{"two"}, with_candidates({{" 1", -0.3}}, "1")}};
    std::stringstream ss;
    write_replay_fixture(ss, entries);
    auto replay = ReplayBackend::parse(ss);
    EXPECT_EQ(replay.size(), 2u);
    EXPECT_EQ(replay.complete(request_for("two")).text, "1");
    std::istringstream broken("{\"key_fields\":{}}\n");
    EXPECT_THROW(ReplayBackend::parse(broken), DataError);
}

TEST(Cache, RoundTripAcrossReopen) {
    testing::TempDir dir;
    const auto key = make_cache_key("replay", request_for("p"));
    const auto resp = with_candidates({{" 5", -0.01}}, "5");
    {
        ResponseCache cache(dir / "c.jsonl");
        EXPECT_FALSE(cache.lookup(key));
        cache_put(cache, key, resp);
        EXPECT_TRUE(cache_lookup(cache, key)->cached);
    }
    ResponseCache reopened(dir / "c.jsonl");
    const auto hit = reopened.lookup(key);
    ASSERT_TRUE(hit);
    EXPECT_EQ(hit->token_candidates, resp.token_candidates);
    EXPECT_EQ(hit->text, "5");
    EXPECT_TRUE(hit->cached);
}

TEST(Cache, TemperatureChangesKey) {
    testing::TempDir dir;
    ResponseCache cache(dir / "c.jsonl");
    auto req = request_for("p");
    cache.put(make_cache_key("replay", req), with_candidates({{"1", -0.1}}));
    req.temperature = 0.0;
    EXPECT_FALSE(cache.lookup(make_cache_key("replay", req)));
}

TEST(Cache, LastWriterWins) {
    testing::TempDir dir;
    const auto key = make_cache_key("replay", request_for("p"));
    {
        ResponseCache cache(dir / "c.jsonl");
        cache.put(key, with_candidates({{"1", -0.1}}));
        cache.put(key, with_candidates({{"2", -0.1}}));
        EXPECT_TRUE(cache.lookup(key)->token_candidates[0].candidates.count("2"));
        EXPECT_EQ(cache.size(), 1u);
    }
    ResponseCache reopened(dir / "c.jsonl");
    EXPECT_TRUE(reopened.lookup(key)->token_candidates[0].candidates.count("2"));
}

TEST(Cache, EveryPutIsPersisted) {
    testing::TempDir dir;
    std::set<std::string> written;
    {
        ResponseCache cache(dir / "c.jsonl");
        for (int i = 0; i < 1000; ++i) {
            const auto key = make_cache_key("replay", request_for("p" + std::to_string(i)));
            cache.put(key, with_candidates({{std::to_string(i % 5 + 1), -0.1}}));
            written.insert(key.digest);
        }
    }
    std::ifstream in(dir / "c.jsonl");
    std::set<std::string> on_disk;
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        ++lines;
        on_disk.insert(json::parse(line).at("key").get<std::string>());
    }
    EXPECT_EQ(lines, 1000u);
    EXPECT_EQ(on_disk, written);
}

TEST(Cache, ConcurrentPutsAndLookups) {
    testing::TempDir dir;
    ResponseCache cache(dir / "c.jsonl");
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
        threads.emplace_back([&, t] {
            for (int i = 0; i < 100; ++i) {
                const auto key = make_cache_key("b", request_for(std::to_string(t) + ":" + std::to_string(i)));
                cache.put(key, with_candidates({{"3", -0.2}}));
                ASSERT_TRUE(cache.lookup(key));
            }
        });
    }
    for (auto& th : threads) th.join();
    EXPECT_EQ(cache.size(), 800u);
    EXPECT_EQ(ResponseCache(dir / "c.jsonl").size(), 800u);
}

TEST(Cache, CorruptRecordNamesLine) {
    testing::TempDir dir;
    {
        ResponseCache cache(dir / "c.jsonl");
        cache.put(make_cache_key("b", request_for("p")), with_candidates({{"3", -0.2}}));
    }
    {
        std::ofstream(dir / "c.jsonl", std::ios::app) << "{\"key\": \"abc\", \"respo\n";
    }
    try {
        ResponseCache again(dir / "c.jsonl");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    }
}

class CountingBackend final : public CompletionBackend {
public:
    std::string id() const override { return "counting"; }
    CompletionResponse complete(const CompletionRequest& request) override {
        ++calls;
        auto r = with_candidates({{" 4", -0.1}}, request.prompt);
        r.backend_id = id();
        return r;
    }
    std::atomic<int> calls{0};
};

TEST(CachingBackend, Transparent) {
    testing::TempDir dir;
    CountingBackend inner;
    ResponseCache cache(dir / "c.jsonl");
    CachingBackend caching(inner, cache);
    const auto first = caching.complete(request_for("p"));
    const auto second = caching.complete(request_for("p"));
    EXPECT_EQ(inner.calls, 1);
    EXPECT_FALSE(first.cached);
    EXPECT_TRUE(second.cached);
    EXPECT_EQ(first.text, second.text);
    EXPECT_EQ(first.token_candidates, second.token_candidates);
    EXPECT_EQ(caching.id(), "counting");
}

// Local HTTP server standing in for an OpenAI-compatible endpoint.
class FakeServer {
public:
    FakeServer() {
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeServer() {
        server_.stop();
        thread_.join();
    }
    httplib::Server& server() { return server_; }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

json completion_body(const json& top_logprobs, const std::string& text = " 4") {
    return {{"choices", json::array({{{"text", text}, {"logprobs", {{"top_logprobs", top_logprobs}}}}})}};
}

HttpBackendConfig fast_config(const std::string& url) {
    HttpBackendConfig c;
    c.base_url = url;
    c.api_key = "secret";
    c.timeout = std::chrono::milliseconds(2000);
    c.max_retries = 2;
    c.initial_backoff = std::chrono::milliseconds(5);
    return c;
}

TEST(Http, SendsRequestAndParsesCandidates) {
    FakeServer fake;
    json seen;
    std::string auth;
    fake.server().Post("/v1/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen = json::parse(req.body);
        auth = req.get_header_value("Authorization");
        json top = json::array({{{" 4", std::log(0.5)},
                                 {" 3", std::log(0.2)},
                                 {" 5", std::log(0.1)},
                                 {"4", std::log(0.05)},
                                 {" 2", std::log(0.04)},
                                 {"the", std::log(0.03)},
                                 {" 1", std::log(0.02)}}});
        res.set_content(completion_body(top).dump(), "application/json");
    });
    OpenAiCompletionsBackend http(fast_config(fake.url()));
    const auto r = http.complete(request_for("hello"));
    EXPECT_EQ(auth, "Bearer secret");
    EXPECT_EQ(seen["prompt"], "hello");
    EXPECT_EQ(seen["model"], "m");
    EXPECT_EQ(seen["max_tokens"], 4);
    EXPECT_EQ(seen["logprobs"], 5);
    EXPECT_DOUBLE_EQ(seen["temperature"].get<double>(), 0.7);
    ASSERT_EQ(r.token_candidates.size(), 1u);
    EXPECT_EQ(r.token_candidates[0].candidates.size(), 5u);
    EXPECT_FALSE(r.token_candidates[0].candidates.count(" 1"));
    EXPECT_EQ(r.text, " 4");
    EXPECT_EQ(r.backend_id, http.id());
}

TEST(Http, PathPrefixIsKept) {
    FakeServer fake;
    fake.server().Post("/api/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
        res.set_content(completion_body(json::array({{{"1", -0.1}}})).dump(), "application/json");
    });
    OpenAiCompletionsBackend http(fast_config(fake.url() + "/api/"));
    EXPECT_NO_THROW(http.complete(request_for("x")));
}

TEST(Http, RetriesTransientStatus) {
    FakeServer fake;
    std::atomic<int> hits{0};
    fake.server().Post("/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
        if (hits++ == 0) {
            res.status = 503;
            res.set_content("busy", "text/plain");
            return;
        }
        res.set_content(completion_body(json::array({{{" 2", -0.3}}})).dump(), "application/json");
    });
    OpenAiCompletionsBackend http(fast_config(fake.url()));
    const auto r = http.complete(request_for("x"));
    EXPECT_EQ(hits.load(), 2);
    EXPECT_TRUE(r.token_candidates[0].candidates.count(" 2"));
}

TEST(Http, ClientErrorIsNotRetried) {
    FakeServer fake;
    std::atomic<int> hits{0};
    fake.server().Post("/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 400;
        res.set_content(std::string(500, 'e'), "text/plain");
    });
    OpenAiCompletionsBackend http(fast_config(fake.url()));
    try {
        http.complete(request_for("x"));
        FAIL();
    } catch (const ProtocolError& e) {
        EXPECT_EQ(e.status(), 400);
        EXPECT_LT(std::string(e.what()).size(), 400u);
    }
    EXPECT_EQ(hits.load(), 1);
}

TEST(Http, PersistentServerErrorExhaustsRetries) {
    FakeServer fake;
    std::atomic<int> hits{0};
    fake.server().Post("/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 500;
    });
    OpenAiCompletionsBackend http(fast_config(fake.url()));
    EXPECT_THROW(http.complete(request_for("x")), ProtocolError);
    EXPECT_EQ(hits.load(), 3);
}

TEST(Http, MissingLogprobsIsCapabilityError) {
    FakeServer fake;
    fake.server().Post("/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
        res.set_content(json{{"choices", json::array({{{"text", " 4"}}})}}.dump(), "application/json");
    });
    OpenAiCompletionsBackend http(fast_config(fake.url()));
    EXPECT_THROW(http.complete(request_for("x")), CapabilityError);
    auto cot = request_for("x");
    cot.top_logprobs = 0;
    EXPECT_EQ(http.complete(cot).text, " 4");
}

TEST(Http, UnreachableIsTransportError) {
    int port = 0;
    {
        httplib::Server probe;
        port = probe.bind_to_any_port("127.0.0.1");
    }
    auto config = fast_config("http://127.0.0.1:" + std::to_string(port));
    config.max_retries = 1;
    OpenAiCompletionsBackend http(config);
    EXPECT_THROW(http.complete(request_for("x")), TransportError);
}

TEST(Http, ParseCompletionBody) {
    const auto req = request_for("x");
    EXPECT_THROW(OpenAiCompletionsBackend::parse_completion_body("not json", req, "b"), ProtocolError);
    EXPECT_THROW(OpenAiCompletionsBackend::parse_completion_body("{\"choices\":[]}", req, "b"), ProtocolError);
    const auto body = completion_body(json::array({nullptr, {{" 3", -0.1}}})).dump();
    const auto r = OpenAiCompletionsBackend::parse_completion_body(body, req, "b");
    ASSERT_EQ(r.token_candidates.size(), 2u);
    EXPECT_TRUE(r.token_candidates[0].candidates.empty());
    EXPECT_EQ(r.token_candidates[1].position, 1u);
}

TEST(Http, BadBaseUrl) {
    EXPECT_THROW(OpenAiCompletionsBackend(fast_config("localhost:80")), ConfigError);
    EXPECT_THROW(OpenAiCompletionsBackend(fast_config("ftp://host")), ConfigError);
}

}  // namespace
}  // namespace dialoscope::backend
