#include "dialoscope/scoring.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>

#include "str_util.hpp"

namespace dialoscope::scoring {

using json = nlohmann::json;

RatingDistribution::RatingDistribution(std::vector<RatingProbability> entries)
    : entries_(std::move(entries)) {
    if (entries_.empty() || entries_.size() > 5) {
        throw DataError("rating distribution needs 1..5 entries, got " + std::to_string(entries_.size()));
    }
    std::array<bool, 6> seen{};
    for (const auto& e : entries_) {
        if (e.rating < 1 || e.rating > 5) throw DataError("rating " + std::to_string(e.rating) + " outside 1..5");
        if (seen[static_cast<std::size_t>(e.rating)]) {
            throw DataError("rating " + std::to_string(e.rating) + " appears twice");
        }
        seen[static_cast<std::size_t>(e.rating)] = true;
        if (!std::isfinite(e.probability) || !(e.probability > 0.0)) {
            throw DataError("rating probabilities must be finite and positive");
        }
    }
}

RatingVocabulary RatingVocabulary::defaults() {
    RatingVocabulary v;
    for (int r = 1; r <= 5; ++r) {
        v.add(r, std::to_string(r));
        v.add(r, " " + std::to_string(r));
    }
    return v;
}

void RatingVocabulary::add(int rating, std::string surface_form) {
    if (rating < 1 || rating > 5) throw DataError("vocabulary rating " + std::to_string(rating) + " outside 1..5");
    const std::string key(detail::trim(surface_form));
    if (key.empty()) throw DataError("vocabulary surface form is blank");
    auto [it, inserted] = forms_.emplace(key, rating);
    if (!inserted && it->second != rating) {
        throw DataError("surface form '" + key + "' maps to both " + std::to_string(it->second) + " and " +
                        std::to_string(rating));
    }
}

std::optional<int> RatingVocabulary::lookup(std::string_view token) const {
    auto it = forms_.find(detail::trim(token));
    if (it == forms_.end()) return std::nullopt;
    return it->second;
}

RatingVocabulary RatingVocabulary::from_json(const json& j) {
    if (!j.is_object()) throw DataError("rating vocabulary must be a JSON object");
    RatingVocabulary v;
    for (const auto& [key, forms] : j.items()) {
        int rating = 0;
        if (key.size() != 1 || key[0] < '1' || key[0] > '5') {
            throw DataError("rating vocabulary key '" + key + "' is not 1..5");
        }
        rating = key[0] - '0';
        if (!forms.is_array()) throw DataError("rating vocabulary entry '" + key + "' is not a list");
        for (const auto& f : forms) {
            if (!f.is_string()) throw DataError("rating vocabulary entry '" + key + "' holds a non-string");
            v.add(rating, f.get<std::string>());
        }
    }
    return v;
}

RatingVocabulary RatingVocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open rating vocabulary " + path.string());
    try {
        return from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

RatingDistribution extract_rating_distribution(const backend::TokenCandidates& candidates,
                                               const RatingVocabulary& vocab, int k) {
    if (k < 1 || k > 5) throw ConfigError("K must be in 1..5, got " + std::to_string(k));
    std::array<double, 6> mass{};
    std::array<bool, 6> present{};
    for (const auto& [token, logprob] : candidates.candidates) {
        if (auto r = vocab.lookup(token)) {
            mass[static_cast<std::size_t>(*r)] += std::exp(logprob);
            present[static_cast<std::size_t>(*r)] = true;
        }
    }
    std::vector<RatingProbability> entries;
    for (int r = 1; r <= 5; ++r) {
        if (present[static_cast<std::size_t>(r)] && mass[static_cast<std::size_t>(r)] > 0.0) {
            entries.push_back({r, mass[static_cast<std::size_t>(r)]});
        }
    }
    if (entries.empty()) {
        throw ExtractionError("no rating token among the candidates at position " +
                              std::to_string(candidates.position));
    }
    // Ascending ratings in, so stable_sort breaks probability ties toward the
    // smaller rating.
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.probability > b.probability; });
    if (entries.size() > static_cast<std::size_t>(k)) entries.resize(static_cast<std::size_t>(k));
    return RatingDistribution(std::move(entries));
}

std::vector<double> compute_weights(const RatingDistribution& dist, WeightMode mode) {
    const auto& entries = dist.entries();
    std::vector<double> raw;
    raw.reserve(entries.size());
    for (const auto& e : entries) {
        raw.push_back(mode == WeightMode::probability ? e.probability : std::log(e.probability));
    }
    double total = 0.0;
    for (double v : raw) total += v;
    std::vector<double> w(raw.size());
    if (total == 0.0) {
        // Only reachable in raw_logprob mode with every p_i == 1.
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
        return w;
    }
    for (std::size_t i = 0; i < raw.size(); ++i) w[i] = raw[i] / total;
    return w;
}

double weighted_rating(const RatingDistribution& dist, WeightMode mode) {
    const auto w = compute_weights(dist, mode);
    const auto& entries = dist.entries();
    double r = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) r += static_cast<double>(entries[i].rating) * w[i];

    // Rounding can push a convex combination an ulp past its hull.
    const auto [lo, hi] = std::minmax_element(entries.begin(), entries.end(),
                                              [](const auto& a, const auto& b) { return a.rating < b.rating; });
    return std::clamp(r, static_cast<double>(lo->rating), static_cast<double>(hi->rating));
}

corpus::LikertRating round_to_likert(double rating) {
    if (!(rating >= 1.0 && rating <= 5.0)) {
        throw DataError("continuous rating " + std::to_string(rating) + " outside [1, 5]");
    }
    // 4 * (0.6 / 0.8) + 2 * (0.2 / 0.8) evaluates to 3.4999999999999996.
    constexpr double kHalfTolerance = 1e-9;
    return corpus::LikertRating(static_cast<int>(std::floor(rating + 0.5 + kHalfTolerance)));
}

namespace {

constexpr std::size_t kCueWindow = 40;
constexpr std::array<std::string_view, 3> kCues = {"score", "rating", "rate"};

bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

struct Match {
    std::size_t prefix_end;  // analysis-first text ends here
    std::size_t digit_end;   // rating-first text starts here
    int value;
};

// First integer run starting in [from, to) whose value is 1..5.
std::optional<Match> first_rating_run(std::string_view s, std::size_t from, std::size_t to) {
    std::size_t j = from;
    while (j < to) {
        if (!is_digit(s[j]) || (j > 0 && is_digit(s[j - 1]))) {
            ++j;
            continue;
        }
        std::size_t end = j;
        while (end < s.size() && is_digit(s[end])) ++end;
        if (end - j == 1 && s[j] >= '1' && s[j] <= '5') return Match{j, end, s[j] - '0'};
        j = end;
    }
    return std::nullopt;
}

std::optional<Match> find_rating(std::string_view text) {
    const std::string lower = detail::to_lower_ascii(text);
    for (std::size_t i = 0; i < lower.size(); ++i) {
        if (i > 0 && is_alpha(lower[i - 1])) continue;
        for (auto cue : kCues) {
            if (std::string_view(lower).substr(i, cue.size()) != cue) continue;
            const std::size_t start = i + cue.size();
            const std::size_t stop = std::min(lower.size(), start + kCueWindow);
            if (auto m = first_rating_run(lower, start, stop)) {
                m->prefix_end = i;
                return m;
            }
        }
    }
    return first_rating_run(lower, 0, lower.size());
}

std::optional<std::string> tidy(std::string_view s, bool strip_leading_punct) {
    s = detail::trim(s);
    if (strip_leading_punct) {
        if (s.starts_with("/5") || s.starts_with("/ 5")) s.remove_prefix(s[1] == ' ' ? 3 : 2);
        while (!s.empty() && (std::string_view(".,:;!)-").find(s.front()) != std::string_view::npos ||
                              detail::is_space(s.front()))) {
            s.remove_prefix(1);
        }
    }
    if (s.empty()) return std::nullopt;
    return std::string(s);
}

}  // namespace

std::optional<GeneratedRating> parse_generated_rating(std::string_view text,
                                                      prompting::TemplateKind kind) noexcept {
    try {
        const auto m = find_rating(text);
        if (!m) return std::nullopt;
        GeneratedRating out{corpus::LikertRating(m->value), std::nullopt};
        if (kind == prompting::TemplateKind::analysis_first) {
            out.analysis = tidy(text.substr(0, m->prefix_end), false);
        } else if (kind == prompting::TemplateKind::rating_first) {
            out.analysis = tidy(text.substr(m->digit_end), true);
        }
        return out;
    } catch (...) {
        // Only allocation failure can land here.
        return std::nullopt;
    }
}

json to_json(const ScoredDialogue& s) {
    json j{{"dialogue_id", s.dialogue_id},
           {"method", prompting::to_string(s.method)},
           {"continuous_rating", nullptr},
           {"likert", nullptr},
           {"analysis_text", nullptr},
           {"parse_ok", s.parse_ok}};
    if (s.continuous_rating) j["continuous_rating"] = *s.continuous_rating;
    if (s.likert) j["likert"] = s.likert->value();
    if (s.analysis_text) j["analysis_text"] = *s.analysis_text;
    return j;
}

ScoredDialogue scored_from_json(const json& j) {
    try {
        ScoredDialogue s;
        s.dialogue_id = j.at("dialogue_id").get<std::string>();
        s.method = prompting::parse_template_kind(j.at("method").get<std::string>());
        if (!j.at("continuous_rating").is_null()) s.continuous_rating = j["continuous_rating"].get<double>();
        if (!j.at("likert").is_null()) s.likert = corpus::LikertRating(j["likert"].get<int>());
        if (!j.at("analysis_text").is_null()) s.analysis_text = j["analysis_text"].get<std::string>();
        s.parse_ok = j.at("parse_ok").get<bool>();
        return s;
    } catch (const json::exception& e) {
        throw DataError(std::string("scored dialogue record: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("scored dialogue record: ") + e.what());
    }
}

ScoredDialogue score_logits_response(const std::string& dialogue_id,
                                     const backend::CompletionResponse& response,
                                     const RatingVocabulary& vocab, const LogitsOptions& options) {
    ScoredDialogue s;
    s.dialogue_id = dialogue_id;
    s.method = prompting::TemplateKind::logits;
    if (response.token_candidates.empty()) return s;
    try {
        const auto dist = extract_rating_distribution(response.token_candidates.front(), vocab, options.k);
        const double r = weighted_rating(dist, options.weight_mode);
        s.continuous_rating = r;
        s.likert = round_to_likert(r);
        s.parse_ok = true;
    } catch (const ExtractionError&) {
        s.continuous_rating.reset();
        s.likert.reset();
    }
    return s;
}

ScoredDialogue score_generated_response(const std::string& dialogue_id,
                                        const backend::CompletionResponse& response,
                                        prompting::TemplateKind kind) {
    ScoredDialogue s;
    s.dialogue_id = dialogue_id;
    s.method = kind;
    if (auto parsed = parse_generated_rating(response.text, kind)) {
        s.likert = parsed->rating;
        s.analysis_text = std::move(parsed->analysis);
        s.parse_ok = true;
    }
    return s;
}

}  // namespace dialoscope::scoring
