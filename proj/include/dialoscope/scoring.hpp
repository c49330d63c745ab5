#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dialoscope/backend.hpp"
#include "dialoscope/corpus.hpp"
#include "dialoscope/error.hpp"
#include "dialoscope/prompting.hpp"

namespace dialoscope::scoring {

/// No candidate token maps onto a rating value.
class ExtractionError : public DataError {
public:
    using DataError::DataError;
};

struct RatingProbability {
    int rating;
    double probability;

    bool operator==(const RatingProbability&) const = default;
};

/// Top-K candidate ratings, most probable first. Ratings are distinct and in
/// 1..5, probabilities finite and positive.
class RatingDistribution {
public:
    /// Throws DataError when the invariants do not hold.
    explicit RatingDistribution(std::vector<RatingProbability> entries);

    const std::vector<RatingProbability>& entries() const noexcept { return entries_; }
    std::size_t k() const noexcept { return entries_.size(); }

private:
    std::vector<RatingProbability> entries_;
};

/// Token surface form -> rating. Lookups try the token as-is, then trimmed.
class RatingVocabulary {
public:
    /// {"1": ["1", " 1"], ..., "5": ["5", " 5"]}
    static RatingVocabulary defaults();
    /// Same shape as the defaults. Throws DataError if one surface form is
    /// claimed by two ratings or a key is not 1..5.
    static RatingVocabulary from_json(const nlohmann::json& j);
    static RatingVocabulary load(const std::filesystem::path& path);

    void add(int rating, std::string surface_form);
    std::optional<int> lookup(std::string_view token) const;

private:
    std::map<std::string, int, std::less<>> forms_;
};

/// How weights are formed from the extracted entries.
enum class WeightMode {
    probability,  // w_i = p_i / sum p_j
    raw_logprob,  // w_i = ln p_i / sum ln p_j
};

/// Surface forms of one rating have their probabilities summed; the K most
/// probable ratings are kept, ties going to the smaller rating.
RatingDistribution extract_rating_distribution(const backend::TokenCandidates& candidates,
                                               const RatingVocabulary& vocab, int k);

std::vector<double> compute_weights(const RatingDistribution& dist,
                                    WeightMode mode = WeightMode::probability);

/// sum r_i * w_i; always within [min r_i, max r_i].
double weighted_rating(const RatingDistribution& dist, WeightMode mode = WeightMode::probability);

/// Round half up onto 1..5. Throws DataError outside [1, 5].
corpus::LikertRating round_to_likert(double rating);

struct GeneratedRating {
    corpus::LikertRating rating;
    std::optional<std::string> analysis;
};

/// Never throws. The rating is the first integer 1..5 starting within 40
/// characters after a cue word ("score", "rating", "rate"; case-insensitive,
/// at a word start), else the first standalone digit 1..5. Analysis-first
/// keeps the text before the match as analysis, rating-first the text after.
std::optional<GeneratedRating> parse_generated_rating(std::string_view text,
                                                      prompting::TemplateKind kind) noexcept;

struct ScoredDialogue {
    std::string dialogue_id;
    prompting::TemplateKind method = prompting::TemplateKind::logits;
    std::optional<double> continuous_rating;
    std::optional<corpus::LikertRating> likert;
    std::optional<std::string> analysis_text;
    bool parse_ok = false;

    bool operator==(const ScoredDialogue&) const = default;
};

nlohmann::json to_json(const ScoredDialogue& scored);
ScoredDialogue scored_from_json(const nlohmann::json& j);

struct LogitsOptions {
    int k = 5;
    WeightMode weight_mode = WeightMode::probability;
};

/// Reads the first generated position; an extraction failure becomes
/// parse_ok = false.
ScoredDialogue score_logits_response(const std::string& dialogue_id,
                                     const backend::CompletionResponse& response,
                                     const RatingVocabulary& vocab, const LogitsOptions& options);

ScoredDialogue score_generated_response(const std::string& dialogue_id,
                                        const backend::CompletionResponse& response,
                                        prompting::TemplateKind kind);

}  // namespace dialoscope::scoring
