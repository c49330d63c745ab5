#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dialoscope::retrieval {

/// Lowercases ASCII letters and splits on every maximal run of ASCII
/// non-alphanumeric bytes. Bytes >= 0x80 are kept inside tokens so UTF-8
/// words survive intact.
std::vector<std::string> tokenize(std::string_view text);

enum class SelectionMethod { random, bm25, embedding };

std::string_view to_string(SelectionMethod method);

struct ScoredId {
    std::string doc_id;
    double score = 0.0;

    bool operator==(const ScoredId&) const = default;
};

struct SelectionResult {
    std::vector<ScoredId> selected;  // best first
    SelectionMethod method = SelectionMethod::random;

    std::vector<std::string> ids() const;
};

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

struct IndexDocument {
    std::string doc_id;
    std::string text;
};

/// Okapi BM25 over an in-memory inverted index. Immutable once built.
class Bm25Index {
public:
    struct Posting {
        std::uint32_t doc;  // insertion position
        std::uint32_t tf;
    };

    /// Throws DataError on duplicate ids or invalid parameters.
    static Bm25Index build(std::span<const IndexDocument> docs, Bm25Params params = {});

    const Bm25Params& params() const noexcept { return params_; }
    std::size_t doc_count() const noexcept { return doc_ids_.size(); }
    double avg_doc_len() const noexcept { return avg_doc_len_; }
    const std::vector<std::string>& doc_ids() const noexcept { return doc_ids_; }
    std::uint32_t doc_length(std::size_t doc) const { return doc_lengths_.at(doc); }

    /// Number of documents containing the term (0 when unseen).
    std::uint32_t document_frequency(const std::string& term) const;
    std::uint32_t term_frequency(const std::string& doc_id, const std::string& term) const;

    /// ln(1 + (N - df + 0.5) / (df + 0.5)).
    double idf(const std::string& term) const;

    /// Sum over query tokens (repeats included) of the Okapi term weight.
    /// Throws DataError for an unknown doc_id.
    double score(std::span<const std::string> query_tokens, const std::string& doc_id) const;

    /// Scores every document via the postings lists, in insertion order.
    std::vector<double> score_all(std::span<const std::string> query_tokens) const;

private:
    double term_weight(double idf, std::uint32_t tf, std::uint32_t doc_len) const;
    std::size_t position_of(const std::string& doc_id) const;

    Bm25Params params_;
    std::vector<std::string> doc_ids_;
    std::unordered_map<std::string, std::size_t> id_to_pos_;
    std::vector<std::uint32_t> doc_lengths_;
    std::vector<std::unordered_map<std::string, std::uint32_t>> doc_tf_;
    std::unordered_map<std::string, std::vector<Posting>> postings_;
    double avg_doc_len_ = 0.0;
};

double bm25_score(const Bm25Index& index, std::span<const std::string> query_tokens,
                  const std::string& doc_id);

/// Top k documents by score; ties go to the earlier-inserted document.
SelectionResult select_bm25(const Bm25Index& index, std::string_view query_text, std::size_t k);

using EmbeddingVector = std::vector<double>;

/// Throws DataError for zero-norm inputs or a length mismatch.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Insertion-ordered id -> vector map with a shared dimension.
class EmbeddingStore {
public:
    /// Throws DataError on duplicate ids, non-finite entries or a dimension
    /// different from the vectors already stored.
    void add(std::string id, EmbeddingVector vector);

    bool contains(const std::string& id) const;
    const EmbeddingVector& at(const std::string& id) const;
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    std::size_t dimension() const noexcept { return dimension_; }
    const std::vector<std::pair<std::string, EmbeddingVector>>& entries() const noexcept {
        return entries_;
    }

    /// Entries whose ids are in `ids`, in the order of `ids`.
    EmbeddingStore subset(std::span<const std::string> ids) const;

private:
    std::vector<std::pair<std::string, EmbeddingVector>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t dimension_ = 0;
};

/// JSONL: {"id": string, "vector": [real, ...]} per line.
EmbeddingStore parse_embeddings(std::istream& in);
EmbeddingStore load_embeddings(const std::filesystem::path& path);

SelectionResult select_embedding(const EmbeddingStore& train, std::span<const double> query,
                                 std::size_t k);

/// k distinct ids drawn without replacement (all of them when k >= size);
/// reported scores are 0.
SelectionResult select_random(std::span<const std::string> train_ids, std::size_t k,
                              std::uint64_t seed);

}  // namespace dialoscope::retrieval
