#include "dialoscope/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>

#include "json.hpp"

#include "dialoscope/error.hpp"
#include "random.hpp"
#include "str_util.hpp"

namespace dialoscope::retrieval {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (c >= 0x80 || std::isalnum(c)) {
            current += static_cast<char>(std::tolower(c));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::string_view to_string(SelectionMethod method) {
    switch (method) {
        case SelectionMethod::random: return "random";
        case SelectionMethod::bm25: return "bm25";
        case SelectionMethod::embedding: return "embedding";
    }
    return "unknown";
}

std::vector<std::string> SelectionResult::ids() const {
    std::vector<std::string> out;
    out.reserve(selected.size());
    for (const auto& s : selected) out.push_back(s.doc_id);
    return out;
}

namespace {

void require_k(std::size_t k) {
    if (k == 0) throw ConfigError("selection size k must be at least 1");
}

// Highest score first, then earliest insertion position.
std::vector<ScoredId> top_k(std::span<const double> scores, std::span<const std::string> ids,
                            std::size_t k) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t n = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    std::vector<ScoredId> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back({ids[order[i]], scores[order[i]]});
    return out;
}

}  // namespace

Bm25Index Bm25Index::build(std::span<const IndexDocument> docs, Bm25Params params) {
    if (!(params.k1 > 0.0) || !(params.b >= 0.0 && params.b <= 1.0)) {
        throw ConfigError("BM25 needs k1 > 0 and b in [0, 1]");
    }
    Bm25Index index;
    index.params_ = params;
    index.doc_ids_.reserve(docs.size());
    index.doc_lengths_.reserve(docs.size());
    index.doc_tf_.reserve(docs.size());

    std::uint64_t total_len = 0;
    for (const auto& doc : docs) {
        const auto pos = static_cast<std::uint32_t>(index.doc_ids_.size());
        if (!index.id_to_pos_.emplace(doc.doc_id, pos).second) {
            throw DataError("duplicate document id in BM25 corpus: " + doc.doc_id);
        }
        index.doc_ids_.push_back(doc.doc_id);

        const auto tokens = tokenize(doc.text);
        std::unordered_map<std::string, std::uint32_t> tf;
        for (const auto& t : tokens) ++tf[t];
        for (const auto& [term, count] : tf) index.postings_[term].push_back({pos, count});

        index.doc_lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
        total_len += tokens.size();
        index.doc_tf_.push_back(std::move(tf));
    }
    if (!docs.empty()) {
        index.avg_doc_len_ = static_cast<double>(total_len) / static_cast<double>(docs.size());
    }
    return index;
}

std::uint32_t Bm25Index::document_frequency(const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : static_cast<std::uint32_t>(it->second.size());
}

std::uint32_t Bm25Index::term_frequency(const std::string& doc_id, const std::string& term) const {
    const auto& tf = doc_tf_[position_of(doc_id)];
    auto it = tf.find(term);
    return it == tf.end() ? 0 : it->second;
}

double Bm25Index::idf(const std::string& term) const {
    const double n = static_cast<double>(doc_count());
    const double df = static_cast<double>(document_frequency(term));
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

double Bm25Index::term_weight(double idf, std::uint32_t tf, std::uint32_t doc_len) const {
    const double f = static_cast<double>(tf);
    const double norm = 1.0 - params_.b + params_.b * static_cast<double>(doc_len) / avg_doc_len_;
    return idf * f * (params_.k1 + 1.0) / (f + params_.k1 * norm);
}

std::size_t Bm25Index::position_of(const std::string& doc_id) const {
    auto it = id_to_pos_.find(doc_id);
    if (it == id_to_pos_.end()) throw DataError("document not in BM25 index: " + doc_id);
    return it->second;
}

double Bm25Index::score(std::span<const std::string> query_tokens, const std::string& doc_id) const {
    const std::size_t pos = position_of(doc_id);
    const auto& tf = doc_tf_[pos];
    double total = 0.0;
    for (const auto& term : query_tokens) {
        auto it = tf.find(term);
        if (it == tf.end()) continue;
        total += term_weight(idf(term), it->second, doc_lengths_[pos]);
    }
    return total;
}

std::vector<double> Bm25Index::score_all(std::span<const std::string> query_tokens) const {
    // Accumulates in query-token order per document, so each entry is
    // bit-identical to score().
    std::vector<double> scores(doc_count(), 0.0);
    for (const auto& term : query_tokens) {
        auto it = postings_.find(term);
        if (it == postings_.end()) continue;
        const double term_idf = idf(term);
        for (const auto& p : it->second) {
            scores[p.doc] += term_weight(term_idf, p.tf, doc_lengths_[p.doc]);
        }
    }
    return scores;
}

double bm25_score(const Bm25Index& index, std::span<const std::string> query_tokens,
                  const std::string& doc_id) {
    return index.score(query_tokens, doc_id);
}

SelectionResult select_bm25(const Bm25Index& index, std::string_view query_text, std::size_t k) {
    require_k(k);
    const auto query = tokenize(query_text);
    const auto scores = index.score_all(query);
    return {top_k(scores, index.doc_ids(), k), SelectionMethod::bm25};
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DataError("cosine similarity of vectors with lengths " + std::to_string(a.size()) +
                        " and " + std::to_string(b.size()));
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw DataError("cosine similarity of a zero-norm vector");
    const double c = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::clamp(c, -1.0, 1.0);
}

void EmbeddingStore::add(std::string id, EmbeddingVector vector) {
    if (vector.empty()) throw DataError("embedding for " + id + " is empty");
    if (!std::all_of(vector.begin(), vector.end(), [](double v) { return std::isfinite(v); })) {
        throw DataError("embedding for " + id + " has non-finite entries");
    }
    if (!entries_.empty() && vector.size() != dimension_) {
        throw DataError("embedding for " + id + " has length " + std::to_string(vector.size()) +
                        ", expected " + std::to_string(dimension_));
    }
    if (index_.count(id) != 0) throw DataError("duplicate embedding id " + id);
    dimension_ = vector.size();
    index_.emplace(id, entries_.size());
    entries_.emplace_back(std::move(id), std::move(vector));
}

bool EmbeddingStore::contains(const std::string& id) const { return index_.count(id) != 0; }

const EmbeddingVector& EmbeddingStore::at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("no embedding for id " + id);
    return entries_[it->second].second;
}

EmbeddingStore EmbeddingStore::subset(std::span<const std::string> ids) const {
    EmbeddingStore out;
    for (const auto& id : ids) out.add(id, at(id));
    return out;
}

EmbeddingStore parse_embeddings(std::istream& in) {
    EmbeddingStore store;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (detail::trim(raw).empty()) continue;
        const std::string where = "embeddings line " + std::to_string(line) + ": ";
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where + "invalid JSON: " + e.what());
        }
        if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) {
            throw DataError(where + "field 'id' missing or not a string");
        }
        if (!j.contains("vector") || !j["vector"].is_array()) {
            throw DataError(where + "field 'vector' missing or not an array");
        }
        EmbeddingVector v;
        v.reserve(j["vector"].size());
        for (const auto& x : j["vector"]) {
            if (!x.is_number()) throw DataError(where + "field 'vector' holds a non-number");
            v.push_back(x.get<double>());
        }
        try {
            store.add(j["id"].get<std::string>(), std::move(v));
        } catch (const DataError& e) {
            throw DataError(where + e.what());
        }
    }
    return store;
}

EmbeddingStore load_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open embeddings file " + path.string());
    return parse_embeddings(in);
}

SelectionResult select_embedding(const EmbeddingStore& train, std::span<const double> query,
                                 std::size_t k) {
    require_k(k);
    SelectionResult result{{}, SelectionMethod::embedding};
    if (train.empty()) return result;

    std::vector<double> scores;
    std::vector<std::string> ids;
    scores.reserve(train.size());
    ids.reserve(train.size());
    for (const auto& [id, vec] : train.entries()) {
        ids.push_back(id);
        scores.push_back(cosine_similarity(vec, query));
    }
    result.selected = top_k(scores, ids, k);
    return result;
}

SelectionResult select_random(std::span<const std::string> train_ids, std::size_t k,
                              std::uint64_t seed) {
    require_k(k);
    std::vector<std::string> pool(train_ids.begin(), train_ids.end());
    detail::seeded_shuffle(pool, seed);
    pool.resize(std::min(k, pool.size()));

    SelectionResult result{{}, SelectionMethod::random};
    result.selected.reserve(pool.size());
    for (auto& id : pool) result.selected.push_back({std::move(id), 0.0});
    return result;
}

}  // namespace dialoscope::retrieval
