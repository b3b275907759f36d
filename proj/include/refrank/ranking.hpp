#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "refrank/corpus.hpp"

namespace refrank {

// One score per corpus row, aligned with CorpusIndex row order.
using ScoreVector = std::vector<double>;

struct RankedDoc {
    std::string doc_id;
    double score;
};

// A total order over document ids. Rankings built by rank() are descending
// by score with ties broken by ascending doc_id; rerank_only may emit mixed
// score scales in which case only the positional order is meaningful.
struct Ranking {
    std::vector<RankedDoc> entries;
    std::unordered_map<std::string, std::size_t> position;

    std::size_t size() const { return entries.size(); }
    static Ranking from_entries(std::vector<RankedDoc> entries);
};

double cosine_similarity(std::span<const double> a, std::span<const double> b,
                         std::optional<double> norm_b = std::nullopt);
double cosine_similarity(std::span<const double> a, std::span<const float> b,
                         std::optional<double> norm_b = std::nullopt);

ScoreVector score_corpus(std::span<const double> z, const CorpusIndex& index);
Ranking rank(const ScoreVector& scores, const CorpusIndex& index);
std::vector<RankedDoc> top_k(const Ranking& ranking, std::size_t k);

// TSV lines `rank <TAB> doc_id <TAB> score`, scores with 9 significant digits.
std::string ranking_to_tsv(const Ranking& ranking);
void write_ranking_tsv(const std::filesystem::path& path, const Ranking& ranking);

}  // namespace refrank
