#include "refrank/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "refrank/error.hpp"
#include "refrank/util.hpp"

namespace refrank {

namespace {

constexpr double kMinNorm = 1e-12;

double clamp_unit(double v) { return std::min(1.0, std::max(-1.0, v)); }

double norm_d(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

}  // namespace

Ranking Ranking::from_entries(std::vector<RankedDoc> entries) {
    Ranking r;
    r.entries = std::move(entries);
    r.position.reserve(r.entries.size());
    for (std::size_t i = 0; i < r.entries.size(); ++i) {
        auto [it, inserted] = r.position.emplace(r.entries[i].doc_id, i);
        if (!inserted) fail(Errc::Internal, "duplicate doc id in ranking: " + it->first);
    }
    return r;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b,
                         std::optional<double> norm_b) {
    if (a.size() != b.size())
        fail(Errc::DimMismatch,
             "dims " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    double na = norm_d(a);
    double nb = norm_b ? *norm_b : norm_d(b);
    if (na <= kMinNorm || nb <= kMinNorm) fail(Errc::ZeroNorm, "cosine of zero-norm vector");
    return clamp_unit(dot / (na * nb));
}

double cosine_similarity(std::span<const double> a, std::span<const float> b,
                         std::optional<double> norm_b) {
    if (a.size() != b.size())
        fail(Errc::DimMismatch,
             "dims " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double dot = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double bi = double(b[i]);
        dot += a[i] * bi;
        if (!norm_b) nb2 += bi * bi;
    }
    double na = norm_d(a);
    double nb = norm_b ? *norm_b : std::sqrt(nb2);
    if (na <= kMinNorm || nb <= kMinNorm) fail(Errc::ZeroNorm, "cosine of zero-norm vector");
    return clamp_unit(dot / (na * nb));
}

ScoreVector score_corpus(std::span<const double> z, const CorpusIndex& index) {
    const EmbeddingMatrix& m = index.embeddings;
    if (index.count() == 0) return {};
    if (!index.has_embeddings()) fail(Errc::Internal, "corpus index has no embeddings attached");
    if (z.size() != m.dim())
        fail(Errc::DimMismatch, "query dim " + std::to_string(z.size()) + " vs corpus dim " +
                                    std::to_string(m.dim()));
    double nz = norm_d(z);
    if (nz <= kMinNorm) fail(Errc::ZeroNorm, "query vector has zero norm");

    ScoreVector scores(m.count());
    const std::size_t d = m.dim();
    for (std::size_t i = 0; i < m.count(); ++i) {
        const float* row = m.data().data() + i * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += double(row[j]) * z[j];
        scores[i] = clamp_unit(dot / (nz * m.row_norm(i)));
    }
    return scores;
}

Ranking rank(const ScoreVector& scores, const CorpusIndex& index) {
    if (scores.size() != index.count())
        fail(Errc::LengthMismatch, "scores length " + std::to_string(scores.size()) +
                                       " vs corpus count " + std::to_string(index.count()));
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return index.row_to_id(a) < index.row_to_id(b);
    });
    std::vector<RankedDoc> entries;
    entries.reserve(order.size());
    for (std::size_t row : order) entries.push_back({index.row_to_id(row), scores[row]});
    return Ranking::from_entries(std::move(entries));
}

std::vector<RankedDoc> top_k(const Ranking& ranking, std::size_t k) {
    std::size_t take = std::min(k, ranking.entries.size());
    return {ranking.entries.begin(), ranking.entries.begin() + std::ptrdiff_t(take)};
}

std::string ranking_to_tsv(const Ranking& ranking) {
    std::string out;
    for (std::size_t i = 0; i < ranking.entries.size(); ++i) {
        out += std::to_string(i + 1);
        out += '\t';
        out += ranking.entries[i].doc_id;
        out += '\t';
        out += format_g(ranking.entries[i].score, 9);
        out += '\n';
    }
    return out;
}

void write_ranking_tsv(const std::filesystem::path& path, const Ranking& ranking) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(Errc::ParseError, "cannot open " + path.string() + " for writing");
    out << ranking_to_tsv(ranking);
    if (!out.good()) fail(Errc::ParseError, "write failed: " + path.string());
}

}  // namespace refrank
