#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace refrank {

struct Document {
    std::string id;
    std::string text;
};

// Row-major store of N document vectors. Disk and memory layout is float32;
// all downstream arithmetic promotes to double.
class EmbeddingMatrix {
public:
    EmbeddingMatrix() = default;
    EmbeddingMatrix(std::size_t dim, std::vector<float> data);

    std::size_t dim() const { return dim_; }
    std::size_t count() const { return count_; }
    bool empty() const { return count_ == 0; }

    std::span<const float> row(std::size_t i) const {
        return {data_.data() + i * dim_, dim_};
    }
    double row_norm(std::size_t i) const { return norms_[i]; }
    const std::vector<float>& data() const { return data_; }

    void append_row(std::span<const double> v);

    // Recomputes norms and enforces finite entries and norm > 1e-12 per row.
    void validate();

private:
    std::size_t dim_ = 0;
    std::size_t count_ = 0;
    std::vector<float> data_;
    std::vector<double> norms_;
};

struct Qrels {
    std::map<std::string, std::set<std::string>> positives;
    // rel <= 0 judgments are kept as explicit negatives but never enter the
    // positive sets.
    std::map<std::string, std::set<std::string>> negatives;

    bool is_positive(const std::string& query_id, const std::string& doc_id) const;
    const std::set<std::string>* positives_for(const std::string& query_id) const;
};

struct CorpusIndex {
    std::vector<Document> documents;
    std::unordered_map<std::string, std::size_t> id_to_row;
    EmbeddingMatrix embeddings;

    std::size_t count() const { return documents.size(); }
    const std::string& row_to_id(std::size_t row) const { return documents[row].id; }
    bool has_embeddings() const { return embeddings.count() == documents.size(); }
    std::size_t row_of(const std::string& doc_id) const;  // throws UnknownDoc
};

// JSON-lines, one object per line with fields `id` and `text`. Row order is
// file order. Embeddings are attached separately.
CorpusIndex load_corpus(const std::filesystem::path& path);

// Binary format: 8-byte magic "RFRKEMB1", u32 LE dim, u64 LE count, then
// count*dim float32 LE values, row-major.
EmbeddingMatrix load_embeddings(const std::filesystem::path& path, std::size_t expected_count);
void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& matrix);

void attach_embeddings(CorpusIndex& index, EmbeddingMatrix matrix);

// TREC-style TSV: query_id <TAB> 0 <TAB> doc_id <TAB> relevance.
Qrels load_qrels(const std::filesystem::path& path, const CorpusIndex& corpus);

inline constexpr char kEmbeddingMagic[8] = {'R', 'F', 'R', 'K', 'E', 'M', 'B', '1'};

}  // namespace refrank
