#include "refrank/corpus.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "refrank/error.hpp"

namespace refrank {

namespace {

constexpr double kMinRowNorm = 1e-12;

double norm_of(std::span<const float> row) {
    double acc = 0.0;
    for (float v : row) acc += double(v) * double(v);
    return std::sqrt(acc);
}

void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char(v >> (8 * i)));
}

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char(v >> (8 * i)));
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::size_t dim, std::vector<float> data)
    : dim_(dim), data_(std::move(data)) {
    if (dim_ == 0 || data_.size() % dim_ != 0)
        fail(Errc::Internal, "embedding data size not a multiple of dim");
    count_ = data_.size() / dim_;
    validate();
}

void EmbeddingMatrix::append_row(std::span<const double> v) {
    if (dim_ == 0) dim_ = v.size();
    if (v.size() != dim_)
        fail(Errc::DimMismatch, "appended row has dim " + std::to_string(v.size()) +
                                    ", matrix has dim " + std::to_string(dim_));
    for (double x : v) {
        if (!std::isfinite(x)) fail(Errc::ZeroNormRow, "non-finite entry in appended row");
        data_.push_back(float(x));
    }
    norms_.push_back(norm_of(row(count_)));
    if (norms_.back() <= kMinRowNorm)
        fail(Errc::ZeroNormRow, "appended row " + std::to_string(count_) + " has zero norm");
    ++count_;
}

void EmbeddingMatrix::validate() {
    norms_.resize(count_);
    for (std::size_t i = 0; i < count_; ++i) {
        for (float v : row(i)) {
            if (!std::isfinite(v))
                fail(Errc::ZeroNormRow, "non-finite entry in row " + std::to_string(i));
        }
        norms_[i] = norm_of(row(i));
        if (norms_[i] <= kMinRowNorm)
            fail(Errc::ZeroNormRow, "row " + std::to_string(i) + " has zero norm");
    }
}

bool Qrels::is_positive(const std::string& query_id, const std::string& doc_id) const {
    auto it = positives.find(query_id);
    return it != positives.end() && it->second.count(doc_id) > 0;
}

const std::set<std::string>* Qrels::positives_for(const std::string& query_id) const {
    auto it = positives.find(query_id);
    return it == positives.end() ? nullptr : &it->second;
}

std::size_t CorpusIndex::row_of(const std::string& doc_id) const {
    auto it = id_to_row.find(doc_id);
    if (it == id_to_row.end()) fail(Errc::UnknownDoc, "document id '" + doc_id + "' not in corpus");
    return it->second;
}

CorpusIndex load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::ParseError, "cannot open corpus file " + path.string());

    CorpusIndex index;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
        if (obj.is_discarded() || !obj.is_object())
            fail(Errc::ParseError, "malformed JSON at line " + std::to_string(line_no));
        if (!obj.contains("id") || !obj["id"].is_string())
            fail(Errc::SchemaError, "missing field 'id' at line " + std::to_string(line_no));
        if (!obj.contains("text") || !obj["text"].is_string())
            fail(Errc::SchemaError, "missing field 'text' at line " + std::to_string(line_no));
        Document doc{obj["id"].get<std::string>(), obj["text"].get<std::string>()};
        if (doc.id.empty())
            fail(Errc::SchemaError, "empty id at line " + std::to_string(line_no));
        auto [it, inserted] = index.id_to_row.emplace(doc.id, index.documents.size());
        if (!inserted)
            fail(Errc::DuplicateId,
                 "id '" + doc.id + "' repeated at line " + std::to_string(line_no));
        (void)it;
        index.documents.push_back(std::move(doc));
    }
    return index;
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path, std::size_t expected_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::TruncatedFile, "cannot open embeddings file " + path.string());

    char magic[8];
    if (!in.read(magic, 8)) fail(Errc::TruncatedFile, "file shorter than magic");
    if (std::memcmp(magic, kEmbeddingMagic, 8) != 0)
        fail(Errc::BadMagic, "not an embeddings file: " + path.string());

    unsigned char header[12];
    if (!in.read(reinterpret_cast<char*>(header), 12))
        fail(Errc::TruncatedFile, "file shorter than header");
    std::uint32_t dim = 0;
    for (int i = 0; i < 4; ++i) dim |= std::uint32_t(header[i]) << (8 * i);
    std::uint64_t count = 0;
    for (int i = 0; i < 8; ++i) count |= std::uint64_t(header[4 + i]) << (8 * i);

    if (dim == 0) fail(Errc::BadMagic, "header declares dim 0");
    if (count != expected_count)
        fail(Errc::CountMismatch, "file has " + std::to_string(count) + " rows, expected " +
                                      std::to_string(expected_count));

    std::vector<float> data(std::size_t(count) * dim);
    if (!data.empty()) {
        in.read(reinterpret_cast<char*>(data.data()),
                std::streamsize(data.size() * sizeof(float)));
        if (std::size_t(in.gcount()) != data.size() * sizeof(float))
            fail(Errc::TruncatedFile, "embedding payload shorter than header promises");
    }
    // Little-endian floats on disk; this loader assumes a little-endian host.
    char extra;
    if (in.read(&extra, 1))
        fail(Errc::TruncatedFile, "trailing bytes after embedding payload");

    if (count == 0) return EmbeddingMatrix();
    return EmbeddingMatrix(dim, std::move(data));
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& matrix) {
    std::string header;
    header.append(kEmbeddingMagic, 8);
    put_u32_le(header, std::uint32_t(matrix.dim()));
    put_u64_le(header, std::uint64_t(matrix.count()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::ParseError, "cannot open " + path.string() + " for writing");
    out.write(header.data(), std::streamsize(header.size()));
    if (!matrix.data().empty())
        out.write(reinterpret_cast<const char*>(matrix.data().data()),
                  std::streamsize(matrix.data().size() * sizeof(float)));
    if (!out.good()) fail(Errc::ParseError, "write failed: " + path.string());
}

void attach_embeddings(CorpusIndex& index, EmbeddingMatrix matrix) {
    if (matrix.count() != index.documents.size())
        fail(Errc::CountMismatch, "embeddings have " + std::to_string(matrix.count()) +
                                      " rows, corpus has " +
                                      std::to_string(index.documents.size()) + " documents");
    index.embeddings = std::move(matrix);
}

Qrels load_qrels(const std::filesystem::path& path, const CorpusIndex& corpus) {
    std::ifstream in(path);
    if (!in) fail(Errc::ParseError, "cannot open qrels file " + path.string());

    Qrels qrels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            cols.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (cols.size() != 4)
            fail(Errc::ParseError,
                 "expected 4 tab-separated columns at line " + std::to_string(line_no));
        const std::string& query_id = cols[0];
        const std::string& doc_id = cols[2];
        long relevance = 0;
        try {
            std::size_t pos = 0;
            relevance = std::stol(cols[3], &pos);
            if (pos != cols[3].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            fail(Errc::ParseError, "bad relevance value at line " + std::to_string(line_no));
        }
        if (query_id.empty() || doc_id.empty())
            fail(Errc::ParseError, "empty id at line " + std::to_string(line_no));
        if (corpus.id_to_row.find(doc_id) == corpus.id_to_row.end())
            fail(Errc::UnknownDoc,
                 "doc '" + doc_id + "' at line " + std::to_string(line_no) + " not in corpus");
        if (relevance > 0)
            qrels.positives[query_id].insert(doc_id);
        else
            qrels.negatives[query_id].insert(doc_id);
    }
    return qrels;
}

}  // namespace refrank
