#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "refrank/http.hpp"

namespace refrank {

enum class QueryTemplateVariant { Default, NoInstruction, InstructionPrefix, TaskTemplate,
                                  RetrieveTemplate };

QueryTemplateVariant parse_query_template_variant(const std::string& name);
std::string query_template_variant_name(QueryTemplateVariant variant);

// Byte-exact expansion of the selected query template.
std::string render_query_template(const std::string& instruction, const std::string& query,
                                  QueryTemplateVariant variant);

enum class EmbeddingProviderMode { Http, File, Synthetic };

struct EmbeddingProviderConfig {
    EmbeddingProviderMode mode = EmbeddingProviderMode::Synthetic;

    // Http mode: an embeddings endpoint taking {model, input: [...]}.
    std::string endpoint;
    std::string model;
    std::string api_key_env = "REFRANK_API_KEY";
    double timeout_seconds = 30.0;
    int max_retries = 3;
    double backoff_base_seconds = 0.5;
    std::size_t batch_size = 64;

    // File mode: JSON-lines of {"text_sha256": ..., "vector": [...]}, keyed by
    // the SHA-256 of the exact post-template text.
    std::string path;

    // Synthetic mode.
    std::size_t dim = 64;
    std::uint64_t seed = 0;

    void validate() const;  // throws BadConfig
};

// Deterministic pseudo-embedding: PRNG seeded from (seed, text), dim standard
// normals, normalized to unit length.
std::vector<double> synthetic_embed(const std::string& text, std::size_t dim, std::uint64_t seed);

class EmbeddingProvider {
public:
    // File mode loads its lookup table here, so embed() is safe to call from
    // multiple threads in every mode.
    explicit EmbeddingProvider(EmbeddingProviderConfig config,
                               std::shared_ptr<Transport> transport = nullptr);

    // One vector per text, in input order, all of equal dimension.
    std::vector<std::vector<double>> embed(const std::vector<std::string>& texts);

private:
    std::vector<std::vector<double>> embed_http(const std::vector<std::string>& texts);
    std::vector<std::vector<double>> embed_file(const std::vector<std::string>& texts);
    void load_file_table();

    EmbeddingProviderConfig config_;
    std::shared_ptr<Transport> transport_;
    std::unordered_map<std::string, std::vector<double>> file_table_;
};

std::vector<std::vector<double>> embed_texts(const std::vector<std::string>& texts,
                                             const EmbeddingProviderConfig& provider,
                                             std::shared_ptr<Transport> transport = nullptr);

}  // namespace refrank
