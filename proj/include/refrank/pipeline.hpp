#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "refrank/corpus.hpp"
#include "refrank/embedder.hpp"
#include "refrank/eval.hpp"
#include "refrank/refine.hpp"
#include "refrank/teacher.hpp"

namespace refrank {

inline constexpr char kArtifactVersion[] = "0.1.0";

extern const std::vector<std::string> kKnownSettings;  // original, rerank-only, ...

struct QueryInput {
    std::string id;
    std::string text;
};

// JSON-lines with fields `id` and `text`, same shape as the corpus file.
std::vector<QueryInput> load_queries(const std::filesystem::path& path);

struct OracleTeacherParams {
    double flip_probability = 0.0;
    double noise_sigma = 0.0;
};

struct RunConfig {
    std::filesystem::path corpus_path;
    std::filesystem::path embeddings_path;  // empty: embed document texts via the provider
    std::filesystem::path qrels_path;
    std::filesystem::path queries_path;

    EmbeddingProviderConfig provider;

    bool teacher_is_oracle = true;
    OracleTeacherParams oracle;
    TeacherClientConfig llm;
    YesNoTokenSets token_sets = YesNoTokenSets::defaults();

    RefinementConfig refinement;
    std::vector<std::string> settings = {"original", "rerank-only", "optimized"};
    std::string instruction;
    QueryTemplateVariant query_template = QueryTemplateVariant::Default;

    std::filesystem::path output_dir;  // empty: nothing written to disk
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::vector<std::size_t> recall_ks = {1, 5, 10, 20, 50, 100};
    double significance_alpha = 0.05;

    std::string raw_json;  // exact config bytes, copied into the output dir

    static RunConfig from_json(const std::string& text);
    static RunConfig from_json_file(const std::filesystem::path& path);
    void validate() const;  // throws BadConfig
    bool wants(const std::string& setting) const;
};

struct QueryLatency {
    std::string query_id;
    double embed_ms = 0.0;
    double initial_ranking_ms = 0.0;
    double optimization_ms = 0.0;  // refinement + final re-rank, teacher excluded
};

struct RunManifest {
    std::string artifact_version = kArtifactVersion;
    std::string config_hash;
    std::string started_at;
    std::string finished_at;
    std::vector<QueryLatency> per_query_latency;
    TeacherCallStats teacher;
    std::size_t degraded_rerank_only = 0;  // teacher failures broke the prefix contract
    std::size_t refinement_skipped = 0;    // fewer than 2 usable feedback scores
    std::size_t skipped_queries = 0;       // no positive judgments
};

std::string manifest_to_json(const RunManifest& manifest);

struct LoadedData {
    CorpusIndex index;
    Qrels qrels;
    std::vector<QueryInput> queries;
};

LoadedData load_inputs(const RunConfig& config);

struct PipelineResult {
    EvalReport report;
    RunManifest manifest;
};

// Full run over pre-loaded data with caller-supplied collaborators; used by
// the k-sweep so teacher state (cache, stats) persists across k values.
PipelineResult run_pipeline(const RunConfig& config, const LoadedData& data, Teacher& teacher,
                            EmbeddingProvider& provider);

// Convenience entry point: loads inputs, builds the teacher and provider from
// the config, runs, and writes report.json / per_query.csv / manifest.json /
// config.json under output_dir when it is set.
PipelineResult run_pipeline(const RunConfig& config);

}  // namespace refrank
