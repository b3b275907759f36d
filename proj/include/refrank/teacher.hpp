#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "refrank/corpus.hpp"
#include "refrank/feedback.hpp"
#include "refrank/http.hpp"

namespace refrank {

struct TeacherClientConfig {
    std::string endpoint;  // chat-completions URL, e.g. http://host:8000/v1/chat/completions
    std::string model;
    std::string api_key_env = "REFRANK_API_KEY";
    double timeout_seconds = 30.0;
    int max_retries = 3;
    double backoff_base_seconds = 0.5;
    int max_concurrency = 4;
    int top_logprobs = 20;
    std::string cache_dir;  // empty disables the response cache

    void validate() const;  // throws BadConfig
};

struct YesNoTokenSets {
    std::set<std::string> yes_variants;
    std::set<std::string> no_variants;

    // Case variants of yes/no, each also with a leading space and with "." or
    // "," appended. Sets are configurable; these are the defaults.
    static YesNoTokenSets defaults();
    void validate() const;  // throws BadConfig (empty or overlapping sets)
};

// Exact relevance-judgment prompt sent to the teacher model.
std::string render_feedback_prompt(const std::string& query, const std::string& doc,
                                   const std::string& task_instruction);

// P_yes / (P_yes + P_no) over the token variants present in the map;
// nullopt (indeterminate) when neither set is represented.
std::optional<double> feedback_score_from_logprobs(
    const std::map<std::string, double>& first_token_logprobs, const YesNoTokenSets& token_sets);

// Case-insensitive match of a generated token's text against the yes/no sets:
// 1.0 for yes, 0.0 for no, nullopt when neither matches.
std::optional<double> feedback_score_from_text(const std::string& text,
                                               const YesNoTokenSets& token_sets);

// Disk cache of raw teacher responses, one JSON file per (model, prompt).
class ResponseCache {
public:
    explicit ResponseCache(std::filesystem::path dir);

    std::optional<std::string> get(const std::string& model, const std::string& prompt) const;
    void put(const std::string& model, const std::string& prompt, const std::string& body) const;
    std::filesystem::path entry_path(const std::string& model, const std::string& prompt) const;

    std::size_t count() const;
    std::size_t clear() const;  // returns number of entries removed
    const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
};

struct TeacherCallStats {
    std::size_t requests = 0;  // HTTP calls issued (cache hits excluded)
    std::size_t cache_hits = 0;
    std::size_t retries = 0;
    std::size_t text_fallbacks = 0;
    std::size_t default_scores = 0;
    std::size_t failed_pairs = 0;
    std::size_t generations = 0;

    void add(const TeacherCallStats& other);
};

struct ScorePairsRequest {
    std::string query_id;
    std::string query_text;
    std::string task_instruction;
    std::vector<Document> docs;  // feedback documents, in ranking order
};

// Scores each (query, doc) pair with one pointwise teacher request, at most
// config.max_concurrency in flight, preserving request order in the result.
// Pairs that fail after all retries land in FeedbackSet::failed; if every
// pair fails, throws AllPairsFailed.
FeedbackSet score_pairs(const ScorePairsRequest& request, const TeacherClientConfig& config,
                        Transport& transport, const YesNoTokenSets& token_sets,
                        const ResponseCache* cache = nullptr, TeacherCallStats* stats = nullptr);

// Deterministic stand-in for the LLM teacher: base score is the binary
// relevance label, flipped with flip_probability, plus clamped Gaussian noise.
FeedbackSet oracle_teacher(const std::string& query_id, const std::vector<Document>& docs,
                           const Qrels& qrels, double flip_probability, double noise_sigma,
                           std::uint64_t seed);

// Asks the model to write a hypothetical document matching the query; the
// returned text is embedded in place of the query text.
std::string hyde_generate(const std::string& query, const TeacherClientConfig& config,
                          Transport& transport, TeacherCallStats* stats = nullptr);

// Uniform interface so the pipeline can swap the LLM client for the oracle.
class Teacher {
public:
    virtual ~Teacher() = default;
    virtual FeedbackSet score(const std::string& query_id, const std::string& query_text,
                              const std::string& instruction,
                              const std::vector<Document>& docs) = 0;
    // Hypothetical-document generation; only LLM-backed teachers support it.
    virtual std::string generate_hyde(const std::string& query_text);
    virtual TeacherCallStats stats() const { return {}; }
};

class OracleTeacher final : public Teacher {
public:
    OracleTeacher(const Qrels& qrels, double flip_probability, double noise_sigma,
                  std::uint64_t seed)
        : qrels_(qrels), flip_(flip_probability), sigma_(noise_sigma), seed_(seed) {}

    FeedbackSet score(const std::string& query_id, const std::string&, const std::string&,
                      const std::vector<Document>& docs) override {
        return oracle_teacher(query_id, docs, qrels_, flip_, sigma_, seed_);
    }

private:
    const Qrels& qrels_;
    double flip_;
    double sigma_;
    std::uint64_t seed_;
};

class LlmTeacher final : public Teacher {
public:
    LlmTeacher(TeacherClientConfig config, std::shared_ptr<Transport> transport,
               YesNoTokenSets token_sets, std::shared_ptr<ResponseCache> cache);

    // Safe to call concurrently from multiple query workers.
    FeedbackSet score(const std::string& query_id, const std::string& query_text,
                      const std::string& instruction,
                      const std::vector<Document>& docs) override;
    std::string generate_hyde(const std::string& query_text) override;
    TeacherCallStats stats() const override;

    const TeacherClientConfig& config() const { return config_; }
    Transport& transport() { return *transport_; }

private:
    TeacherClientConfig config_;
    std::shared_ptr<Transport> transport_;
    YesNoTokenSets token_sets_;
    std::shared_ptr<ResponseCache> cache_;
    mutable std::mutex stats_mutex_;
    TeacherCallStats stats_;
};

}  // namespace refrank
