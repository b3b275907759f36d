#include "refrank/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "refrank/analysis.hpp"
#include "refrank/error.hpp"
#include "refrank/ranking.hpp"
#include "refrank/util.hpp"

namespace refrank {

namespace {

using nlohmann::json;

const std::vector<std::pair<std::string, std::string>> kCanonicalPairs = {
    {"original", "rerank-only"},      {"original", "optimized"},
    {"rerank-only", "optimized"},     {"original", "hyde"},
    {"hyde", "hyde-optimized"},       {"original", "hyde-optimized"},
};

std::string iso8601_utc_now() {
    std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

double ms_between(std::chrono::steady_clock::time_point a,
                  std::chrono::steady_clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
}

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (key == a) { known = true; break; }
        if (!known)
            fail(Errc::BadConfig, "unknown key '" + key + "' in " + section);
    }
}

std::string get_string(const json& j, const char* key, const std::string& section,
                       const std::string& fallback, bool required = false) {
    if (!j.contains(key)) {
        if (required) fail(Errc::BadConfig, section + " is missing required key '" + key + "'");
        return fallback;
    }
    if (!j[key].is_string())
        fail(Errc::BadConfig, section + "." + key + " must be a string");
    return j[key].get<std::string>();
}

double get_number(const json& j, const char* key, const std::string& section, double fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number()) fail(Errc::BadConfig, section + "." + key + " must be a number");
    return j[key].get<double>();
}

std::int64_t get_integer(const json& j, const char* key, const std::string& section,
                         std::int64_t fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number_integer())
        fail(Errc::BadConfig, section + "." + key + " must be an integer");
    return j[key].get<std::int64_t>();
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::ParseError, "cannot open " + path.string() + " for writing");
    out << content;
    if (!out.good()) fail(Errc::ParseError, "write failed: " + path.string());
}

json provider_to_json(const EmbeddingProviderConfig& p) {
    json j;
    switch (p.mode) {
        case EmbeddingProviderMode::Http:
            j["mode"] = "http";
            j["endpoint"] = p.endpoint;
            j["model"] = p.model;
            j["api_key_env"] = p.api_key_env;
            j["timeout_seconds"] = p.timeout_seconds;
            j["max_retries"] = p.max_retries;
            j["backoff_base_seconds"] = p.backoff_base_seconds;
            j["batch_size"] = p.batch_size;
            break;
        case EmbeddingProviderMode::File:
            j["mode"] = "file";
            j["path"] = p.path;
            break;
        case EmbeddingProviderMode::Synthetic:
            j["mode"] = "synthetic";
            j["dim"] = p.dim;
            j["seed"] = p.seed;
            break;
    }
    return j;
}

json teacher_to_json(const RunConfig& c) {
    json j;
    if (c.teacher_is_oracle) {
        j["mode"] = "oracle";
        j["flip_probability"] = c.oracle.flip_probability;
        j["noise_sigma"] = c.oracle.noise_sigma;
    } else {
        j["mode"] = "llm";
        j["endpoint"] = c.llm.endpoint;
        j["model"] = c.llm.model;
        j["api_key_env"] = c.llm.api_key_env;
        j["timeout_seconds"] = c.llm.timeout_seconds;
        j["max_retries"] = c.llm.max_retries;
        j["backoff_base_seconds"] = c.llm.backoff_base_seconds;
        j["max_concurrency"] = c.llm.max_concurrency;
        j["top_logprobs"] = c.llm.top_logprobs;
        if (!c.llm.cache_dir.empty()) j["cache_dir"] = c.llm.cache_dir;
        j["yes_tokens"] = c.token_sets.yes_variants;
        j["no_tokens"] = c.token_sets.no_variants;
    }
    return j;
}

std::string config_to_canonical_json(const RunConfig& c) {
    json j;
    j["corpus"] = c.corpus_path.string();
    if (!c.embeddings_path.empty()) j["embeddings"] = c.embeddings_path.string();
    j["qrels"] = c.qrels_path.string();
    j["queries"] = c.queries_path.string();
    j["embedding_provider"] = provider_to_json(c.provider);
    j["teacher"] = teacher_to_json(c);
    json r;
    r["k"] = c.refinement.k;
    r["steps"] = c.refinement.steps;
    r["learning_rate"] = c.refinement.learning_rate;
    r["adam_beta1"] = c.refinement.adam_beta1;
    r["adam_beta2"] = c.refinement.adam_beta2;
    r["adam_eps"] = c.refinement.adam_eps;
    r["normalization"] = teacher_normalization_name(c.refinement.normalization);
    j["refinement"] = std::move(r);
    j["settings"] = c.settings;
    j["instruction"] = c.instruction;
    j["query_template"] = query_template_variant_name(c.query_template);
    if (!c.output_dir.empty()) j["output_dir"] = c.output_dir.string();
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["recall_ks"] = c.recall_ks;
    j["significance_alpha"] = c.significance_alpha;
    return j.dump(2) + "\n";
}

}  // namespace

const std::vector<std::string> kKnownSettings = {"original", "rerank-only", "optimized", "hyde",
                                                 "hyde-optimized"};

std::vector<QueryInput> load_queries(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::ParseError, "cannot open query file " + path.string());
    std::vector<QueryInput> queries;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded() || !j.is_object())
            fail(Errc::ParseError, path.string() + " line " + std::to_string(lineno) +
                                       ": malformed JSON");
        if (!j.contains("id") || !j["id"].is_string())
            fail(Errc::SchemaError,
                 path.string() + " line " + std::to_string(lineno) + ": missing field 'id'");
        if (!j.contains("text") || !j["text"].is_string())
            fail(Errc::SchemaError,
                 path.string() + " line " + std::to_string(lineno) + ": missing field 'text'");
        QueryInput q{j["id"].get<std::string>(), j["text"].get<std::string>()};
        if (q.id.empty())
            fail(Errc::SchemaError,
                 path.string() + " line " + std::to_string(lineno) + ": empty query id");
        if (!seen.insert(q.id).second)
            fail(Errc::DuplicateId,
                 "query id '" + q.id + "' repeated at line " + std::to_string(lineno));
        queries.push_back(std::move(q));
    }
    return queries;
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object()) fail(Errc::BadConfig, "config is not a JSON object");
    check_keys(j, "config",
               {"corpus", "embeddings", "qrels", "queries", "embedding_provider", "teacher",
                "refinement", "settings", "instruction", "query_template", "output_dir", "seed",
                "threads", "recall_ks", "significance_alpha"});

    RunConfig c;
    c.raw_json = text;
    c.corpus_path = get_string(j, "corpus", "config", "", /*required=*/true);
    c.embeddings_path = get_string(j, "embeddings", "config", "");
    c.qrels_path = get_string(j, "qrels", "config", "", /*required=*/true);
    c.queries_path = get_string(j, "queries", "config", "", /*required=*/true);
    c.instruction = get_string(j, "instruction", "config", "");
    c.query_template =
        parse_query_template_variant(get_string(j, "query_template", "config", "default"));
    c.output_dir = get_string(j, "output_dir", "config", "");
    std::int64_t seed = get_integer(j, "seed", "config", 0);
    if (seed < 0) fail(Errc::BadConfig, "seed must be non-negative");
    c.seed = std::uint64_t(seed);
    std::int64_t threads = get_integer(j, "threads", "config", 1);
    if (threads < 1) fail(Errc::BadConfig, "threads must be >= 1");
    c.threads = std::size_t(threads);
    c.significance_alpha = get_number(j, "significance_alpha", "config", 0.05);

    if (j.contains("settings")) {
        if (!j["settings"].is_array()) fail(Errc::BadConfig, "settings must be an array");
        c.settings.clear();
        for (const json& s : j["settings"]) {
            if (!s.is_string()) fail(Errc::BadConfig, "settings entries must be strings");
            c.settings.push_back(s.get<std::string>());
        }
    }
    if (j.contains("recall_ks")) {
        if (!j["recall_ks"].is_array()) fail(Errc::BadConfig, "recall_ks must be an array");
        c.recall_ks.clear();
        for (const json& k : j["recall_ks"]) {
            if (!k.is_number_integer() || k.get<std::int64_t>() < 1)
                fail(Errc::BadConfig, "recall_ks entries must be positive integers");
            c.recall_ks.push_back(k.get<std::size_t>());
        }
    }

    if (j.contains("embedding_provider")) {
        const json& p = j["embedding_provider"];
        if (!p.is_object()) fail(Errc::BadConfig, "embedding_provider must be an object");
        check_keys(p, "embedding_provider",
                   {"mode", "endpoint", "model", "api_key_env", "timeout_seconds", "max_retries",
                    "backoff_base_seconds", "batch_size", "path", "dim", "seed"});
        std::string mode = get_string(p, "mode", "embedding_provider", "synthetic");
        if (mode == "http") {
            c.provider.mode = EmbeddingProviderMode::Http;
            c.provider.endpoint =
                get_string(p, "endpoint", "embedding_provider", "", /*required=*/true);
            c.provider.model = get_string(p, "model", "embedding_provider", "", /*required=*/true);
            c.provider.api_key_env =
                get_string(p, "api_key_env", "embedding_provider", c.provider.api_key_env);
            c.provider.timeout_seconds =
                get_number(p, "timeout_seconds", "embedding_provider", c.provider.timeout_seconds);
            c.provider.max_retries = int(
                get_integer(p, "max_retries", "embedding_provider", c.provider.max_retries));
            c.provider.backoff_base_seconds = get_number(p, "backoff_base_seconds",
                                                         "embedding_provider",
                                                         c.provider.backoff_base_seconds);
            c.provider.batch_size = std::size_t(get_integer(
                p, "batch_size", "embedding_provider", std::int64_t(c.provider.batch_size)));
        } else if (mode == "file") {
            c.provider.mode = EmbeddingProviderMode::File;
            c.provider.path = get_string(p, "path", "embedding_provider", "", /*required=*/true);
        } else if (mode == "synthetic") {
            c.provider.mode = EmbeddingProviderMode::Synthetic;
            c.provider.dim =
                std::size_t(get_integer(p, "dim", "embedding_provider", std::int64_t(c.provider.dim)));
            c.provider.seed = std::uint64_t(
                get_integer(p, "seed", "embedding_provider", std::int64_t(c.seed)));
        } else {
            fail(Errc::BadConfig, "embedding_provider.mode must be http, file, or synthetic");
        }
    } else {
        c.provider.seed = c.seed;
    }

    if (j.contains("teacher")) {
        const json& t = j["teacher"];
        if (!t.is_object()) fail(Errc::BadConfig, "teacher must be an object");
        check_keys(t, "teacher",
                   {"mode", "flip_probability", "noise_sigma", "endpoint", "model", "api_key_env",
                    "timeout_seconds", "max_retries", "backoff_base_seconds", "max_concurrency",
                    "top_logprobs", "cache_dir", "yes_tokens", "no_tokens"});
        std::string mode = get_string(t, "mode", "teacher", "oracle");
        if (mode == "oracle") {
            c.teacher_is_oracle = true;
            c.oracle.flip_probability =
                get_number(t, "flip_probability", "teacher", c.oracle.flip_probability);
            c.oracle.noise_sigma = get_number(t, "noise_sigma", "teacher", c.oracle.noise_sigma);
        } else if (mode == "llm") {
            c.teacher_is_oracle = false;
            c.llm.endpoint = get_string(t, "endpoint", "teacher", "", /*required=*/true);
            c.llm.model = get_string(t, "model", "teacher", "", /*required=*/true);
            c.llm.api_key_env = get_string(t, "api_key_env", "teacher", c.llm.api_key_env);
            c.llm.timeout_seconds =
                get_number(t, "timeout_seconds", "teacher", c.llm.timeout_seconds);
            c.llm.max_retries = int(get_integer(t, "max_retries", "teacher", c.llm.max_retries));
            c.llm.backoff_base_seconds =
                get_number(t, "backoff_base_seconds", "teacher", c.llm.backoff_base_seconds);
            c.llm.max_concurrency =
                int(get_integer(t, "max_concurrency", "teacher", c.llm.max_concurrency));
            c.llm.top_logprobs =
                int(get_integer(t, "top_logprobs", "teacher", c.llm.top_logprobs));
            c.llm.cache_dir = get_string(t, "cache_dir", "teacher", "");
            auto read_tokens = [&](const char* key, std::set<std::string>& into) {
                if (!t.contains(key)) return;
                if (!t[key].is_array()) fail(Errc::BadConfig, std::string("teacher.") + key +
                                                                  " must be an array of strings");
                into.clear();
                for (const json& s : t[key]) {
                    if (!s.is_string())
                        fail(Errc::BadConfig,
                             std::string("teacher.") + key + " must be an array of strings");
                    into.insert(s.get<std::string>());
                }
            };
            read_tokens("yes_tokens", c.token_sets.yes_variants);
            read_tokens("no_tokens", c.token_sets.no_variants);
        } else {
            fail(Errc::BadConfig, "teacher.mode must be oracle or llm");
        }
    }

    if (j.contains("refinement")) {
        const json& r = j["refinement"];
        if (!r.is_object()) fail(Errc::BadConfig, "refinement must be an object");
        check_keys(r, "refinement",
                   {"k", "steps", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
                    "normalization"});
        std::int64_t k = get_integer(r, "k", "refinement", std::int64_t(c.refinement.k));
        if (k < 1) fail(Errc::BadConfig, "refinement.k must be >= 1");
        c.refinement.k = std::size_t(k);
        std::int64_t steps =
            get_integer(r, "steps", "refinement", std::int64_t(c.refinement.steps));
        if (steps < 0) fail(Errc::BadConfig, "refinement.steps must be >= 0");
        c.refinement.steps = std::size_t(steps);
        c.refinement.learning_rate =
            get_number(r, "learning_rate", "refinement", c.refinement.learning_rate);
        c.refinement.adam_beta1 = get_number(r, "adam_beta1", "refinement", c.refinement.adam_beta1);
        c.refinement.adam_beta2 = get_number(r, "adam_beta2", "refinement", c.refinement.adam_beta2);
        c.refinement.adam_eps = get_number(r, "adam_eps", "refinement", c.refinement.adam_eps);
        c.refinement.normalization = parse_teacher_normalization(
            get_string(r, "normalization", "refinement",
                       teacher_normalization_name(c.refinement.normalization)));
    }

    c.validate();
    return c;
}

RunConfig RunConfig::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::BadConfig, "cannot open config file " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

bool RunConfig::wants(const std::string& setting) const {
    return std::find(settings.begin(), settings.end(), setting) != settings.end();
}

void RunConfig::validate() const {
    if (settings.empty()) fail(Errc::BadConfig, "no settings requested");
    std::set<std::string> seen;
    for (const auto& s : settings) {
        if (std::find(kKnownSettings.begin(), kKnownSettings.end(), s) == kKnownSettings.end())
            fail(Errc::BadConfig, "unknown setting '" + s + "'");
        if (!seen.insert(s).second) fail(Errc::BadConfig, "setting '" + s + "' listed twice");
    }
    if (wants("hyde-optimized") && !wants("hyde"))
        fail(Errc::BadConfig, "hyde-optimized requires the hyde setting");
    if ((wants("hyde") || wants("hyde-optimized")) && teacher_is_oracle)
        fail(Errc::BadConfig, "hyde settings require an llm teacher");
    if (threads < 1) fail(Errc::BadConfig, "threads must be >= 1");
    if (significance_alpha <= 0 || significance_alpha >= 1)
        fail(Errc::BadConfig, "significance_alpha must be in (0, 1)");
    if (recall_ks.empty()) fail(Errc::BadConfig, "recall_ks must be non-empty");
    for (std::size_t k : recall_ks)
        if (k < 1) fail(Errc::BadConfig, "recall_ks entries must be >= 1");
    if (oracle.flip_probability < 0 || oracle.flip_probability > 1)
        fail(Errc::BadConfig, "flip_probability must be in [0, 1]");
    if (oracle.noise_sigma < 0) fail(Errc::BadConfig, "noise_sigma must be >= 0");
    refinement.validate();
    provider.validate();
    if (!teacher_is_oracle) {
        llm.validate();
        token_sets.validate();
    }
}

std::string manifest_to_json(const RunManifest& manifest) {
    json j;
    j["artifact_version"] = manifest.artifact_version;
    j["config_hash"] = manifest.config_hash;
    j["started_at"] = manifest.started_at;
    j["finished_at"] = manifest.finished_at;
    j["degraded_rerank_only"] = manifest.degraded_rerank_only;
    j["refinement_skipped"] = manifest.refinement_skipped;
    j["skipped_queries"] = manifest.skipped_queries;
    json teacher;
    teacher["requests"] = manifest.teacher.requests;
    teacher["cache_hits"] = manifest.teacher.cache_hits;
    teacher["retries"] = manifest.teacher.retries;
    teacher["text_fallbacks"] = manifest.teacher.text_fallbacks;
    teacher["default_scores"] = manifest.teacher.default_scores;
    teacher["failed_pairs"] = manifest.teacher.failed_pairs;
    teacher["generations"] = manifest.teacher.generations;
    j["teacher"] = std::move(teacher);
    json lat = json::array();
    for (const auto& q : manifest.per_query_latency) {
        json entry;
        entry["query_id"] = q.query_id;
        entry["embed"] = q.embed_ms;
        entry["initial_ranking"] = q.initial_ranking_ms;
        entry["optimization"] = q.optimization_ms;
        lat.push_back(std::move(entry));
    }
    j["per_query_latency_ms"] = std::move(lat);
    return j.dump(2) + "\n";
}

LoadedData load_inputs(const RunConfig& config) {
    LoadedData data;
    data.index = load_corpus(config.corpus_path);
    if (!config.embeddings_path.empty()) {
        attach_embeddings(data.index,
                          load_embeddings(config.embeddings_path, data.index.count()));
    } else {
        // No embedding file: embed the document texts with the run's provider.
        EmbeddingProvider provider(config.provider);
        std::vector<std::string> texts;
        texts.reserve(data.index.count());
        for (const auto& doc : data.index.documents) texts.push_back(doc.text);
        EmbeddingMatrix matrix;
        if (!texts.empty()) {
            for (const auto& v : provider.embed(texts)) matrix.append_row(v);
        }
        attach_embeddings(data.index, std::move(matrix));
    }
    data.qrels = load_qrels(config.qrels_path, data.index);
    data.queries = load_queries(config.queries_path);
    return data;
}

namespace {

struct PerQueryOutcome {
    bool skipped_no_positives = false;
    bool degraded_rerank = false;
    bool refinement_skipped = false;
    QueryResult result;
    QueryLatency latency;
    // Feedback quality inputs (original-ranking feedback set).
    bool has_feedback_auc = false;
    double feedback_auc = 0.0;
};

PerQueryOutcome process_query(const QueryInput& query, const RunConfig& config,
                              const LoadedData& data, Teacher& teacher,
                              EmbeddingProvider& provider) {
    using clock = std::chrono::steady_clock;
    PerQueryOutcome out;
    out.result.query_id = query.id;
    out.latency.query_id = query.id;

    const std::set<std::string>* positives = data.qrels.positives_for(query.id);
    if (!positives || positives->empty()) {
        out.skipped_no_positives = true;
        return out;
    }

    // Embed the templated query text.
    auto t0 = clock::now();
    std::vector<double> z0 =
        provider.embed({render_query_template(config.instruction, query.text,
                                              config.query_template)})[0];
    auto t1 = clock::now();
    out.latency.embed_ms = ms_between(t0, t1);

    // Initial full-corpus ranking.
    Ranking original = rank(score_corpus(z0, data.index), data.index);
    auto t2 = clock::now();
    out.latency.initial_ranking_ms = ms_between(t1, t2);

    // Teacher feedback on the fixed top-k prefix of the initial ranking.
    bool needs_feedback = config.wants("rerank-only") || config.wants("optimized");
    FeedbackSet feedback;
    std::size_t prefix = std::min(config.refinement.k, original.entries.size());
    if (needs_feedback) {
        std::vector<Document> docs;
        docs.reserve(prefix);
        for (std::size_t i = 0; i < prefix; ++i) {
            std::size_t row = data.index.row_of(original.entries[i].doc_id);
            docs.push_back(data.index.documents[row]);
        }
        feedback = teacher.score(query.id, query.text, config.instruction, docs);
    }

    if (config.wants("original")) out.result.ranking_by_setting["original"] = original;

    if (config.wants("rerank-only")) {
        if (feedback.failed.empty() && feedback.entries.size() == prefix) {
            out.result.ranking_by_setting["rerank-only"] =
                rerank_only(original, feedback, config.refinement.k);
        } else {
            // Teacher failures broke the exact-prefix contract; fall back to
            // the untouched ranking and tally the degradation.
            out.degraded_rerank = true;
            out.result.ranking_by_setting["rerank-only"] = original;
        }
    }

    if (config.wants("optimized")) {
        auto t3 = clock::now();
        RefinementResult refined = refine_query(z0, feedback, data.index, config.refinement);
        if (refined.skipped) {
            out.refinement_skipped = true;
            out.result.ranking_by_setting["optimized"] = original;
        } else {
            out.result.ranking_by_setting["optimized"] =
                rank(score_corpus(refined.z, data.index), data.index);
        }
        out.latency.optimization_ms = ms_between(t3, clock::now());
    }

    if (config.wants("hyde")) {
        std::string hyde_text = teacher.generate_hyde(query.text);
        std::vector<double> z_h =
            provider.embed({render_query_template(config.instruction, hyde_text,
                                                  config.query_template)})[0];
        Ranking hyde_ranking = rank(score_corpus(z_h, data.index), data.index);

        if (config.wants("hyde-optimized")) {
            std::size_t hyde_prefix = std::min(config.refinement.k, hyde_ranking.entries.size());
            std::vector<Document> docs;
            docs.reserve(hyde_prefix);
            for (std::size_t i = 0; i < hyde_prefix; ++i) {
                std::size_t row = data.index.row_of(hyde_ranking.entries[i].doc_id);
                docs.push_back(data.index.documents[row]);
            }
            // Relevance is judged against the user's actual query, not the
            // generated pseudo-document.
            FeedbackSet hyde_feedback =
                teacher.score(query.id, query.text, config.instruction, docs);
            RefinementResult refined =
                refine_query(z_h, hyde_feedback, data.index, config.refinement);
            if (refined.skipped) {
                out.refinement_skipped = true;
                out.result.ranking_by_setting["hyde-optimized"] = hyde_ranking;
            } else {
                out.result.ranking_by_setting["hyde-optimized"] =
                    rank(score_corpus(refined.z, data.index), data.index);
            }
        }
        out.result.ranking_by_setting["hyde"] = std::move(hyde_ranking);
    }

    for (const auto& [setting, ranking] : out.result.ranking_by_setting)
        out.result.ap_by_setting[setting] = average_precision(ranking, *positives);

    // Teacher quality on the feedback set: AUC of scores against the labels.
    if (needs_feedback && !feedback.entries.empty()) {
        std::vector<double> scores;
        std::vector<int> labels;
        bool has_pos = false, has_neg = false;
        for (const auto& e : feedback.entries) {
            scores.push_back(e.score);
            int label = data.qrels.is_positive(query.id, e.doc_id) ? 1 : 0;
            labels.push_back(label);
            (label ? has_pos : has_neg) = true;
        }
        if (has_pos && has_neg) {
            out.feedback_auc = roc_auc(scores, labels);
            out.has_feedback_auc = true;
        }
    }
    return out;
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& config, const LoadedData& data, Teacher& teacher,
                            EmbeddingProvider& provider) {
    config.validate();
    PipelineResult result;
    result.manifest.started_at = iso8601_utc_now();
    result.manifest.config_hash =
        sha256_hex(config.raw_json.empty() ? config_to_canonical_json(config) : config.raw_json);

    std::vector<PerQueryOutcome> outcomes(data.queries.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;

    auto work = [&]() {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= data.queries.size()) break;
            try {
                outcomes[i] = process_query(data.queries[i], config, data, teacher, provider);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                break;
            }
        }
    };
    std::size_t workers = std::min(config.threads, data.queries.size());
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    // Deterministic reduction: report rows ordered by query id.
    std::vector<const PerQueryOutcome*> evaluated;
    for (const auto& o : outcomes) {
        if (o.skipped_no_positives) {
            ++result.report.skipped_queries;
            continue;
        }
        evaluated.push_back(&o);
        if (o.degraded_rerank) ++result.manifest.degraded_rerank_only;
        if (o.refinement_skipped) ++result.manifest.refinement_skipped;
    }
    std::sort(evaluated.begin(), evaluated.end(),
              [](const PerQueryOutcome* a, const PerQueryOutcome* b) {
                  return a->result.query_id < b->result.query_id;
              });
    result.manifest.skipped_queries = result.report.skipped_queries;
    if (evaluated.empty())
        fail(Errc::EmptyInput, "no query had positive judgments; nothing to evaluate");

    for (const PerQueryOutcome* o : evaluated) {
        result.report.per_query.push_back(o->result);
        result.manifest.per_query_latency.push_back(o->latency);
    }

    // MAP and Recall@K per setting.
    std::set<std::size_t> recall_ks(config.recall_ks.begin(), config.recall_ks.end());
    for (const auto& setting : config.settings) {
        double ap_sum = 0.0;
        std::map<std::size_t, double> recall_sum;
        for (const PerQueryOutcome* o : evaluated) {
            ap_sum += o->result.ap_by_setting.at(setting);
            const Ranking& ranking = o->result.ranking_by_setting.at(setting);
            const auto* positives = data.qrels.positives_for(o->result.query_id);
            for (std::size_t k : recall_ks)
                recall_sum[k] += recall_at_k(ranking, *positives, k);
        }
        double n = double(evaluated.size());
        result.report.map_by_setting[setting] = ap_sum / n;
        for (auto& [k, sum] : recall_sum)
            result.report.recall_at_k_by_setting[setting][k] = sum / n;
    }

    // Pairwise one-sided significance with BH correction across the pairs.
    if (evaluated.size() >= 2) {
        std::vector<SignificanceEntry> entries;
        std::vector<double> raw;
        for (const auto& [baseline, improved] : kCanonicalPairs) {
            if (!config.wants(baseline) || !config.wants(improved)) continue;
            std::vector<double> a, b;
            for (const PerQueryOutcome* o : evaluated) {
                a.push_back(o->result.ap_by_setting.at(baseline));
                b.push_back(o->result.ap_by_setting.at(improved));
            }
            PairedTTest test = paired_t_test_one_sided(a, b);
            SignificanceEntry entry;
            entry.baseline = baseline;
            entry.improved = improved;
            entry.t_stat = test.t_stat;
            entry.p_raw = test.p_value;
            entry.n = test.n;
            entries.push_back(std::move(entry));
            raw.push_back(test.p_value);
        }
        if (!entries.empty()) {
            BhCorrection bh = bh_correct(raw, config.significance_alpha);
            for (std::size_t i = 0; i < entries.size(); ++i) {
                entries[i].p_adjusted = bh.adjusted[i];
                entries[i].reject = bh.reject[i];
            }
            result.report.significance = std::move(entries);
        }
    }

    // Correlation between teacher feedback quality and ranking improvement.
    FeedbackQuality& fq = result.report.feedback_quality;
    if (config.wants("original") && config.wants("optimized")) {
        std::vector<double> aucs, gains;
        for (const PerQueryOutcome* o : evaluated) {
            if (!o->has_feedback_auc) continue;
            double ap_orig = o->result.ap_by_setting.at("original");
            if (ap_orig <= 0) continue;  // percentage gain undefined
            double gain_pct =
                (o->result.ap_by_setting.at("optimized") - ap_orig) / ap_orig * 100.0;
            fq.per_query.push_back({o->result.query_id, o->feedback_auc, gain_pct});
            aucs.push_back(o->feedback_auc);
            gains.push_back(gain_pct);
        }
        if (aucs.size() >= 3) {
            try {
                FeedbackQualityResult corr = feedback_quality_table(aucs, gains);
                fq.pearson_r = corr.pearson_r;
                fq.p_value = corr.p_value;
                fq.computed = true;
            } catch (const Error& e) {
                fq.note = e.what();
            }
        } else {
            fq.note = "needs at least 3 queries with a defined AUC and nonzero baseline AP";
        }
    } else {
        fq.note = "requires both the original and optimized settings";
    }

    result.manifest.teacher = teacher.stats();
    result.manifest.finished_at = iso8601_utc_now();
    return result;
}

PipelineResult run_pipeline(const RunConfig& config) {
    config.validate();
    LoadedData data = load_inputs(config);

    std::unique_ptr<Teacher> teacher;
    if (config.teacher_is_oracle) {
        teacher = std::make_unique<OracleTeacher>(data.qrels, config.oracle.flip_probability,
                                                  config.oracle.noise_sigma, config.seed);
    } else {
        std::shared_ptr<ResponseCache> cache;
        if (!config.llm.cache_dir.empty())
            cache = std::make_shared<ResponseCache>(config.llm.cache_dir);
        teacher = std::make_unique<LlmTeacher>(config.llm,
                                               make_http_transport(config.llm.timeout_seconds),
                                               config.token_sets, std::move(cache));
    }
    EmbeddingProvider provider(config.provider);

    PipelineResult result = run_pipeline(config, data, *teacher, provider);

    if (!config.output_dir.empty()) {
        std::filesystem::create_directories(config.output_dir);
        write_report_json(config.output_dir / "report.json", result.report);
        write_per_query_csv(config.output_dir / "per_query.csv", result.report);
        write_text_file(config.output_dir / "manifest.json", manifest_to_json(result.manifest));
        write_text_file(config.output_dir / "config.json",
                        config.raw_json.empty() ? config_to_canonical_json(config)
                                                : config.raw_json);
    }
    return result;
}

}  // namespace refrank
