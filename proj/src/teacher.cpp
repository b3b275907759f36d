#include "refrank/teacher.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "refrank/error.hpp"
#include "refrank/util.hpp"

namespace refrank {

namespace {

using nlohmann::json;

std::string read_api_key(const std::string& env_var) {
    if (env_var.empty()) return {};
    const char* v = std::getenv(env_var.c_str());
    return v ? std::string(v) : std::string();
}

std::map<std::string, std::string> auth_headers(const TeacherClientConfig& config) {
    std::map<std::string, std::string> headers;
    std::string key = read_api_key(config.api_key_env);
    if (!key.empty()) headers["Authorization"] = "Bearer " + key;
    return headers;
}

void backoff_sleep(double base_seconds, int attempt) {
    double secs = base_seconds * std::pow(2.0, double(attempt));
    if (secs <= 0) return;
    std::this_thread::sleep_for(std::chrono::duration<double>(secs));
}

struct ParsedResponse {
    std::map<std::string, double> top_logprobs;
    bool has_logprobs = false;
    std::string content;
    bool has_content = false;
};

// Extracts the first generated token's top-logprob list and text from a
// chat-completions response body. Returns nullopt on malformed bodies.
std::optional<ParsedResponse> parse_chat_response(const std::string& body) {
    json j = json::parse(body, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
        return std::nullopt;
    const json& choice = j["choices"][0];
    ParsedResponse out;
    if (choice.contains("message") && choice["message"].is_object()) {
        const json& msg = choice["message"];
        if (msg.contains("content") && msg["content"].is_string()) {
            out.content = msg["content"].get<std::string>();
            out.has_content = true;
        }
    }
    if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
        const json& lp = choice["logprobs"];
        if (lp.contains("content") && lp["content"].is_array() && !lp["content"].empty()) {
            const json& first = lp["content"][0];
            if (first.contains("top_logprobs") && first["top_logprobs"].is_array()) {
                for (const json& item : first["top_logprobs"]) {
                    if (!item.is_object() || !item.contains("token") || !item.contains("logprob"))
                        continue;
                    if (!item["token"].is_string() || !item["logprob"].is_number()) continue;
                    out.top_logprobs[item["token"].get<std::string>()] =
                        item["logprob"].get<double>();
                }
                out.has_logprobs = true;
            }
        }
    }
    return out;
}

std::string feedback_request_body(const TeacherClientConfig& config, const std::string& prompt) {
    json body;
    body["model"] = config.model;
    body["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});
    body["max_tokens"] = 1;
    body["temperature"] = 0;
    body["logprobs"] = true;
    body["top_logprobs"] = config.top_logprobs;
    return body.dump();
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

void TeacherClientConfig::validate() const {
    if (endpoint.empty()) fail(Errc::BadConfig, "teacher endpoint is empty");
    if (model.empty()) fail(Errc::BadConfig, "teacher model name is empty");
    if (timeout_seconds <= 0) fail(Errc::BadConfig, "teacher timeout must be > 0");
    if (max_retries < 0) fail(Errc::BadConfig, "teacher max_retries must be >= 0");
    if (backoff_base_seconds < 0) fail(Errc::BadConfig, "teacher backoff must be >= 0");
    if (max_concurrency < 1) fail(Errc::BadConfig, "teacher max_concurrency must be >= 1");
    if (top_logprobs < 1) fail(Errc::BadConfig, "teacher top_logprobs must be >= 1");
}

YesNoTokenSets YesNoTokenSets::defaults() {
    YesNoTokenSets sets;
    auto expand = [](std::initializer_list<const char*> bases) {
        std::set<std::string> out;
        for (const char* b : bases) {
            std::string s(b);
            out.insert(s);
            out.insert(s + ".");
            out.insert(s + ",");
        }
        return out;
    };
    sets.yes_variants = expand({"yes", "Yes", "YES", " yes", " Yes"});
    sets.no_variants = expand({"no", "No", "NO", " no", " No"});
    return sets;
}

void YesNoTokenSets::validate() const {
    if (yes_variants.empty() || no_variants.empty())
        fail(Errc::BadConfig, "yes/no token sets must be non-empty");
    for (const auto& v : yes_variants)
        if (no_variants.count(v))
            fail(Errc::BadConfig, "token '" + v + "' appears in both yes and no sets");
}

std::string render_feedback_prompt(const std::string& query, const std::string& doc,
                                   const std::string& task_instruction) {
    std::string out = "Here is a user query and a document. Is this document relevant for this "
                      "query? Judge the relevance according to the following task: ";
    out += task_instruction;
    out += ". Answer with only yes/no, without any preceding tokens. Query: ";
    out += query;
    out += "\n\nDocument: ";
    out += doc;
    out += "\n\nRelevant? (Yes/No):";
    return out;
}

std::optional<double> feedback_score_from_logprobs(
    const std::map<std::string, double>& first_token_logprobs, const YesNoTokenSets& token_sets) {
    double p_yes = 0.0, p_no = 0.0;
    for (const auto& [token, lp] : first_token_logprobs) {
        if (token_sets.yes_variants.count(token)) p_yes += std::exp(lp);
        else if (token_sets.no_variants.count(token)) p_no += std::exp(lp);
    }
    if (p_yes + p_no <= 0.0) return std::nullopt;
    return p_yes / (p_yes + p_no);
}

std::optional<double> feedback_score_from_text(const std::string& text,
                                               const YesNoTokenSets& token_sets) {
    std::string lowered = to_lower(text);
    std::string trimmed = to_lower(trim(text));
    auto matches = [&](const std::set<std::string>& variants) {
        for (const auto& v : variants) {
            std::string lv = to_lower(v);
            if (lowered == lv || trimmed == to_lower(trim(v))) return true;
        }
        return false;
    };
    if (matches(token_sets.yes_variants)) return 1.0;
    if (matches(token_sets.no_variants)) return 0.0;
    return std::nullopt;
}

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (dir_.empty()) fail(Errc::BadConfig, "response cache directory is empty");
    std::filesystem::create_directories(dir_);
}

std::filesystem::path ResponseCache::entry_path(const std::string& model,
                                                const std::string& prompt) const {
    std::string key = model;
    key.push_back('\0');
    key += prompt;
    return dir_ / (sha256_hex(key) + ".json");
}

std::optional<std::string> ResponseCache::get(const std::string& model,
                                              const std::string& prompt) const {
    std::filesystem::path p = entry_path(model, prompt);
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return body;
}

void ResponseCache::put(const std::string& model, const std::string& prompt,
                        const std::string& body) const {
    std::filesystem::path p = entry_path(model, prompt);
    std::filesystem::path tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::ParseError, "cannot write cache entry " + tmp.string());
        out << body;
    }
    std::filesystem::rename(tmp, p);
}

std::size_t ResponseCache::count() const {
    std::size_t n = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir_))
        if (entry.is_regular_file() && entry.path().extension() == ".json") ++n;
    return n;
}

std::size_t ResponseCache::clear() const {
    std::size_t n = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") {
            std::filesystem::remove(entry.path());
            ++n;
        }
    }
    return n;
}

void TeacherCallStats::add(const TeacherCallStats& other) {
    requests += other.requests;
    cache_hits += other.cache_hits;
    retries += other.retries;
    text_fallbacks += other.text_fallbacks;
    default_scores += other.default_scores;
    failed_pairs += other.failed_pairs;
    generations += other.generations;
}

namespace {

struct PairOutcome {
    std::optional<FeedbackEntry> entry;  // nullopt means the pair failed
};

PairOutcome score_one_pair(const Document& doc, const std::string& prompt,
                           const TeacherClientConfig& config, Transport& transport,
                           const YesNoTokenSets& token_sets, const ResponseCache* cache,
                           const std::map<std::string, std::string>& headers,
                           TeacherCallStats& stats) {
    std::optional<ParsedResponse> parsed;
    int retries_used = 0;

    if (cache) {
        if (auto body = cache->get(config.model, prompt)) {
            parsed = parse_chat_response(*body);
            if (parsed) ++stats.cache_hits;
            // An unreadable cached body falls through to a fresh request.
        }
    }
    if (!parsed) {
        std::string request = feedback_request_body(config, prompt);
        for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
            if (attempt > 0) {
                ++stats.retries;
                ++retries_used;
                backoff_sleep(config.backoff_base_seconds, attempt - 1);
            }
            ++stats.requests;
            HttpResponse res = transport.post_json(config.endpoint, request, headers);
            if (!res.ok()) continue;
            parsed = parse_chat_response(res.body);
            if (parsed) {
                if (cache) cache->put(config.model, prompt, res.body);
                break;
            }
        }
    }
    if (!parsed) {
        ++stats.failed_pairs;
        return {};
    }

    FeedbackEntry entry;
    entry.doc_id = doc.id;
    entry.source = ScoreSource::Llm;
    entry.retries = retries_used;
    std::optional<double> score;
    if (parsed->has_logprobs)
        score = feedback_score_from_logprobs(parsed->top_logprobs, token_sets);
    if (!score && parsed->has_content) {
        score = feedback_score_from_text(parsed->content, token_sets);
        if (score) {
            entry.used_text_fallback = true;
            ++stats.text_fallbacks;
        }
    }
    if (!score) {
        score = 0.5;
        entry.used_default_score = true;
        ++stats.default_scores;
    }
    entry.score = clamp01(*score);
    return {entry};
}

}  // namespace

FeedbackSet score_pairs(const ScorePairsRequest& request, const TeacherClientConfig& config,
                        Transport& transport, const YesNoTokenSets& token_sets,
                        const ResponseCache* cache, TeacherCallStats* stats) {
    config.validate();
    token_sets.validate();
    if (request.docs.empty()) fail(Errc::EmptyInput, "no documents to score");

    std::vector<std::string> prompts;
    prompts.reserve(request.docs.size());
    for (const auto& doc : request.docs)
        prompts.push_back(
            render_feedback_prompt(request.query_text, doc.text, request.task_instruction));
    std::map<std::string, std::string> headers = auth_headers(config);

    std::vector<PairOutcome> outcomes(request.docs.size());
    std::atomic<std::size_t> next{0};
    std::mutex stats_mutex;
    TeacherCallStats totals;

    std::size_t workers =
        std::min<std::size_t>(std::size_t(config.max_concurrency), request.docs.size());
    auto work = [&]() {
        TeacherCallStats local;
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= request.docs.size()) break;
            outcomes[i] = score_one_pair(request.docs[i], prompts[i], config, transport,
                                         token_sets, cache, headers, local);
        }
        std::lock_guard<std::mutex> lock(stats_mutex);
        totals.add(local);
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    FeedbackSet result;
    result.query_id = request.query_id;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        if (outcomes[i].entry)
            result.entries.push_back(std::move(*outcomes[i].entry));
        else
            result.failed.push_back(request.docs[i].id);
    }
    if (stats) stats->add(totals);
    if (result.entries.empty())
        fail(Errc::AllPairsFailed, "all " + std::to_string(request.docs.size()) +
                                       " teacher requests failed for query '" + request.query_id +
                                       "'");
    return result;
}

FeedbackSet oracle_teacher(const std::string& query_id, const std::vector<Document>& docs,
                           const Qrels& qrels, double flip_probability, double noise_sigma,
                           std::uint64_t seed) {
    if (flip_probability < 0 || flip_probability > 1)
        fail(Errc::BadConfig, "flip_probability must be in [0, 1]");
    if (noise_sigma < 0) fail(Errc::BadConfig, "noise_sigma must be >= 0");
    if (!qrels.positives.count(query_id) && !qrels.negatives.count(query_id))
        fail(Errc::UnknownQuery, "query '" + query_id + "' has no relevance judgments");

    GaussianStream stream(seed_from(seed, "oracle", query_id));
    FeedbackSet result;
    result.query_id = query_id;
    result.entries.reserve(docs.size());
    for (const auto& doc : docs) {
        double u = stream.next_uniform();
        double base = qrels.is_positive(query_id, doc.id) ? 1.0 : 0.0;
        if (u < flip_probability) base = 1.0 - base;
        if (noise_sigma > 0) base += noise_sigma * stream.next();
        FeedbackEntry entry;
        entry.doc_id = doc.id;
        entry.score = clamp01(base);
        entry.source = ScoreSource::Oracle;
        result.entries.push_back(std::move(entry));
    }
    return result;
}

std::string hyde_generate(const std::string& query, const TeacherClientConfig& config,
                          Transport& transport, TeacherCallStats* stats) {
    config.validate();
    std::string prompt = "Write a short document that would be relevant to the following "
                         "query.\n\nQuery: " +
                         query + "\n\nDocument:";
    json body_json;
    body_json["model"] = config.model;
    body_json["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});
    body_json["max_tokens"] = 512;
    body_json["temperature"] = 0;
    std::string body = body_json.dump();
    std::map<std::string, std::string> headers = auth_headers(config);

    int attempts = 0;
    for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
        if (attempt > 0) {
            if (stats) ++stats->retries;
            backoff_sleep(config.backoff_base_seconds, attempt - 1);
        }
        ++attempts;
        if (stats) ++stats->generations;
        HttpResponse res = transport.post_json(config.endpoint, body, headers);
        if (!res.ok()) continue;
        auto parsed = parse_chat_response(res.body);
        if (!parsed || !parsed->has_content) continue;
        if (trim(parsed->content).empty())
            fail(Errc::GenerationFailed, "empty hypothetical document for query '" + query + "'");
        return parsed->content;
    }
    fail(Errc::GenerationFailed,
         "no usable generation after " + std::to_string(attempts) + " attempt(s)");
}

std::string Teacher::generate_hyde(const std::string&) {
    fail(Errc::GenerationFailed, "this teacher does not support hypothetical-document generation");
}

LlmTeacher::LlmTeacher(TeacherClientConfig config, std::shared_ptr<Transport> transport,
                       YesNoTokenSets token_sets, std::shared_ptr<ResponseCache> cache)
    : config_(std::move(config)),
      transport_(std::move(transport)),
      token_sets_(std::move(token_sets)),
      cache_(std::move(cache)) {
    config_.validate();
    token_sets_.validate();
    if (!transport_) fail(Errc::BadConfig, "teacher transport is null");
}

FeedbackSet LlmTeacher::score(const std::string& query_id, const std::string& query_text,
                              const std::string& instruction,
                              const std::vector<Document>& docs) {
    ScorePairsRequest req;
    req.query_id = query_id;
    req.query_text = query_text;
    req.task_instruction = instruction;
    req.docs = docs;
    TeacherCallStats local;
    FeedbackSet result = score_pairs(req, config_, *transport_, token_sets_, cache_.get(), &local);
    std::lock_guard<std::mutex> lock(stats_mutex_);
    stats_.add(local);
    return result;
}

std::string LlmTeacher::generate_hyde(const std::string& query_text) {
    TeacherCallStats local;
    std::string text = hyde_generate(query_text, config_, *transport_, &local);
    std::lock_guard<std::mutex> lock(stats_mutex_);
    stats_.add(local);
    return text;
}

TeacherCallStats LlmTeacher::stats() const {
    std::lock_guard<std::mutex> lock(stats_mutex_);
    return stats_;
}

}  // namespace refrank
