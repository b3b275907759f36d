#include "refrank/embedder.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <thread>

#include <json.hpp>

#include "refrank/error.hpp"
#include "refrank/util.hpp"

namespace refrank {

namespace {

using nlohmann::json;

std::map<std::string, std::string> auth_headers(const EmbeddingProviderConfig& config) {
    std::map<std::string, std::string> headers;
    if (!config.api_key_env.empty()) {
        if (const char* key = std::getenv(config.api_key_env.c_str()); key && *key)
            headers["Authorization"] = std::string("Bearer ") + key;
    }
    return headers;
}

}  // namespace

QueryTemplateVariant parse_query_template_variant(const std::string& name) {
    if (name == "default") return QueryTemplateVariant::Default;
    if (name == "no_instruction") return QueryTemplateVariant::NoInstruction;
    if (name == "instruction_prefix") return QueryTemplateVariant::InstructionPrefix;
    if (name == "task") return QueryTemplateVariant::TaskTemplate;
    if (name == "retrieve") return QueryTemplateVariant::RetrieveTemplate;
    fail(Errc::BadConfig, "unknown query template '" + name +
                              "' (expected default, no_instruction, instruction_prefix, task, "
                              "or retrieve)");
}

std::string query_template_variant_name(QueryTemplateVariant variant) {
    switch (variant) {
        case QueryTemplateVariant::Default: return "default";
        case QueryTemplateVariant::NoInstruction: return "no_instruction";
        case QueryTemplateVariant::InstructionPrefix: return "instruction_prefix";
        case QueryTemplateVariant::TaskTemplate: return "task";
        case QueryTemplateVariant::RetrieveTemplate: return "retrieve";
    }
    fail(Errc::Internal, "unhandled query template variant");
}

std::string render_query_template(const std::string& instruction, const std::string& query,
                                  QueryTemplateVariant variant) {
    switch (variant) {
        case QueryTemplateVariant::Default:
            return "Instruct: " + instruction + "\nQuery: " + query;
        case QueryTemplateVariant::NoInstruction:
            return query;
        case QueryTemplateVariant::InstructionPrefix:
            return instruction + "\n" + query;
        case QueryTemplateVariant::TaskTemplate:
            return "Task: " + instruction + "\n\n" + query;
        case QueryTemplateVariant::RetrieveTemplate:
            return "Retrieve relevant documents. " + instruction + "\nQuery: " + query;
    }
    fail(Errc::Internal, "unhandled query template variant");
}

void EmbeddingProviderConfig::validate() const {
    switch (mode) {
        case EmbeddingProviderMode::Http:
            if (endpoint.empty()) fail(Errc::BadConfig, "embedding endpoint is empty");
            if (model.empty()) fail(Errc::BadConfig, "embedding model name is empty");
            if (timeout_seconds <= 0) fail(Errc::BadConfig, "embedding timeout must be > 0");
            if (max_retries < 0) fail(Errc::BadConfig, "embedding max_retries must be >= 0");
            if (batch_size < 1) fail(Errc::BadConfig, "embedding batch_size must be >= 1");
            break;
        case EmbeddingProviderMode::File:
            if (path.empty()) fail(Errc::BadConfig, "embedding file path is empty");
            break;
        case EmbeddingProviderMode::Synthetic:
            if (dim < 2) fail(Errc::BadDim, "synthetic embedding dim must be >= 2");
            break;
    }
}

std::vector<double> synthetic_embed(const std::string& text, std::size_t dim,
                                    std::uint64_t seed) {
    if (dim < 2) fail(Errc::BadDim, "synthetic embedding dim must be >= 2");
    GaussianStream stream(seed_from(seed, "embed", text));
    std::vector<double> v(dim);
    double norm2 = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        v[i] = stream.next();
        norm2 += v[i] * v[i];
    }
    double norm = std::sqrt(norm2);
    if (norm <= 1e-12) {  // astronomically unlikely; keep the contract total
        v.assign(dim, 0.0);
        v[0] = 1.0;
        return v;
    }
    for (double& x : v) x /= norm;
    return v;
}

EmbeddingProvider::EmbeddingProvider(EmbeddingProviderConfig config,
                                     std::shared_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)) {
    config_.validate();
    if (config_.mode == EmbeddingProviderMode::Http && !transport_)
        transport_ = make_http_transport(config_.timeout_seconds);
    if (config_.mode == EmbeddingProviderMode::File) load_file_table();
}

std::vector<std::vector<double>> EmbeddingProvider::embed(const std::vector<std::string>& texts) {
    if (texts.empty()) fail(Errc::EmptyInput, "no texts to embed");
    std::vector<std::vector<double>> out;
    switch (config_.mode) {
        case EmbeddingProviderMode::Http: out = embed_http(texts); break;
        case EmbeddingProviderMode::File: out = embed_file(texts); break;
        case EmbeddingProviderMode::Synthetic:
            out.reserve(texts.size());
            for (const auto& t : texts) out.push_back(synthetic_embed(t, config_.dim, config_.seed));
            break;
    }
    for (const auto& v : out)
        if (v.size() != out.front().size())
            fail(Errc::DimInconsistent, "provider returned vectors of differing dimension");
    return out;
}

std::vector<std::vector<double>> EmbeddingProvider::embed_http(
    const std::vector<std::string>& texts) {
    std::map<std::string, std::string> headers = auth_headers(config_);
    std::vector<std::vector<double>> out(texts.size());

    for (std::size_t start = 0; start < texts.size(); start += config_.batch_size) {
        std::size_t end = std::min(texts.size(), start + config_.batch_size);
        json body;
        body["model"] = config_.model;
        body["input"] = json::array();
        for (std::size_t i = start; i < end; ++i) body["input"].push_back(texts[i]);
        std::string request = body.dump();

        std::optional<json> parsed;
        std::string last_error;
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            if (attempt > 0) {
                double secs = config_.backoff_base_seconds * std::pow(2.0, double(attempt - 1));
                if (secs > 0)
                    std::this_thread::sleep_for(std::chrono::duration<double>(secs));
            }
            HttpResponse res = transport_->post_json(config_.endpoint, request, headers);
            if (!res.ok()) {
                last_error = res.status == 0 ? res.error
                                             : "HTTP status " + std::to_string(res.status);
                continue;
            }
            json j = json::parse(res.body, nullptr, /*allow_exceptions=*/false);
            if (j.is_discarded() || !j.is_object() || !j.contains("data") ||
                !j["data"].is_array()) {
                last_error = "malformed embeddings response";
                continue;
            }
            parsed = std::move(j);
            break;
        }
        if (!parsed)
            fail(Errc::ProviderUnreachable, "embedding request failed after " +
                                                std::to_string(config_.max_retries + 1) +
                                                " attempt(s): " + last_error);

        const json& data = (*parsed)["data"];
        if (data.size() != end - start)
            fail(Errc::DimInconsistent, "provider returned " + std::to_string(data.size()) +
                                            " vectors for a batch of " +
                                            std::to_string(end - start));
        for (const json& item : data) {
            if (!item.is_object() || !item.contains("index") || !item.contains("embedding") ||
                !item["embedding"].is_array())
                fail(Errc::ProviderUnreachable, "malformed embedding item in response");
            std::size_t idx = item["index"].get<std::size_t>();
            if (idx >= end - start)
                fail(Errc::ProviderUnreachable, "embedding index out of batch range");
            std::vector<double> v;
            v.reserve(item["embedding"].size());
            for (const json& x : item["embedding"]) {
                if (!x.is_number()) fail(Errc::ProviderUnreachable, "non-numeric embedding entry");
                v.push_back(x.get<double>());
            }
            out[start + idx] = std::move(v);
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i].empty())
            fail(Errc::ProviderUnreachable, "no embedding returned for input " + std::to_string(i));
    return out;
}

void EmbeddingProvider::load_file_table() {
    std::ifstream in(config_.path);
    if (!in) fail(Errc::ParseError, "cannot open embedding file " + config_.path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded() || !j.is_object())
            fail(Errc::ParseError,
                 config_.path + " line " + std::to_string(lineno) + ": malformed JSON");
        if (!j.contains("text_sha256") || !j["text_sha256"].is_string())
            fail(Errc::SchemaError,
                 config_.path + " line " + std::to_string(lineno) + ": missing text_sha256");
        if (!j.contains("vector") || !j["vector"].is_array())
            fail(Errc::SchemaError,
                 config_.path + " line " + std::to_string(lineno) + ": missing vector");
        std::vector<double> v;
        v.reserve(j["vector"].size());
        for (const json& x : j["vector"]) {
            if (!x.is_number())
                fail(Errc::SchemaError, config_.path + " line " + std::to_string(lineno) +
                                            ": non-numeric vector entry");
            v.push_back(x.get<double>());
        }
        file_table_[j["text_sha256"].get<std::string>()] = std::move(v);
    }
}

std::vector<std::vector<double>> EmbeddingProvider::embed_file(
    const std::vector<std::string>& texts) {
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& text : texts) {
        std::string hash = sha256_hex(text);
        auto it = file_table_.find(hash);
        if (it == file_table_.end())
            fail(Errc::LookupMiss, "no embedding for text hash " + hash);
        out.push_back(it->second);
    }
    return out;
}

std::vector<std::vector<double>> embed_texts(const std::vector<std::string>& texts,
                                             const EmbeddingProviderConfig& provider,
                                             std::shared_ptr<Transport> transport) {
    EmbeddingProvider p(provider, std::move(transport));
    return p.embed(texts);
}

}  // namespace refrank
