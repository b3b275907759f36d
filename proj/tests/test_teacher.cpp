#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "refrank/error.hpp"
#include "refrank/teacher.hpp"
#include "support/mock_transport.hpp"
#include "support/tmpdir.hpp"

using namespace refrank;
using testsupport::MockTransport;
using testsupport::RecordedRequest;

namespace {

Errc code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return Errc::Internal;
}

TeacherClientConfig test_config() {
    TeacherClientConfig config;
    config.endpoint = "http://fake.test/v1/chat/completions";
    config.model = "teacher-1";
    config.api_key_env = "";
    config.max_retries = 2;
    config.backoff_base_seconds = 0.0;
    config.max_concurrency = 1;
    return config;
}

ScorePairsRequest request_for(const std::vector<Document>& docs) {
    ScorePairsRequest req;
    req.query_id = "q1";
    req.query_text = "the query";
    req.task_instruction = "judge relevance";
    req.docs = docs;
    return req;
}

}  // namespace

TEST_CASE("feedback prompt renders byte-exactly") {
    std::string prompt = render_feedback_prompt("what is X", "X is a thing", "retrieve passages");
    CHECK(prompt ==
          "Here is a user query and a document. Is this document relevant for this query? Judge "
          "the relevance according to the following task: retrieve passages. Answer with only "
          "yes/no, without any preceding tokens. Query: what is X\n\nDocument: X is a "
          "thing\n\nRelevant? (Yes/No):");
    // Substitution slots are verbatim; braces and empty strings pass through.
    CHECK(render_feedback_prompt("{q}", "{d}", "") ==
          "Here is a user query and a document. Is this document relevant for this query? Judge "
          "the relevance according to the following task: . Answer with only yes/no, without any "
          "preceding tokens. Query: {q}\n\nDocument: {d}\n\nRelevant? (Yes/No):");
}

TEST_CASE("default yes/no token sets cover case and punctuation variants") {
    auto sets = YesNoTokenSets::defaults();
    sets.validate();
    for (const char* v : {"yes", "Yes", "YES", " yes", " Yes", "yes.", "Yes,", " Yes."})
        CHECK(sets.yes_variants.count(v) == 1);
    for (const char* v : {"no", "No", "NO", " no", " No", "no.", "No,", " No."})
        CHECK(sets.no_variants.count(v) == 1);
    for (const auto& v : sets.yes_variants) CHECK(sets.no_variants.count(v) == 0);
}

TEST_CASE("token set validation rejects empty and overlapping sets") {
    YesNoTokenSets empty;
    empty.yes_variants = {"yes"};
    CHECK(code_of([&] { empty.validate(); }) == Errc::BadConfig);

    YesNoTokenSets overlap;
    overlap.yes_variants = {"yes", "y"};
    overlap.no_variants = {"no", "y"};
    CHECK(code_of([&] { overlap.validate(); }) == Errc::BadConfig);
}

TEST_CASE("logprob scoring is p_yes over p_yes plus p_no") {
    auto sets = YesNoTokenSets::defaults();
    std::map<std::string, double> lp{{"yes", std::log(0.6)}, {"no", std::log(0.2)}};
    auto score = feedback_score_from_logprobs(lp, sets);
    REQUIRE(score.has_value());
    CHECK(*score == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("logprob scoring sums probability mass across token variants") {
    auto sets = YesNoTokenSets::defaults();
    std::map<std::string, double> lp{{"Yes", std::log(0.3)},
                                     {" yes", std::log(0.2)},
                                     {"yes.", std::log(0.1)},
                                     {"no", std::log(0.15)},
                                     {"No,", std::log(0.05)},
                                     {"the", std::log(0.2)}};
    auto score = feedback_score_from_logprobs(lp, sets);
    REQUIRE(score.has_value());
    CHECK(*score == doctest::Approx(0.6 / 0.8).epsilon(1e-12));
}

TEST_CASE("logprob scoring is indeterminate when neither set appears") {
    auto sets = YesNoTokenSets::defaults();
    CHECK_FALSE(feedback_score_from_logprobs({{"maybe", -0.1}}, sets).has_value());
    CHECK_FALSE(feedback_score_from_logprobs({}, sets).has_value());
}

TEST_CASE("text fallback maps yes to 1, no to 0, anything else to indeterminate") {
    auto sets = YesNoTokenSets::defaults();
    CHECK(feedback_score_from_text("Yes", sets) == 1.0);
    CHECK(feedback_score_from_text("YES.", sets) == 1.0);
    CHECK(feedback_score_from_text("  yes  ", sets) == 1.0);
    CHECK(feedback_score_from_text("no", sets) == 0.0);
    CHECK(feedback_score_from_text(" No,", sets) == 0.0);
    CHECK_FALSE(feedback_score_from_text("Sure", sets).has_value());
    CHECK_FALSE(feedback_score_from_text("yes and no", sets).has_value());
    CHECK_FALSE(feedback_score_from_text("", sets).has_value());
}

TEST_CASE("response cache round-trips and keys on model plus prompt") {
    testsupport::TempDir dir;
    ResponseCache cache(dir.path());
    CHECK_FALSE(cache.get("m", "p").has_value());
    cache.put("m", "p", "body-1");
    CHECK(cache.get("m", "p") == std::string("body-1"));
    CHECK(cache.count() == 1);

    cache.put("m", "other prompt", "body-2");
    cache.put("other model", "p", "body-3");
    CHECK(cache.count() == 3);
    CHECK(cache.get("m", "p") == std::string("body-1"));
    CHECK(cache.entry_path("m", "p") != cache.entry_path("other model", "p"));

    cache.put("m", "p", "body-1b");  // overwrite in place
    CHECK(cache.get("m", "p") == std::string("body-1b"));
    CHECK(cache.count() == 3);

    CHECK(cache.clear() == 3);
    CHECK(cache.count() == 0);
    CHECK_FALSE(cache.get("m", "p").has_value());
}

TEST_CASE("score_pairs preserves document order and parses logprob scores") {
    MockTransport transport([](const RecordedRequest& request, std::size_t) {
        auto body = nlohmann::json::parse(request.body);
        std::string prompt = body["messages"][0]["content"].get<std::string>();
        // Vary the score with the document so order is observable.
        double p_yes = prompt.find("alpha") != std::string::npos ? 0.8 : 0.4;
        return testsupport::response_200(testsupport::chat_response(
            "Yes", {{"Yes", std::log(p_yes)}, {"No", std::log(1.0 - p_yes)}}));
    });
    TeacherCallStats stats;
    auto result = score_pairs(request_for({{"d1", "alpha doc"}, {"d2", "beta doc"}}),
                              test_config(), transport, YesNoTokenSets::defaults(), nullptr,
                              &stats);
    REQUIRE(result.entries.size() == 2);
    CHECK(result.entries[0].doc_id == "d1");
    CHECK(result.entries[0].score == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(result.entries[0].source == ScoreSource::Llm);
    CHECK_FALSE(result.entries[0].used_text_fallback);
    CHECK(result.entries[1].doc_id == "d2");
    CHECK(result.entries[1].score == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(result.failed.empty());
    CHECK(stats.requests == 2);
    CHECK(stats.retries == 0);
    CHECK(stats.failed_pairs == 0);
}

TEST_CASE("score_pairs request bodies ask for one deterministic judged token") {
    MockTransport transport([](const RecordedRequest&, std::size_t) {
        return testsupport::response_200(
            testsupport::chat_response("Yes", {{"Yes", -0.1}, {"No", -3.0}}));
    });
    auto config = test_config();
    config.top_logprobs = 7;
    score_pairs(request_for({{"d1", "doc"}}), config, transport, YesNoTokenSets::defaults());
    auto body = nlohmann::json::parse(transport.requests()[0].body);
    CHECK(body["model"] == "teacher-1");
    CHECK(body["max_tokens"] == 1);
    CHECK(body["temperature"] == 0);
    CHECK(body["logprobs"] == true);
    CHECK(body["top_logprobs"] == 7);
    CHECK(body["messages"][0]["content"] ==
          render_feedback_prompt("the query", "doc", "judge relevance"));
}

TEST_CASE("score_pairs retries malformed and failed responses") {
    MockTransport transport([](const RecordedRequest&, std::size_t index) {
        if (index == 0) return testsupport::response_error(500);
        if (index == 1) return testsupport::response_200("not json at all");
        return testsupport::response_200(
            testsupport::chat_response("Yes", {{"Yes", std::log(0.9)}, {"No", std::log(0.1)}}));
    });
    TeacherCallStats stats;
    auto result = score_pairs(request_for({{"d1", "doc"}}), test_config(), transport,
                              YesNoTokenSets::defaults(), nullptr, &stats);
    CHECK(result.entries.size() == 1);
    CHECK(result.entries[0].retries == 2);
    CHECK(stats.requests == 3);
    CHECK(stats.retries == 2);
}

TEST_CASE("score_pairs records failed pairs and keeps the rest") {
    MockTransport transport([](const RecordedRequest& request, std::size_t) {
        if (request.body.find("poison") != std::string::npos)
            return testsupport::response_error(500);
        return testsupport::response_200(
            testsupport::chat_response("Yes", {{"Yes", std::log(0.7)}, {"No", std::log(0.3)}}));
    });
    TeacherCallStats stats;
    auto result = score_pairs(request_for({{"d1", "fine"}, {"d2", "poison"}, {"d3", "fine too"}}),
                              test_config(), transport, YesNoTokenSets::defaults(), nullptr,
                              &stats);
    REQUIRE(result.entries.size() == 2);
    CHECK(result.entries[0].doc_id == "d1");
    CHECK(result.entries[1].doc_id == "d3");
    REQUIRE(result.failed.size() == 1);
    CHECK(result.failed[0] == "d2");
    CHECK(stats.failed_pairs == 1);
}

TEST_CASE("score_pairs throws when every pair fails") {
    MockTransport transport(
        [](const RecordedRequest&, std::size_t) { return testsupport::response_error(0); });
    MockTransport& t = transport;
    CHECK(code_of([&] {
              score_pairs(request_for({{"d1", "a"}, {"d2", "b"}}), test_config(), t,
                          YesNoTokenSets::defaults());
          }) == Errc::AllPairsFailed);
    // max_retries=2 means three attempts per pair.
    CHECK(transport.call_count() == 6);
}

TEST_CASE("score_pairs rejects empty doc lists") {
    MockTransport transport(
        [](const RecordedRequest&, std::size_t) { return testsupport::response_error(0); });
    MockTransport& t = transport;
    CHECK(code_of([&] {
              score_pairs(request_for({}), test_config(), t, YesNoTokenSets::defaults());
          }) == Errc::EmptyInput);
}

TEST_CASE("score_pairs falls back to text then to the default score") {
    // No logprobs block at all: text fallback decides.
    MockTransport yes_text([](const RecordedRequest&, std::size_t) {
        nlohmann::json j = {{"choices", {{{"message", {{"content", "Yes"}}}}}}};
        return testsupport::response_200(j.dump());
    });
    TeacherCallStats stats;
    auto result = score_pairs(request_for({{"d1", "doc"}}), test_config(), yes_text,
                              YesNoTokenSets::defaults(), nullptr, &stats);
    CHECK(result.entries[0].score == 1.0);
    CHECK(result.entries[0].used_text_fallback);
    CHECK_FALSE(result.entries[0].used_default_score);
    CHECK(stats.text_fallbacks == 1);

    // Logprobs present but off-vocabulary, text unusable: indeterminate -> 0.5.
    MockTransport hedge([](const RecordedRequest&, std::size_t) {
        return testsupport::response_200(
            testsupport::chat_response("Maybe", {{"Maybe", -0.2}, {"Possibly", -2.0}}));
    });
    TeacherCallStats stats2;
    auto result2 = score_pairs(request_for({{"d1", "doc"}}), test_config(), hedge,
                               YesNoTokenSets::defaults(), nullptr, &stats2);
    CHECK(result2.entries[0].score == 0.5);
    CHECK(result2.entries[0].used_default_score);
    CHECK(stats2.default_scores == 1);
}

TEST_CASE("score_pairs serves from the cache and repairs corrupt entries") {
    testsupport::TempDir dir;
    ResponseCache cache(dir.path());
    auto config = test_config();
    std::string prompt = render_feedback_prompt("the query", "doc", "judge relevance");
    cache.put(config.model, prompt,
              testsupport::chat_response("Yes", {{"Yes", std::log(0.9)}, {"No", std::log(0.1)}}));

    MockTransport transport([](const RecordedRequest&, std::size_t) {
        return testsupport::response_200(
            testsupport::chat_response("No", {{"Yes", std::log(0.1)}, {"No", std::log(0.9)}}));
    });
    TeacherCallStats stats;
    auto result = score_pairs(request_for({{"d1", "doc"}}), config, transport,
                              YesNoTokenSets::defaults(), &cache, &stats);
    CHECK(result.entries[0].score == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(transport.call_count() == 0);
    CHECK(stats.cache_hits == 1);
    CHECK(stats.requests == 0);

    // A corrupt cached body triggers a fresh request whose reply re-fills the cache.
    cache.put(config.model, prompt, "corrupt {{{");
    TeacherCallStats stats2;
    auto result2 = score_pairs(request_for({{"d1", "doc"}}), config, transport,
                               YesNoTokenSets::defaults(), &cache, &stats2);
    CHECK(result2.entries[0].score == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(transport.call_count() == 1);
    CHECK(stats2.cache_hits == 0);
    CHECK(stats2.requests == 1);
    auto repaired = cache.get(config.model, prompt);
    REQUIRE(repaired.has_value());
    CHECK(repaired->find("corrupt") == std::string::npos);
}

TEST_CASE("score_pairs caps in-flight requests at max_concurrency") {
    MockTransport transport([](const RecordedRequest&, std::size_t) {
        std::this_thread::sleep_for(std::chrono::milliseconds(15));
        return testsupport::response_200(
            testsupport::chat_response("Yes", {{"Yes", -0.1}, {"No", -3.0}}));
    });
    auto config = test_config();
    config.max_concurrency = 3;
    std::vector<Document> docs;
    for (int i = 0; i < 9; ++i) docs.push_back({"d" + std::to_string(i), "text"});
    auto result = score_pairs(request_for(docs), config, transport, YesNoTokenSets::defaults());
    CHECK(result.entries.size() == 9);
    for (int i = 0; i < 9; ++i) CHECK(result.entries[i].doc_id == "d" + std::to_string(i));
    CHECK(transport.max_in_flight() <= 3);
    CHECK(transport.max_in_flight() >= 2);
}

TEST_CASE("teacher client config validation") {
    auto config = test_config();
    config.validate();
    auto bad = config;
    bad.endpoint = "";
    CHECK(code_of([&] { bad.validate(); }) == Errc::BadConfig);
    bad = config;
    bad.model = "";
    CHECK(code_of([&] { bad.validate(); }) == Errc::BadConfig);
    bad = config;
    bad.max_concurrency = 0;
    CHECK(code_of([&] { bad.validate(); }) == Errc::BadConfig);
    bad = config;
    bad.top_logprobs = 0;
    CHECK(code_of([&] { bad.validate(); }) == Errc::BadConfig);
}

namespace {

Qrels two_query_qrels() {
    Qrels qrels;
    qrels.positives["q1"] = {"d1", "d3"};
    qrels.negatives["q1"] = {"d2"};
    qrels.positives["q2"] = {"d2"};
    return qrels;
}

std::vector<Document> three_docs() {
    return {{"d1", "a"}, {"d2", "b"}, {"d3", "c"}};
}

}  // namespace

TEST_CASE("oracle teacher reproduces binary labels when noiseless") {
    auto fb = oracle_teacher("q1", three_docs(), two_query_qrels(), 0.0, 0.0, 7);
    REQUIRE(fb.entries.size() == 3);
    CHECK(fb.entries[0].score == 1.0);
    CHECK(fb.entries[1].score == 0.0);
    CHECK(fb.entries[2].score == 1.0);
    CHECK(fb.entries[0].source == ScoreSource::Oracle);
    CHECK(fb.failed.empty());
}

TEST_CASE("oracle teacher flips every label at flip probability one") {
    auto fb = oracle_teacher("q1", three_docs(), two_query_qrels(), 1.0, 0.0, 7);
    CHECK(fb.entries[0].score == 0.0);
    CHECK(fb.entries[1].score == 1.0);
    CHECK(fb.entries[2].score == 0.0);
}

TEST_CASE("oracle teacher is deterministic in the seed and clamps noise") {
    auto a = oracle_teacher("q1", three_docs(), two_query_qrels(), 0.3, 0.5, 11);
    auto b = oracle_teacher("q1", three_docs(), two_query_qrels(), 0.3, 0.5, 11);
    auto c = oracle_teacher("q1", three_docs(), two_query_qrels(), 0.3, 0.5, 12);
    REQUIRE(a.entries.size() == b.entries.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(a.entries[i].score == b.entries[i].score);
        CHECK(a.entries[i].score >= 0.0);
        CHECK(a.entries[i].score <= 1.0);
        if (a.entries[i].score != c.entries[i].score) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("oracle teacher rejects unknown queries and bad parameters") {
    auto qrels = two_query_qrels();
    auto docs = three_docs();
    CHECK(code_of([&] { oracle_teacher("missing", docs, qrels, 0.0, 0.0, 0); }) ==
          Errc::UnknownQuery);
    CHECK(code_of([&] { oracle_teacher("q1", docs, qrels, -0.1, 0.0, 0); }) == Errc::BadConfig);
    CHECK(code_of([&] { oracle_teacher("q1", docs, qrels, 1.5, 0.0, 0); }) == Errc::BadConfig);
    CHECK(code_of([&] { oracle_teacher("q1", docs, qrels, 0.0, -1.0, 0); }) == Errc::BadConfig);
}

TEST_CASE("hyde generation returns the model text and retries failures") {
    MockTransport transport([](const RecordedRequest& request, std::size_t index) {
        if (index == 0) return testsupport::response_error(502);
        auto body = nlohmann::json::parse(request.body);
        CHECK(body["max_tokens"] == 512);
        std::string prompt = body["messages"][0]["content"].get<std::string>();
        CHECK(prompt ==
              "Write a short document that would be relevant to the following query.\n\nQuery: "
              "what is HyDE\n\nDocument:");
        nlohmann::json j = {{"choices", {{{"message", {{"content", "A hypothetical passage."}}}}}}};
        return testsupport::response_200(j.dump());
    });
    TeacherCallStats stats;
    std::string text = hyde_generate("what is HyDE", test_config(), transport, &stats);
    CHECK(text == "A hypothetical passage.");
    CHECK(stats.generations == 2);
    CHECK(stats.retries == 1);
}

TEST_CASE("hyde generation fails on exhaustion and on empty documents") {
    MockTransport always_down(
        [](const RecordedRequest&, std::size_t) { return testsupport::response_error(0); });
    MockTransport& down = always_down;
    CHECK(code_of([&] { hyde_generate("q", test_config(), down); }) == Errc::GenerationFailed);
    CHECK(always_down.call_count() == 3);

    MockTransport blank([](const RecordedRequest&, std::size_t) {
        nlohmann::json j = {{"choices", {{{"message", {{"content", "   "}}}}}}};
        return testsupport::response_200(j.dump());
    });
    MockTransport& b = blank;
    CHECK(code_of([&] { hyde_generate("q", test_config(), b); }) == Errc::GenerationFailed);
}

TEST_CASE("llm teacher accumulates stats across calls") {
    auto transport = std::make_shared<MockTransport>(
        [](const RecordedRequest& request, std::size_t) {
            auto body = nlohmann::json::parse(request.body);
            if (body["max_tokens"] == 512) {  // generation request, not a judgment
                nlohmann::json j = {{"choices", {{{"message", {{"content", "generated doc"}}}}}}};
                return testsupport::response_200(j.dump());
            }
            return testsupport::response_200(
                testsupport::chat_response("Yes", {{"Yes", std::log(0.8)}, {"No", std::log(0.2)}}));
        });
    LlmTeacher teacher(test_config(), transport, YesNoTokenSets::defaults(), nullptr);
    auto fb = teacher.score("q1", "query text", "instr", {{"d1", "a"}, {"d2", "b"}});
    CHECK(fb.entries.size() == 2);
    CHECK(teacher.generate_hyde("query text") == "generated doc");
    auto stats = teacher.stats();
    CHECK(stats.requests == 2);
    CHECK(stats.generations == 1);
}

TEST_CASE("llm teacher construction validates config and transport") {
    auto transport = std::make_shared<MockTransport>(
        [](const RecordedRequest&, std::size_t) { return testsupport::response_error(0); });
    auto bad_config = test_config();
    bad_config.endpoint = "";
    CHECK(code_of([&] {
              LlmTeacher t(bad_config, transport, YesNoTokenSets::defaults(), nullptr);
          }) == Errc::BadConfig);
    CHECK(code_of([&] {
              LlmTeacher t(test_config(), nullptr, YesNoTokenSets::defaults(), nullptr);
          }) == Errc::BadConfig);
}

TEST_CASE("teachers without generation support say so") {
    Qrels qrels = two_query_qrels();
    OracleTeacher teacher(qrels, 0.0, 0.0, 0);
    CHECK(code_of([&] { teacher.generate_hyde("q"); }) == Errc::GenerationFailed);
}
