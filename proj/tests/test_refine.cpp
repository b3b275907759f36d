#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "refrank/corpus.hpp"
#include "refrank/error.hpp"
#include "refrank/refine.hpp"
#include "refrank/util.hpp"
#include "support/oracles.hpp"
#include "support/replica.hpp"
#include "support/tmpdir.hpp"

using namespace refrank;

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

std::vector<double> random_vector(GaussianStream& g, std::size_t d) {
    std::vector<double> v(d);
    for (double& x : v) x = g.next();
    return v;
}

std::vector<std::vector<double>> random_rows(GaussianStream& g, std::size_t n, std::size_t d) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < n; ++i) rows.push_back(random_vector(g, d));
    return rows;
}

Distribution random_distribution(GaussianStream& g, std::size_t n) {
    Distribution p(n);
    double sum = 0.0;
    for (double& x : p) {
        x = std::exp(g.next());
        sum += x;
    }
    for (double& x : p) x /= sum;
    return p;
}

double rel_l2_error(const std::vector<double>& got, const std::vector<double>& want) {
    return oracle::l2_distance(got, want) / oracle::l2_norm(want);
}

}  // namespace

TEST_CASE("softmax of equal scores is uniform") {
    Distribution p = softmax(std::vector<double>{2.5, 2.5, 2.5});
    for (double x : p) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax matches direct exponentiation") {
    Distribution p = softmax(std::vector<double>{std::log(2.0), 0.0});
    CHECK(p[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax survives huge score gaps without overflow") {
    Distribution p = softmax(std::vector<double>{1000.0, 0.0});
    CHECK(std::isfinite(p[0]));
    CHECK(p[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(p[1] >= 0.0);
    CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("softmax is shift invariant and normalized on random inputs") {
    GaussianStream g(1);
    for (int trial = 0; trial < 200; ++trial) {
        auto v = random_vector(g, 1 + std::size_t(std::fabs(g.next()) * 10));
        Distribution p = softmax(v);
        double sum = 0.0;
        for (double x : p) sum += x;
        CHECK(std::fabs(sum - 1.0) < 1e-12);

        auto shifted = v;
        for (double& x : shifted) x += 7.25;  // power of two: exact shift
        Distribution q = softmax(shifted);
        for (std::size_t i = 0; i < p.size(); ++i)
            CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-12));
    }
}

TEST_CASE("softmax rejects empty input") {
    CHECK(code_of([] { softmax(std::vector<double>{}); }) == Errc::EmptyInput);
}

TEST_CASE("teacher normalization: plain softmax mode") {
    Distribution p = normalize_teacher_scores(std::vector<double>{0.9, 0.1},
                                              TeacherNormalization::SoftmaxT1);
    double e8 = std::exp(0.8);
    CHECK(p[0] == doctest::Approx(e8 / (e8 + 1.0)).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(1.0 / (e8 + 1.0)).epsilon(1e-14));
}

TEST_CASE("teacher normalization: min-max then half-temperature softmax") {
    Distribution uniform = normalize_teacher_scores(std::vector<double>{0.5, 0.5, 0.5},
                                                    TeacherNormalization::MinMaxThenSoftmaxT2);
    for (double x : uniform) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Distribution p = normalize_teacher_scores(std::vector<double>{1.0, 0.0},
                                              TeacherNormalization::MinMaxThenSoftmaxT2);
    Distribution want = softmax(std::vector<double>{0.5, 0.0});
    CHECK(p[0] == doctest::Approx(want[0]).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(want[1]).epsilon(1e-15));
}

TEST_CASE("normalization names parse and round-trip") {
    CHECK(parse_teacher_normalization("softmax_t1") == TeacherNormalization::SoftmaxT1);
    CHECK(parse_teacher_normalization("minmax_softmax_t2") ==
          TeacherNormalization::MinMaxThenSoftmaxT2);
    CHECK(teacher_normalization_name(TeacherNormalization::SoftmaxT1) == "softmax_t1");
    CHECK(teacher_normalization_name(TeacherNormalization::MinMaxThenSoftmaxT2) ==
          "minmax_softmax_t2");
    CHECK(code_of([] { parse_teacher_normalization("softmax"); }) == Errc::BadConfig);
}

TEST_CASE("KL divergence: identity, hand value, infinities, length checks") {
    Distribution p{0.5, 0.5};
    CHECK(kl_divergence(p, p) == 0.0);

    double hand = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    CHECK(kl_divergence({0.5, 0.5}, {0.25, 0.75}) == doctest::Approx(hand).epsilon(1e-14));

    CHECK(kl_divergence({0.0, 1.0}, {0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(std::isinf(kl_divergence({0.5, 0.5}, {1.0, 0.0})));
    CHECK(code_of([] { kl_divergence({1.0}, {0.5, 0.5}); }) == Errc::LengthMismatch);
}

TEST_CASE("KL divergence is non-negative over random distribution pairs") {
    GaussianStream g(2);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t n = 2 + std::size_t(std::fabs(g.next()) * 8);
        Distribution p = random_distribution(g, n);
        Distribution q = random_distribution(g, n);
        CHECK(kl_divergence(p, q) >= -1e-15);
    }
}

TEST_CASE("analytic gradient matches central finite differences") {
    GaussianStream g(3);
    for (std::size_t d : {std::size_t(2), std::size_t(8), std::size_t(64)}) {
        for (int trial = 0; trial < 30; ++trial) {
            auto z = random_vector(g, d);
            auto rows = random_rows(g, 5, d);
            auto p = random_distribution(g, 5);
            auto analytic = refinement_gradient(z, rows, p);
            auto numeric = oracle::fd_gradient(z, rows, p);
            CHECK(rel_l2_error(analytic, numeric) < 1e-5);
        }
    }
}

TEST_CASE("gradient is exactly zero at the stationary point") {
    GaussianStream g(4);
    auto z = random_vector(g, 8);
    auto rows = random_rows(g, 4, 8);
    Distribution p_e = softmax(testsupport::replicated_feedback_cosines(z, rows));
    auto grad = refinement_gradient(z, rows, p_e);
    for (double x : grad) CHECK(x == 0.0);
}

TEST_CASE("gradient pulls the query toward the heavier teacher mass") {
    std::vector<double> z{1.0, 0.0};
    std::vector<std::vector<double>> rows{{1.0, 0.0}, {0.0, 1.0}};
    Distribution p{1e-6, 1.0 - 1e-6};
    auto grad = refinement_gradient(z, rows, p);
    // Descent direction is -grad; pulling z toward row 2 needs grad[1] < 0.
    CHECK(grad[1] < 0.0);
    auto numeric = oracle::fd_gradient(z, rows, p);
    CHECK(rel_l2_error(grad, numeric) < 1e-5);
}

TEST_CASE("gradient rejects zero-norm queries and mismatched dims") {
    std::vector<std::vector<double>> rows{{1.0, 0.0}, {0.0, 1.0}};
    CHECK(code_of([&] { refinement_gradient(std::vector<double>{0.0, 0.0}, rows, {0.5, 0.5}); }) ==
          Errc::ZeroNorm);
    CHECK(code_of([&] { refinement_gradient(std::vector<double>{1.0, 0.0, 0.0}, rows,
                                            {0.5, 0.5}); }) == Errc::DimMismatch);
    CHECK(code_of([&] { refinement_gradient(std::vector<double>{1.0, 0.0}, rows, {1.0}); }) ==
          Errc::LengthMismatch);
}

TEST_CASE("adam: zero gradient leaves z unchanged") {
    auto state = RefinementState::init(std::vector<double>{1.0, -2.0});
    RefinementConfig config;
    adam_step(state, std::vector<double>{0.0, 0.0}, config);
    CHECK(state.z[0] == 1.0);
    CHECK(state.z[1] == -2.0);
    CHECK(state.step == 1);
}

TEST_CASE("adam: first step moves by about the learning rate") {
    auto state = RefinementState::init(std::vector<double>{1.0});
    RefinementConfig config;
    adam_step(state, std::vector<double>{2.0}, config);
    // Bias corrections make m_hat/sqrt(v_hat) equal to sign(g) on step one.
    CHECK(std::fabs((1.0 - state.z[0]) - config.learning_rate) < 1e-11);
}

TEST_CASE("adam: two steps with constant gradient match a scalar replay") {
    RefinementConfig config;
    auto state = RefinementState::init(std::vector<double>{0.5});
    adam_step(state, std::vector<double>{-1.25}, config);
    adam_step(state, std::vector<double>{-1.25}, config);

    double z = 0.5, m = 0.0, v = 0.0, g = -1.25;
    for (int t = 1; t <= 2; ++t) {
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        double m_hat = m / (1.0 - std::pow(0.9, t));
        double v_hat = v / (1.0 - std::pow(0.999, t));
        z -= 1e-4 * m_hat / (std::sqrt(v_hat) + 1e-8);
    }
    CHECK(std::fabs(state.z[0] - z) < 1e-12);
    CHECK(state.step == 2);
}

TEST_CASE("adam rejects non-finite gradients") {
    auto state = RefinementState::init(std::vector<double>{1.0});
    RefinementConfig config;
    double inf = std::numeric_limits<double>::infinity();
    CHECK(code_of([&] { adam_step(state, std::vector<double>{inf}, config); }) ==
          Errc::NonFiniteGradient);
}

TEST_CASE("refinement config validation") {
    RefinementConfig config;
    config.validate();
    RefinementConfig bad = config;
    bad.k = 0;
    CHECK(code_of([&] { bad.validate(); }) == Errc::BadConfig);
    bad = config;
    bad.learning_rate = 0.0;
    CHECK(code_of([&] { bad.validate(); }) == Errc::BadConfig);
    bad = config;
    bad.adam_beta1 = 1.0;
    CHECK(code_of([&] { bad.validate(); }) == Errc::BadConfig);
    bad = config;
    bad.adam_eps = 0.0;
    CHECK(code_of([&] { bad.validate(); }) == Errc::BadConfig);
}

TEST_CASE("refinement with zero steps is a no-op with a one-entry trace") {
    GaussianStream g(5);
    auto z0 = random_vector(g, 6);
    auto rows = random_rows(g, 3, 6);
    auto p = random_distribution(g, 3);
    RefinementConfig config;
    config.steps = 0;
    auto result = refine_against_distribution(z0, rows, p, config);
    CHECK(result.z == z0);
    CHECK(result.trace.loss_per_step.size() == 1);
    CHECK(result.trace.z_norm_per_step.size() == 1);
    CHECK(result.trace.loss_per_step[0] ==
          doctest::Approx(oracle::refinement_loss(z0, rows, p)).epsilon(1e-12));
}

TEST_CASE("refinement records steps+1 losses and optional snapshots") {
    GaussianStream g(6);
    auto z0 = random_vector(g, 5);
    auto rows = random_rows(g, 4, 5);
    auto p = random_distribution(g, 4);
    RefinementConfig config;
    config.steps = 7;
    auto result = refine_against_distribution(z0, rows, p, config, true);
    CHECK(result.trace.loss_per_step.size() == 8);
    CHECK(result.trace.z_norm_per_step.size() == 8);
    REQUIRE(result.trace.z_snapshots.size() == 8);
    CHECK(result.trace.z_snapshots.front() == z0);
    CHECK(result.trace.z_snapshots.back() == result.z);
    for (double loss : result.trace.loss_per_step) {
        CHECK(std::isfinite(loss));
        CHECK(loss >= 0.0);
    }
    // Without the flag no snapshots are kept.
    auto plain = refine_against_distribution(z0, rows, p, config);
    CHECK(plain.trace.z_snapshots.empty());
    CHECK(plain.z == result.z);
}

TEST_CASE("refinement at a stationary start returns z0 exactly") {
    GaussianStream g(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto z0 = random_vector(g, 8);
        auto rows = random_rows(g, 5, 8);
        Distribution p_e = softmax(testsupport::replicated_feedback_cosines(z0, rows));
        RefinementConfig config;
        config.steps = 20;
        auto result = refine_against_distribution(z0, rows, p_e, config);
        CHECK(oracle::l2_distance(result.z, z0) < 1e-12);
    }
}

TEST_CASE("refinement descends on a separable instance") {
    GaussianStream g(8);
    auto z0 = random_vector(g, 16);
    auto rows = random_rows(g, 6, 16);
    // Teacher prefers row 0 strongly.
    Distribution p{0.9, 0.02, 0.02, 0.02, 0.02, 0.02};
    RefinementConfig config;
    config.steps = 100;
    auto result = refine_against_distribution(z0, rows, p, config);
    CHECK(result.trace.loss_per_step.back() < result.trace.loss_per_step.front());
}

TEST_CASE("refine_against_distribution validates its inputs") {
    GaussianStream g(9);
    auto z0 = random_vector(g, 4);
    auto rows = random_rows(g, 2, 4);
    RefinementConfig config;
    CHECK(code_of([&] {
              refine_against_distribution(z0, {rows[0]}, Distribution{1.0}, config);
          }) == Errc::FeedbackTooSmall);
    CHECK(code_of([&] {
              refine_against_distribution(z0, rows, Distribution{0.5, 0.25, 0.25}, config);
          }) == Errc::LengthMismatch);
}

namespace {

CorpusIndex small_index() {
    CorpusIndex index;
    GaussianStream g(10);
    for (std::size_t i = 0; i < 6; ++i) {
        std::string id = "doc" + std::to_string(i);
        index.documents.push_back({id, "text"});
        index.id_to_row[id] = i;
        index.embeddings.append_row(random_vector(g, 8));
    }
    return index;
}

FeedbackSet feedback_for(const std::vector<std::pair<std::string, double>>& scored) {
    FeedbackSet fb;
    fb.query_id = "q";
    for (const auto& [id, score] : scored)
        fb.entries.push_back({id, score, ScoreSource::Oracle, 0, false, false});
    return fb;
}

}  // namespace

TEST_CASE("refine_query leaves the corpus untouched and z0 unmodified") {
    CorpusIndex index = small_index();
    auto bytes_before = index.embeddings.data();
    GaussianStream g(11);
    std::vector<double> z0 = random_vector(g, 8);
    std::vector<double> z0_copy = z0;
    FeedbackSet fb = feedback_for({{"doc0", 0.9}, {"doc3", 0.4}, {"doc5", 0.1}});
    RefinementConfig config;
    config.steps = 25;
    auto result = refine_query(z0, fb, index, config);
    CHECK_FALSE(result.skipped);
    CHECK(index.embeddings.data() == bytes_before);
    CHECK(z0 == z0_copy);
    CHECK(result.trace.loss_per_step.size() == 26);
}

TEST_CASE("refine_query is deterministic") {
    CorpusIndex index = small_index();
    GaussianStream g(12);
    std::vector<double> z0 = random_vector(g, 8);
    FeedbackSet fb = feedback_for({{"doc1", 0.8}, {"doc2", 0.3}, {"doc4", 0.6}});
    RefinementConfig config;
    auto a = refine_query(z0, fb, index, config);
    auto b = refine_query(z0, fb, index, config);
    CHECK(a.z == b.z);
    CHECK(a.trace.loss_per_step == b.trace.loss_per_step);
    CHECK(a.trace.z_norm_per_step == b.trace.z_norm_per_step);
}

TEST_CASE("refine_query skips on a single usable score and fails on none") {
    CorpusIndex index = small_index();
    std::vector<double> z0{1.0, 0, 0, 0, 0, 0, 0, 0};
    RefinementConfig config;

    FeedbackSet one = feedback_for({{"doc0", 0.7}});
    auto result = refine_query(z0, one, index, config, true);
    CHECK(result.skipped);
    CHECK_FALSE(result.skip_reason.empty());
    CHECK(result.z == z0);
    CHECK(result.trace.loss_per_step == std::vector<double>{0.0});
    CHECK(result.trace.z_snapshots.size() == 1);

    FeedbackSet none = feedback_for({});
    CHECK(code_of([&] { refine_query(z0, none, index, config); }) == Errc::FeedbackTooSmall);
}

TEST_CASE("refine_query rejects feedback for unknown documents") {
    CorpusIndex index = small_index();
    std::vector<double> z0{1.0, 0, 0, 0, 0, 0, 0, 0};
    FeedbackSet fb = feedback_for({{"doc0", 0.5}, {"ghost", 0.5}});
    RefinementConfig config;
    CHECK(code_of([&] { refine_query(z0, fb, index, config); }) == Errc::UnknownDoc);
}

TEST_CASE("rerank_only: teacher agreeing with the order is a fixed point") {
    auto index = small_index();
    GaussianStream g(13);
    std::vector<double> z = random_vector(g, 8);
    Ranking original = rank(score_corpus(z, index), index);
    FeedbackSet fb;
    fb.query_id = "q";
    double score = 0.9;
    for (std::size_t i = 0; i < 3; ++i, score -= 0.2)
        fb.entries.push_back({original.entries[i].doc_id, score, ScoreSource::Oracle, 0, false,
                              false});
    Ranking out = rerank_only(original, fb, 3);
    for (std::size_t i = 0; i < original.size(); ++i)
        CHECK(out.entries[i].doc_id == original.entries[i].doc_id);
    // Prefix reports the teacher's scores, the tail keeps embedding scores.
    CHECK(out.entries[0].score == 0.9);
    CHECK(out.entries[3].score == original.entries[3].score);
}

TEST_CASE("rerank_only swaps a two-doc prefix when the teacher disagrees") {
    auto index = small_index();
    GaussianStream g(14);
    std::vector<double> z = random_vector(g, 8);
    Ranking original = rank(score_corpus(z, index), index);
    FeedbackSet fb = feedback_for({{original.entries[0].doc_id, 0.1},
                                   {original.entries[1].doc_id, 0.9}});
    Ranking out = rerank_only(original, fb, 2);
    CHECK(out.entries[0].doc_id == original.entries[1].doc_id);
    CHECK(out.entries[1].doc_id == original.entries[0].doc_id);
    for (std::size_t i = 2; i < original.size(); ++i)
        CHECK(out.entries[i].doc_id == original.entries[i].doc_id);
}

TEST_CASE("rerank_only matches a stable-sort reference and keeps the tail bit-identical") {
    // 50 docs, k=20, scores drawn with deliberate ties.
    CorpusIndex index;
    GaussianStream g(15);
    for (std::size_t i = 0; i < 50; ++i) {
        std::string id = "doc" + std::to_string(100 + i);
        index.documents.push_back({id, "t"});
        index.id_to_row[id] = i;
        index.embeddings.append_row(random_vector(g, 8));
    }
    std::vector<double> z = random_vector(g, 8);
    Ranking original = rank(score_corpus(z, index), index);

    FeedbackSet fb;
    fb.query_id = "q";
    std::vector<std::pair<std::string, double>> scored;
    for (std::size_t i = 0; i < 20; ++i) {
        double score = std::floor(std::fabs(g.next()) * 4) / 4;  // coarse: many ties
        scored.emplace_back(original.entries[i].doc_id, score);
        fb.entries.push_back(
            {original.entries[i].doc_id, score, ScoreSource::Oracle, 0, false, false});
    }

    Ranking out = rerank_only(original, fb, 20);

    auto reference = scored;
    std::stable_sort(reference.begin(), reference.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(out.entries[i].doc_id == reference[i].first);
        CHECK(out.entries[i].score == reference[i].second);
    }
    for (std::size_t i = 20; i < 50; ++i) {
        CHECK(out.entries[i].doc_id == original.entries[i].doc_id);
        CHECK(out.entries[i].score == original.entries[i].score);
    }
    CHECK(out.position.at(out.entries[0].doc_id) == 0);
}

TEST_CASE("rerank_only clips k to the corpus size") {
    auto index = small_index();
    GaussianStream g(16);
    std::vector<double> z = random_vector(g, 8);
    Ranking original = rank(score_corpus(z, index), index);
    FeedbackSet fb;
    fb.query_id = "q";
    for (const auto& e : original.entries)
        fb.entries.push_back({e.doc_id, 1.0 - e.score, ScoreSource::Oracle, 0, false, false});
    Ranking out = rerank_only(original, fb, 20);  // corpus has 6 docs
    CHECK(out.size() == 6);
}

TEST_CASE("rerank_only rejects feedback that does not cover the prefix") {
    auto index = small_index();
    GaussianStream g(17);
    std::vector<double> z = random_vector(g, 8);
    Ranking original = rank(score_corpus(z, index), index);

    FeedbackSet small = feedback_for({{original.entries[0].doc_id, 0.5}});
    CHECK(code_of([&] { rerank_only(original, small, 3); }) == Errc::FeedbackMismatch);

    FeedbackSet wrong_docs = feedback_for({{original.entries[0].doc_id, 0.5},
                                           {original.entries[1].doc_id, 0.5},
                                           {original.entries[5].doc_id, 0.5}});
    CHECK(code_of([&] { rerank_only(original, wrong_docs, 3); }) == Errc::FeedbackMismatch);
}

TEST_CASE("trace JSONL has one sorted-key record per loss evaluation") {
    testsupport::TempDir dir;
    RefinementTrace trace;
    trace.loss_per_step = {0.5, 0.25};
    trace.z_norm_per_step = {1.0, 1.5};
    write_trace_jsonl(dir / "trace.jsonl", trace);

    std::ifstream in(dir / "trace.jsonl");
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(content ==
          "{\"loss\":0.5,\"step\":0,\"z_norm\":1.0}\n"
          "{\"loss\":0.25,\"step\":1,\"z_norm\":1.5}\n");
}

TEST_CASE("snapshots write as a loadable embedding file") {
    testsupport::TempDir dir;
    RefinementTrace trace;
    trace.z_snapshots = {{1.0, 0.0}, {0.5, 0.5}, {0.25, 0.75}};
    write_snapshots(dir / "snaps.bin", trace);
    EmbeddingMatrix back = load_embeddings(dir / "snaps.bin", 3);
    CHECK(back.dim() == 2);
    CHECK(back.row(1)[0] == 0.5f);

    RefinementTrace empty;
    CHECK(code_of([&] { write_snapshots(dir / "none.bin", empty); }) == Errc::MissingSnapshots);
}
