#include "refrank/refine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "refrank/error.hpp"
#include "refrank/util.hpp"

namespace refrank {

namespace {

constexpr double kMinNorm = 1e-12;

double norm_d(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Cosine scores of z against each feedback row, with the row norms reused by
// the gradient. Throws on dim mismatch or zero-norm inputs.
struct FeedbackGeometry {
    double z_norm;
    std::vector<double> row_norms;
    std::vector<double> cosines;
};

FeedbackGeometry feedback_geometry(std::span<const double> z,
                                   const std::vector<std::vector<double>>& rows) {
    FeedbackGeometry g;
    g.z_norm = norm_d(z);
    if (g.z_norm <= kMinNorm) fail(Errc::ZeroNorm, "query vector has zero norm");
    g.row_norms.reserve(rows.size());
    g.cosines.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& e = rows[i];
        if (e.size() != z.size())
            fail(Errc::DimMismatch, "feedback row " + std::to_string(i) + " has dim " +
                                        std::to_string(e.size()) + ", query has " +
                                        std::to_string(z.size()));
        double dot = 0.0, n2 = 0.0;
        for (std::size_t j = 0; j < e.size(); ++j) {
            dot += z[j] * e[j];
            n2 += e[j] * e[j];
        }
        double n = std::sqrt(n2);
        if (n <= kMinNorm) fail(Errc::ZeroNorm, "feedback row " + std::to_string(i) + " has zero norm");
        g.row_norms.push_back(n);
        g.cosines.push_back(std::min(1.0, std::max(-1.0, dot / (g.z_norm * n))));
    }
    return g;
}

}  // namespace

TeacherNormalization parse_teacher_normalization(const std::string& name) {
    if (name == "softmax_t1") return TeacherNormalization::SoftmaxT1;
    if (name == "minmax_softmax_t2") return TeacherNormalization::MinMaxThenSoftmaxT2;
    fail(Errc::BadConfig,
         "unknown normalization '" + name + "' (expected softmax_t1 or minmax_softmax_t2)");
}

std::string teacher_normalization_name(TeacherNormalization mode) {
    return mode == TeacherNormalization::SoftmaxT1 ? "softmax_t1" : "minmax_softmax_t2";
}

void RefinementConfig::validate() const {
    if (k < 1) fail(Errc::BadConfig, "feedback size k must be >= 1");
    if (learning_rate <= 0) fail(Errc::BadConfig, "learning_rate must be > 0");
    if (adam_beta1 < 0 || adam_beta1 >= 1) fail(Errc::BadConfig, "adam_beta1 must be in [0, 1)");
    if (adam_beta2 < 0 || adam_beta2 >= 1) fail(Errc::BadConfig, "adam_beta2 must be in [0, 1)");
    if (adam_eps <= 0) fail(Errc::BadConfig, "adam_eps must be > 0");
}

RefinementState RefinementState::init(std::span<const double> z0) {
    RefinementState s;
    s.z.assign(z0.begin(), z0.end());
    s.m.assign(z0.size(), 0.0);
    s.v.assign(z0.size(), 0.0);
    s.step = 0;
    return s;
}

Distribution softmax(std::span<const double> scores) {
    if (scores.empty()) fail(Errc::EmptyInput, "softmax of empty vector");
    double mx = *std::max_element(scores.begin(), scores.end());
    if (!std::isfinite(mx)) fail(Errc::NonFiniteLoss, "softmax input is not finite");
    Distribution out(scores.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(scores[i] - mx);
        sum += out[i];
    }
    for (double& p : out) p /= sum;
    return out;
}

Distribution normalize_teacher_scores(std::span<const double> scores,
                                      TeacherNormalization mode) {
    if (scores.empty()) fail(Errc::EmptyInput, "no teacher scores to normalize");
    if (mode == TeacherNormalization::SoftmaxT1) return softmax(scores);
    auto [mn_it, mx_it] = std::minmax_element(scores.begin(), scores.end());
    double mn = *mn_it, mx = *mx_it;
    if (mx == mn) return Distribution(scores.size(), 1.0 / double(scores.size()));
    std::vector<double> scaled(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scaled[i] = (scores[i] - mn) / (mx - mn) / 2.0;
    return softmax(scaled);
}

double kl_divergence(const Distribution& p, const Distribution& q) {
    if (p.size() != q.size())
        fail(Errc::LengthMismatch, "KL over distributions of length " + std::to_string(p.size()) +
                                       " and " + std::to_string(q.size()));
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
        acc += p[i] * std::log(p[i] / q[i]);
    }
    return acc;
}

std::vector<double> refinement_gradient(std::span<const double> z,
                                        const std::vector<std::vector<double>>& feedback_rows,
                                        const Distribution& p_teacher) {
    if (feedback_rows.size() != p_teacher.size())
        fail(Errc::LengthMismatch, "feedback rows vs teacher distribution length");
    if (feedback_rows.empty()) fail(Errc::EmptyInput, "gradient over empty feedback set");
    FeedbackGeometry g = feedback_geometry(z, feedback_rows);
    Distribution p_e = softmax(g.cosines);

    // d(KL)/d(score_i) = p_e_i - p_t_i; chain through the cosine.
    std::vector<double> grad(z.size(), 0.0);
    double zn = g.z_norm;
    double zn2 = zn * zn;
    for (std::size_t i = 0; i < feedback_rows.size(); ++i) {
        double w = p_e[i] - p_teacher[i];
        if (w == 0.0) continue;
        const auto& e = feedback_rows[i];
        double a = w / (zn * g.row_norms[i]);
        double b = w * g.cosines[i] / zn2;
        for (std::size_t j = 0; j < z.size(); ++j) grad[j] += a * e[j] - b * z[j];
    }
    return grad;
}

void adam_step(RefinementState& state, std::span<const double> grad,
               const RefinementConfig& config) {
    if (grad.size() != state.z.size())
        fail(Errc::DimMismatch, "gradient dim " + std::to_string(grad.size()) + " vs state dim " +
                                    std::to_string(state.z.size()));
    if (!all_finite(grad))
        fail(Errc::NonFiniteGradient, "at step " + std::to_string(state.step + 1));

    double b1 = config.adam_beta1, b2 = config.adam_beta2;
    std::size_t t = state.step + 1;
    double c1 = 1.0 - std::pow(b1, double(t));
    double c2 = 1.0 - std::pow(b2, double(t));
    for (std::size_t j = 0; j < grad.size(); ++j) {
        state.m[j] = b1 * state.m[j] + (1.0 - b1) * grad[j];
        state.v[j] = b2 * state.v[j] + (1.0 - b2) * grad[j] * grad[j];
        double m_hat = state.m[j] / c1;
        double v_hat = state.v[j] / c2;
        state.z[j] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_eps);
    }
    state.step = t;
}

RefinementResult refine_against_distribution(std::span<const double> z0,
                                             const std::vector<std::vector<double>>& feedback_rows,
                                             const Distribution& p_teacher,
                                             const RefinementConfig& config,
                                             bool capture_snapshots) {
    config.validate();
    if (feedback_rows.size() < 2)
        fail(Errc::FeedbackTooSmall, std::to_string(feedback_rows.size()) + " feedback rows");
    if (feedback_rows.size() != p_teacher.size())
        fail(Errc::LengthMismatch, "feedback rows vs teacher distribution length");

    RefinementResult result;
    RefinementState state = RefinementState::init(z0);
    result.trace.loss_per_step.reserve(config.steps + 1);
    result.trace.z_norm_per_step.reserve(config.steps + 1);
    if (capture_snapshots) result.trace.z_snapshots.reserve(config.steps + 1);

    for (std::size_t t = 0; t <= config.steps; ++t) {
        FeedbackGeometry g = feedback_geometry(state.z, feedback_rows);
        Distribution p_e = softmax(g.cosines);
        double loss = kl_divergence(p_teacher, p_e);
        if (!std::isfinite(loss)) fail(Errc::NonFiniteLoss, "at step " + std::to_string(t));
        result.trace.loss_per_step.push_back(loss);
        result.trace.z_norm_per_step.push_back(g.z_norm);
        if (capture_snapshots) result.trace.z_snapshots.push_back(state.z);
        if (t == config.steps) break;
        adam_step(state, refinement_gradient(state.z, feedback_rows, p_teacher), config);
    }
    result.z = std::move(state.z);
    return result;
}

RefinementResult refine_query(std::span<const double> z0, const FeedbackSet& feedback,
                              const CorpusIndex& index, const RefinementConfig& config,
                              bool capture_snapshots) {
    config.validate();
    if (feedback.entries.empty())
        fail(Errc::FeedbackTooSmall, "feedback set for query '" + feedback.query_id +
                                         "' has no usable scores");
    if (feedback.entries.size() < 2) {
        RefinementResult r;
        r.z.assign(z0.begin(), z0.end());
        r.skipped = true;
        r.skip_reason = "feedback set has " + std::to_string(feedback.entries.size()) +
                        " usable score(s); at least 2 are needed for a non-degenerate "
                        "teacher distribution";
        r.trace.loss_per_step.push_back(0.0);
        r.trace.z_norm_per_step.push_back(norm_d(z0));
        if (capture_snapshots) r.trace.z_snapshots.push_back(r.z);
        return r;
    }

    std::vector<std::vector<double>> rows;
    rows.reserve(feedback.entries.size());
    for (const auto& entry : feedback.entries) {
        std::size_t row = index.row_of(entry.doc_id);
        auto fr = index.embeddings.row(row);
        rows.emplace_back(fr.begin(), fr.end());
    }
    Distribution p_teacher = normalize_teacher_scores(feedback.scores(), config.normalization);
    return refine_against_distribution(z0, rows, p_teacher, config, capture_snapshots);
}

Ranking rerank_only(const Ranking& original, const FeedbackSet& feedback, std::size_t k) {
    std::size_t take = std::min(k, original.entries.size());
    if (feedback.entries.size() != take)
        fail(Errc::FeedbackMismatch, "feedback has " + std::to_string(feedback.entries.size()) +
                                         " entries, top prefix has " + std::to_string(take));
    std::unordered_map<std::string, double> teacher_score;
    teacher_score.reserve(feedback.entries.size());
    for (const auto& e : feedback.entries) teacher_score.emplace(e.doc_id, e.score);

    std::vector<RankedDoc> entries = original.entries;
    for (std::size_t i = 0; i < take; ++i) {
        auto it = teacher_score.find(entries[i].doc_id);
        if (it == teacher_score.end())
            fail(Errc::FeedbackMismatch,
                 "feedback does not cover top-ranked doc '" + entries[i].doc_id + "'");
        entries[i].score = it->second;
    }
    std::stable_sort(entries.begin(), entries.begin() + std::ptrdiff_t(take),
                     [](const RankedDoc& a, const RankedDoc& b) { return a.score > b.score; });
    return Ranking::from_entries(std::move(entries));
}

void write_trace_jsonl(const std::filesystem::path& path, const RefinementTrace& trace) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(Errc::ParseError, "cannot open " + path.string() + " for writing");
    for (std::size_t t = 0; t < trace.loss_per_step.size(); ++t) {
        nlohmann::json rec;
        rec["step"] = t;
        rec["loss"] = trace.loss_per_step[t];
        rec["z_norm"] = trace.z_norm_per_step[t];
        out << rec.dump() << '\n';
    }
    if (!out.good()) fail(Errc::ParseError, "write failed: " + path.string());
}

void write_snapshots(const std::filesystem::path& path, const RefinementTrace& trace) {
    if (trace.z_snapshots.empty())
        fail(Errc::MissingSnapshots, "trace has no query-vector snapshots");
    EmbeddingMatrix m(trace.z_snapshots.front().size(), {});
    for (const auto& z : trace.z_snapshots) m.append_row(z);
    m.validate();
    write_embeddings(path, m);
}

}  // namespace refrank
