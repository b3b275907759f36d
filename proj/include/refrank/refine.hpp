#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "refrank/corpus.hpp"
#include "refrank/feedback.hpp"
#include "refrank/ranking.hpp"

namespace refrank {

enum class TeacherNormalization { SoftmaxT1, MinMaxThenSoftmaxT2 };

TeacherNormalization parse_teacher_normalization(const std::string& name);
std::string teacher_normalization_name(TeacherNormalization mode);

struct RefinementConfig {
    std::size_t k = 20;
    std::size_t steps = 100;
    double learning_rate = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    TeacherNormalization normalization = TeacherNormalization::SoftmaxT1;

    void validate() const;  // throws BadConfig
};

// Probabilities over the feedback documents, aligned with feedback order.
using Distribution = std::vector<double>;

struct RefinementState {
    std::vector<double> z;
    std::vector<double> m;
    std::vector<double> v;
    std::size_t step = 0;

    static RefinementState init(std::span<const double> z0);
};

struct RefinementTrace {
    // Loss evaluated at t = 0..T: steps+1 entries, so "final < initial" is
    // well-defined even at T=0. z_norm_per_step is aligned with it.
    std::vector<double> loss_per_step;
    std::vector<double> z_norm_per_step;
    // One query-vector snapshot per loss evaluation when capture is on.
    std::vector<std::vector<double>> z_snapshots;
};

struct RefinementResult {
    std::vector<double> z;
    RefinementTrace trace;
    bool skipped = false;
    std::string skip_reason;
};

// Numerically stable (max-subtracted) softmax; shift-invariant, sums to 1.
Distribution softmax(std::span<const double> scores);

// SoftmaxT1: plain softmax on raw scores. MinMaxThenSoftmaxT2: rescale to
// [0,1] by (s-min)/(max-min), then softmax(scaled/2); max==min gives uniform.
Distribution normalize_teacher_scores(std::span<const double> scores, TeacherNormalization mode);

// KL(p||q) in nats. p_i == 0 contributes 0; q_i == 0 with p_i > 0 gives +inf.
double kl_divergence(const Distribution& p, const Distribution& q);

// Gradient of KL(p_teacher || softmax(cos(z, rows))) with respect to z:
//   sum_i (p_e_i - p_t_i) * (e_i/(|z||e_i|) - cos(z,e_i) * z/|z|^2)
std::vector<double> refinement_gradient(std::span<const double> z,
                                        const std::vector<std::vector<double>>& feedback_rows,
                                        const Distribution& p_teacher);

// Standard Adam with bias correction, applied in place; increments step.
void adam_step(RefinementState& state, std::span<const double> grad,
               const RefinementConfig& config);

// Core optimization loop over an already-built feedback matrix and teacher
// distribution. The feedback rows are fixed for all steps; z0 is not mutated.
RefinementResult refine_against_distribution(std::span<const double> z0,
                                             const std::vector<std::vector<double>>& feedback_rows,
                                             const Distribution& p_teacher,
                                             const RefinementConfig& config,
                                             bool capture_snapshots = false);

// Full per-query path: looks up the feedback documents in the index, builds
// the teacher distribution per config.normalization, then optimizes. A
// feedback set with exactly one usable score is degenerate (one-point softmax
// carries no gradient), so refinement is skipped and z0 returned with a flag.
RefinementResult refine_query(std::span<const double> z0, const FeedbackSet& feedback,
                              const CorpusIndex& index, const RefinementConfig& config,
                              bool capture_snapshots = false);

// Reorder the top-min(k, N) prefix of `original` by teacher score descending
// (ties keep original relative order). Prefix entries report teacher scores;
// every position beyond the prefix is unchanged.
Ranking rerank_only(const Ranking& original, const FeedbackSet& feedback, std::size_t k);

// One JSON object per line: {"step": t, "loss": ..., "z_norm": ...}.
void write_trace_jsonl(const std::filesystem::path& path, const RefinementTrace& trace);

// Snapshots as an embedding file (rows = one snapshot per loss evaluation).
void write_snapshots(const std::filesystem::path& path, const RefinementTrace& trace);

}  // namespace refrank
