#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "refrank/corpus.hpp"
#include "refrank/feedback.hpp"
#include "refrank/pipeline.hpp"
#include "refrank/refine.hpp"

namespace refrank {

struct Pca2 {
    std::vector<double> mean;
    std::array<std::vector<double>, 2> directions;  // unit-norm, orthogonal
    std::array<double, 2> explained_variance;       // descending
};

// Top-2 principal directions of the sample covariance by orthogonal power
// iteration with deflation (tolerance 1e-10, at most 10000 iterations).
// Sign convention: each direction's largest-magnitude coordinate is positive.
Pca2 pca_top2(const EmbeddingMatrix& points);

struct ProjectedPoint {
    std::string id;   // doc id, or the step index for trajectory points
    double x = 0.0;
    double y = 0.0;
    bool label = false;        // relevance flag (corpus points)
    bool in_feedback = false;  // member of the feedback set (corpus points)
};

struct Projection2D {
    Pca2 basis;
    std::vector<ProjectedPoint> corpus_points;
    std::vector<ProjectedPoint> trajectory_points;
};

// PCA is fit on the corpus embeddings only; the corpus, every query-vector
// snapshot, relevance labels, and the feedback mask are projected into that
// fixed basis.
Projection2D project_run(const CorpusIndex& index, const RefinementTrace& trace,
                         const FeedbackSet& feedback, const Qrels& qrels,
                         const std::string& query_id);

// CSV `kind,id,x,y,label,in_feedback` with kind in {corpus, trajectory}.
void write_projection_csv(const std::filesystem::path& path, const Projection2D& projection);

// CSV `step,loss,z_norm`.
void write_loss_csv(const std::filesystem::path& path, const RefinementTrace& trace);

struct KSweepRow {
    std::size_t k = 0;
    std::string setting;
    double map = 0.0;
};

// Runs the pipeline once per k with everything else fixed; the shared teacher
// means cached responses are reused where top-k prefixes overlap.
std::vector<KSweepRow> k_sweep(const RunConfig& config, const LoadedData& data, Teacher& teacher,
                               EmbeddingProvider& provider, const std::vector<std::size_t>& ks);

// CSV `k,setting,map`.
void write_k_sweep_csv(const std::filesystem::path& path, const std::vector<KSweepRow>& rows);

struct FeedbackQualityResult {
    double pearson_r = 0.0;
    double p_value = 1.0;  // two-sided t approximation with n-2 df
};

FeedbackQualityResult feedback_quality_table(const std::vector<double>& per_query_auc,
                                             const std::vector<double>& per_query_ap_gain_pct);

}  // namespace refrank
