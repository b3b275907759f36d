#include "refrank/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "refrank/error.hpp"
#include "refrank/eval.hpp"
#include "refrank/util.hpp"

namespace refrank {

namespace {

constexpr double kPcaTolerance = 1e-10;
constexpr int kPcaMaxIterations = 10000;
constexpr double kRankRatioFloor = 1e-13;

// y = sample-covariance * v, computed against the centered rows without
// forming the d x d matrix.
std::vector<double> covariance_times(const EmbeddingMatrix& points,
                                     const std::vector<double>& mean,
                                     const std::vector<double>& v) {
    std::size_t n = points.count(), d = points.dim();
    std::vector<double> y(d, 0.0);
    double mean_dot_v = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean_dot_v += mean[j] * v[j];
    for (std::size_t i = 0; i < n; ++i) {
        auto row = points.row(i);
        double proj = -mean_dot_v;
        for (std::size_t j = 0; j < d; ++j) proj += double(row[j]) * v[j];
        for (std::size_t j = 0; j < d; ++j) y[j] += proj * (double(row[j]) - mean[j]);
    }
    for (double& x : y) x /= double(n - 1);
    return y;
}

void subtract_projection(std::vector<double>& v, const std::vector<double>& onto) {
    double dot = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) dot += v[j] * onto[j];
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= dot * onto[j];
}

double normalize(std::vector<double>& v) {
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    double n = std::sqrt(n2);
    if (n > 0)
        for (double& x : v) x /= n;
    return n;
}

void fix_sign(std::vector<double>& v) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < v.size(); ++j)
        if (std::fabs(v[j]) > std::fabs(v[arg])) arg = j;
    if (v[arg] < 0)
        for (double& x : v) x = -x;
}

std::vector<double> power_iterate(const EmbeddingMatrix& points, const std::vector<double>& mean,
                                  const std::vector<double>* deflate, std::uint64_t seed) {
    GaussianStream stream(seed);
    std::vector<double> v(points.dim());
    for (double& x : v) x = stream.next();
    if (deflate) subtract_projection(v, *deflate);
    if (normalize(v) <= 0) fail(Errc::DegenerateData, "degenerate start vector");

    for (int it = 0; it < kPcaMaxIterations; ++it) {
        std::vector<double> next = covariance_times(points, mean, v);
        if (deflate) {
            // If the covariance image lies (almost) entirely in the deflated
            // span, the data has rank 1: deflation leaves only rounding noise
            // parallel to the first component, and normalizing it would
            // silently resurrect that direction as a bogus second component.
            double before = 0.0;
            for (double x : next) before += x * x;
            subtract_projection(next, *deflate);
            double after = 0.0;
            for (double x : next) after += x * x;
            if (after <= before * kRankRatioFloor * kRankRatioFloor)
                fail(Errc::DegenerateData, "centered data has rank < 2");
        }
        if (normalize(next) <= 0)
            fail(Errc::DegenerateData, "covariance annihilated the iterate");
        // Align sign before measuring the update size; eigenvectors are
        // defined up to sign and the iterate may alternate.
        double dot = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) dot += next[j] * v[j];
        if (dot < 0)
            for (double& x : next) x = -x;
        double delta = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) delta += (next[j] - v[j]) * (next[j] - v[j]);
        v = std::move(next);
        if (std::sqrt(delta) < kPcaTolerance) break;
    }
    return v;
}

double rayleigh(const EmbeddingMatrix& points, const std::vector<double>& mean,
                const std::vector<double>& v) {
    std::vector<double> cv = covariance_times(points, mean, v);
    double num = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) num += v[j] * cv[j];
    return num;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::ParseError, "cannot open " + path.string() + " for writing");
    out << content;
    if (!out.good()) fail(Errc::ParseError, "write failed: " + path.string());
}

}  // namespace

Pca2 pca_top2(const EmbeddingMatrix& points) {
    std::size_t n = points.count(), d = points.dim();
    if (n < 3) fail(Errc::DegenerateData, "PCA needs at least 3 points, got " + std::to_string(n));
    if (d < 2) fail(Errc::DegenerateData, "PCA needs dimension >= 2, got " + std::to_string(d));

    Pca2 out;
    out.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = points.row(i);
        for (std::size_t j = 0; j < d; ++j) out.mean[j] += double(row[j]);
    }
    for (double& m : out.mean) m /= double(n);

    out.directions[0] = power_iterate(points, out.mean, nullptr, 0x9e3779b97f4a7c15ULL);
    out.explained_variance[0] = rayleigh(points, out.mean, out.directions[0]);
    if (!(out.explained_variance[0] > 0))
        fail(Errc::DegenerateData, "corpus has zero variance after centering");

    out.directions[1] =
        power_iterate(points, out.mean, &out.directions[0], 0xdeadbeefcafef00dULL);
    subtract_projection(out.directions[1], out.directions[0]);
    if (normalize(out.directions[1]) <= 0)
        fail(Errc::DegenerateData, "no second principal direction");
    out.explained_variance[1] = rayleigh(points, out.mean, out.directions[1]);
    if (out.explained_variance[1] < 0) out.explained_variance[1] = 0;
    if (out.explained_variance[1] <= out.explained_variance[0] * kRankRatioFloor)
        fail(Errc::DegenerateData, "centered data has rank < 2");

    fix_sign(out.directions[0]);
    fix_sign(out.directions[1]);
    return out;
}

namespace {

std::pair<double, double> project_point(const Pca2& basis, std::span<const double> p) {
    double x = 0.0, y = 0.0;
    for (std::size_t j = 0; j < basis.mean.size(); ++j) {
        double centered = p[j] - basis.mean[j];
        x += centered * basis.directions[0][j];
        y += centered * basis.directions[1][j];
    }
    return {x, y};
}

}  // namespace

Projection2D project_run(const CorpusIndex& index, const RefinementTrace& trace,
                         const FeedbackSet& feedback, const Qrels& qrels,
                         const std::string& query_id) {
    if (trace.z_snapshots.empty())
        fail(Errc::MissingSnapshots, "trace was captured without query-vector snapshots");
    if (!qrels.positives.count(query_id) && !qrels.negatives.count(query_id))
        fail(Errc::UnknownQuery, "query '" + query_id + "' has no relevance judgments");

    Projection2D out;
    out.basis = pca_top2(index.embeddings);

    std::set<std::string> in_feedback(feedback.failed.begin(), feedback.failed.end());
    for (const auto& e : feedback.entries) in_feedback.insert(e.doc_id);

    std::size_t d = index.embeddings.dim();
    out.corpus_points.reserve(index.count());
    std::vector<double> buffer(d);
    for (std::size_t i = 0; i < index.count(); ++i) {
        auto row = index.embeddings.row(i);
        for (std::size_t j = 0; j < d; ++j) buffer[j] = double(row[j]);
        auto [x, y] = project_point(out.basis, buffer);
        ProjectedPoint p;
        p.id = index.row_to_id(i);
        p.x = x;
        p.y = y;
        p.label = qrels.is_positive(query_id, p.id);
        p.in_feedback = in_feedback.count(p.id) > 0;
        out.corpus_points.push_back(std::move(p));
    }

    out.trajectory_points.reserve(trace.z_snapshots.size());
    for (std::size_t t = 0; t < trace.z_snapshots.size(); ++t) {
        const auto& z = trace.z_snapshots[t];
        if (z.size() != d)
            fail(Errc::DimMismatch, "snapshot dim " + std::to_string(z.size()) +
                                        " vs corpus dim " + std::to_string(d));
        auto [x, y] = project_point(out.basis, z);
        ProjectedPoint p;
        p.id = std::to_string(t);
        p.x = x;
        p.y = y;
        out.trajectory_points.push_back(std::move(p));
    }
    return out;
}

void write_projection_csv(const std::filesystem::path& path, const Projection2D& projection) {
    std::string out = "kind,id,x,y,label,in_feedback\n";
    auto append = [&out](const char* kind, const ProjectedPoint& p) {
        out += kind;
        out += ',';
        out += csv_escape(p.id);
        out += ',';
        out += format_shortest(p.x);
        out += ',';
        out += format_shortest(p.y);
        out += ',';
        out += p.label ? '1' : '0';
        out += ',';
        out += p.in_feedback ? '1' : '0';
        out += '\n';
    };
    for (const auto& p : projection.corpus_points) append("corpus", p);
    for (const auto& p : projection.trajectory_points) append("trajectory", p);
    write_text_file(path, out);
}

void write_loss_csv(const std::filesystem::path& path, const RefinementTrace& trace) {
    std::string out = "step,loss,z_norm\n";
    for (std::size_t t = 0; t < trace.loss_per_step.size(); ++t) {
        out += std::to_string(t);
        out += ',';
        out += format_shortest(trace.loss_per_step[t]);
        out += ',';
        out += format_shortest(trace.z_norm_per_step[t]);
        out += '\n';
    }
    write_text_file(path, out);
}

std::vector<KSweepRow> k_sweep(const RunConfig& config, const LoadedData& data, Teacher& teacher,
                               EmbeddingProvider& provider,
                               const std::vector<std::size_t>& ks) {
    if (ks.empty()) fail(Errc::BadConfig, "k-sweep needs at least one k value");
    for (std::size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] < 1) fail(Errc::BadConfig, "k values must be positive");
        if (i > 0 && ks[i] <= ks[i - 1])
            fail(Errc::BadConfig, "k values must be strictly ascending");
    }
    std::vector<KSweepRow> rows;
    for (std::size_t k : ks) {
        RunConfig sweep_config = config;
        sweep_config.refinement.k = k;
        sweep_config.output_dir.clear();
        PipelineResult result = run_pipeline(sweep_config, data, teacher, provider);
        for (const auto& [setting, map_value] : result.report.map_by_setting)
            rows.push_back({k, setting, map_value});
    }
    return rows;
}

void write_k_sweep_csv(const std::filesystem::path& path, const std::vector<KSweepRow>& rows) {
    std::string out = "k,setting,map\n";
    for (const auto& row : rows) {
        out += std::to_string(row.k);
        out += ',';
        out += row.setting;
        out += ',';
        out += format_shortest(row.map);
        out += '\n';
    }
    write_text_file(path, out);
}

FeedbackQualityResult feedback_quality_table(const std::vector<double>& per_query_auc,
                                             const std::vector<double>& per_query_ap_gain_pct) {
    FeedbackQualityResult out;
    out.pearson_r = pearson(per_query_auc, per_query_ap_gain_pct);
    double n = double(per_query_auc.size());
    double r2 = out.pearson_r * out.pearson_r;
    if (r2 >= 1.0) {
        out.p_value = 1e-300;
        return out;
    }
    double t = out.pearson_r * std::sqrt((n - 2.0) / (1.0 - r2));
    out.p_value = std::max(2.0 * student_t_upper_tail(std::fabs(t), n - 2.0), 1e-300);
    return out;
}

}  // namespace refrank
