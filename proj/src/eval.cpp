#include "refrank/eval.hpp"

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

constexpr double kPValueFloor = 1e-300;

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::ParseError, "cannot open " + path.string() + " for writing");
    out << content;
    if (!out.good()) fail(Errc::ParseError, "write failed: " + path.string());
}

}  // namespace

double average_precision(const Ranking& ranking, const std::set<std::string>& positives) {
    if (positives.empty()) fail(Errc::EmptyPositives, "average precision needs positives");
    for (const auto& id : positives)
        if (!ranking.position.count(id))
            fail(Errc::UnknownDoc, "positive doc '" + id + "' missing from the ranking");
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t r = 0; r < ranking.entries.size(); ++r) {
        if (positives.count(ranking.entries[r].doc_id)) {
            ++hits;
            sum += double(hits) / double(r + 1);
        }
    }
    return sum / double(positives.size());
}

double mean_average_precision(const std::vector<RankedQuery>& results) {
    if (results.empty()) fail(Errc::EmptyInput, "MAP over an empty query list");
    double sum = 0.0;
    for (const auto& q : results) sum += average_precision(*q.ranking, *q.positives);
    return sum / double(results.size());
}

double recall_at_k(const Ranking& ranking, const std::set<std::string>& positives,
                   std::size_t k) {
    if (positives.empty()) fail(Errc::EmptyPositives, "recall@k needs positives");
    std::size_t take = std::min(k, ranking.entries.size());
    std::size_t hits = 0;
    for (std::size_t r = 0; r < take; ++r)
        if (positives.count(ranking.entries[r].doc_id)) ++hits;
    return double(hits) / double(positives.size());
}

std::vector<std::pair<double, double>> pr_curve(const Ranking& ranking,
                                                const std::set<std::string>& positives) {
    if (positives.empty()) fail(Errc::EmptyPositives, "PR curve needs positives");
    std::vector<std::pair<double, double>> points;
    points.reserve(ranking.entries.size());
    std::size_t hits = 0;
    for (std::size_t r = 0; r < ranking.entries.size(); ++r) {
        if (positives.count(ranking.entries[r].doc_id)) ++hits;
        points.emplace_back(double(hits) / double(positives.size()),
                            double(hits) / double(r + 1));
    }
    return points;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        fail(Errc::LengthMismatch, "scores and labels differ in length");
    std::size_t n_pos = 0, n_neg = 0;
    for (int l : labels) (l > 0 ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0)
        fail(Errc::SingleClass, "ROC-AUC needs both positive and negative labels");

    // Average ranks over ties, then the Mann-Whitney U statistic.
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> ranks(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg_rank = 0.5 * double(i + 1 + j + 1);
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg_rank;
        i = j + 1;
    }
    double rank_sum_pos = 0.0;
    for (std::size_t t = 0; t < labels.size(); ++t)
        if (labels[t] > 0) rank_sum_pos += ranks[t];
    double u = rank_sum_pos - double(n_pos) * double(n_pos + 1) / 2.0;
    return u / (double(n_pos) * double(n_neg));
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) fail(Errc::LengthMismatch, "pearson inputs differ in length");
    if (x.size() < 3)
        fail(Errc::TooFewPairs, "pearson needs at least 3 points, got " +
                                    std::to_string(x.size()));
    double n = double(x.size());
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) fail(Errc::ZeroVariance, "pearson input has zero variance");
    double r = sxy / std::sqrt(sxx * syy);
    return std::min(1.0, std::max(-1.0, r));
}

PairedTTest paired_t_test_one_sided(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail(Errc::LengthMismatch, "paired t-test inputs differ in length");
    if (a.size() < 2)
        fail(Errc::TooFewPairs, "paired t-test needs at least 2 pairs, got " +
                                    std::to_string(a.size()));
    PairedTTest result;
    result.n = a.size();
    std::vector<double> d(a.size());
    bool all_zero = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d[i] = b[i] - a[i];
        if (d[i] != 0.0) all_zero = false;
    }
    if (all_zero) return result;  // t = 0, p = 1: no evidence either way

    double n = double(d.size());
    double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    double sd = std::sqrt(ss / (n - 1.0));
    if (sd == 0.0) {
        // Identical nonzero differences: the statistic diverges.
        result.t_stat = mean > 0 ? std::numeric_limits<double>::infinity()
                                 : -std::numeric_limits<double>::infinity();
        result.p_value = mean > 0 ? kPValueFloor : 1.0;
        return result;
    }
    result.t_stat = mean / (sd / std::sqrt(n));
    result.p_value = std::max(student_t_upper_tail(result.t_stat, n - 1.0), kPValueFloor);
    return result;
}

BhCorrection bh_correct(const std::vector<double>& pvalues, double alpha) {
    if (alpha <= 0 || alpha >= 1) fail(Errc::BadConfig, "BH alpha must be in (0, 1)");
    for (double p : pvalues)
        if (!(p >= 0.0 && p <= 1.0))
            fail(Errc::BadPValue, "p-value outside [0, 1]: " + format_shortest(p));

    BhCorrection out;
    std::size_t m = pvalues.size();
    out.adjusted.resize(m);
    out.reject.resize(m, false);
    if (m == 0) return out;

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });
    // Step-up: running minimum of (m/j) p_(j) from the largest rank down.
    double running = 1.0;
    std::vector<double> adjusted_sorted(m);
    for (std::size_t j = m; j-- > 0;) {
        double candidate = pvalues[order[j]] * double(m) / double(j + 1);
        running = std::min(running, std::min(candidate, 1.0));
        adjusted_sorted[j] = running;
    }
    for (std::size_t j = 0; j < m; ++j) {
        out.adjusted[order[j]] = adjusted_sorted[j];
        out.reject[order[j]] = adjusted_sorted[j] <= alpha;
    }
    return out;
}

double regularized_incomplete_beta(double a, double b, double x) {
    if (a <= 0 || b <= 0) fail(Errc::BadConfig, "incomplete beta needs a > 0 and b > 0");
    if (x < 0 || x > 1) fail(Errc::BadConfig, "incomplete beta needs x in [0, 1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    // Use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) so the continued fraction
    // converges quickly.
    if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - regularized_incomplete_beta(b, a, 1.0 - x);

    double log_prefix = a * std::log(x) + b * std::log1p(-x) -
                        (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
    // Modified Lentz continued fraction.
    const double tiny = 1e-300;
    const double eps = 1e-16;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double f = d;
    for (int m = 1; m <= 500; ++m) {
        double dm = double(m);
        double num = dm * (b - dm) * x / ((a + 2 * dm - 1) * (a + 2 * dm));
        d = 1.0 + num * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        f *= d * c;
        num = -(a + dm) * (a + b + dm) * x / ((a + 2 * dm) * (a + 2 * dm + 1));
        d = 1.0 + num * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double delta = d * c;
        f *= delta;
        if (std::fabs(delta - 1.0) < eps) break;
    }
    return std::exp(log_prefix) * f / a;
}

double student_t_upper_tail(double t, double df) {
    if (df <= 0) fail(Errc::BadConfig, "degrees of freedom must be > 0");
    if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
    double x = df / (df + t * t);
    double half_tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x);
    return t >= 0 ? half_tail : 1.0 - half_tail;
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["map_by_setting"] = report.map_by_setting;
    j["skipped_queries"] = report.skipped_queries;

    nlohmann::json recall = nlohmann::json::object();
    for (const auto& [setting, by_k] : report.recall_at_k_by_setting) {
        nlohmann::json inner = nlohmann::json::object();
        for (const auto& [k, v] : by_k) inner[std::to_string(k)] = v;
        recall[setting] = std::move(inner);
    }
    j["recall_at_k_by_setting"] = std::move(recall);

    nlohmann::json per_query = nlohmann::json::array();
    for (const auto& q : report.per_query) {
        nlohmann::json entry;
        entry["query_id"] = q.query_id;
        entry["ap_by_setting"] = q.ap_by_setting;
        per_query.push_back(std::move(entry));
    }
    j["per_query"] = std::move(per_query);

    nlohmann::json sig = nlohmann::json::array();
    for (const auto& s : report.significance) {
        nlohmann::json entry;
        entry["baseline"] = s.baseline;
        entry["improved"] = s.improved;
        entry["t_stat"] = s.t_stat;
        entry["p_raw"] = s.p_raw;
        entry["p_adjusted"] = s.p_adjusted;
        entry["reject"] = s.reject;
        entry["n"] = s.n;
        sig.push_back(std::move(entry));
    }
    j["significance"] = std::move(sig);

    nlohmann::json fq;
    fq["computed"] = report.feedback_quality.computed;
    if (!report.feedback_quality.note.empty()) fq["note"] = report.feedback_quality.note;
    if (report.feedback_quality.computed) {
        fq["pearson_r"] = report.feedback_quality.pearson_r;
        fq["p_value"] = report.feedback_quality.p_value;
    }
    nlohmann::json fq_rows = nlohmann::json::array();
    for (const auto& row : report.feedback_quality.per_query) {
        nlohmann::json entry;
        entry["query_id"] = row.query_id;
        entry["auc"] = row.auc;
        entry["ap_gain_pct"] = row.ap_gain_pct;
        fq_rows.push_back(std::move(entry));
    }
    fq["per_query"] = std::move(fq_rows);
    j["feedback_quality"] = std::move(fq);

    return j.dump(2) + "\n";
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
    write_text_file(path, report_to_json(report));
}

std::string per_query_csv(const EvalReport& report) {
    std::string out = "query_id,setting,ap\n";
    for (const auto& q : report.per_query) {
        for (const auto& [setting, ap] : q.ap_by_setting) {
            out += q.query_id;
            out += ',';
            out += setting;
            out += ',';
            out += format_shortest(ap);
            out += '\n';
        }
    }
    return out;
}

void write_per_query_csv(const std::filesystem::path& path, const EvalReport& report) {
    write_text_file(path, per_query_csv(report));
}

void write_pr_curve_csv(const std::filesystem::path& path,
                        const std::vector<std::pair<double, double>>& points) {
    std::string out = "recall,precision\n";
    for (const auto& [recall, precision] : points) {
        out += format_shortest(recall);
        out += ',';
        out += format_shortest(precision);
        out += '\n';
    }
    write_text_file(path, out);
}

void write_recall_sweep_csv(const std::filesystem::path& path, const EvalReport& report) {
    std::string out = "k,setting,recall\n";
    // Flatten as k-major so each k lists every setting together.
    std::set<std::size_t> ks;
    for (const auto& [setting, by_k] : report.recall_at_k_by_setting)
        for (const auto& [k, v] : by_k) ks.insert(k);
    for (std::size_t k : ks) {
        for (const auto& [setting, by_k] : report.recall_at_k_by_setting) {
            auto it = by_k.find(k);
            if (it == by_k.end()) continue;
            out += std::to_string(k);
            out += ',';
            out += setting;
            out += ',';
            out += format_shortest(it->second);
            out += '\n';
        }
    }
    write_text_file(path, out);
}

}  // namespace refrank
