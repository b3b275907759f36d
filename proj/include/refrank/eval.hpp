#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "refrank/ranking.hpp"

namespace refrank {

// --- ranking metrics ---

double average_precision(const Ranking& ranking, const std::set<std::string>& positives);

struct RankedQuery {
    const Ranking* ranking;
    const std::set<std::string>* positives;
};

double mean_average_precision(const std::vector<RankedQuery>& results);

double recall_at_k(const Ranking& ranking, const std::set<std::string>& positives, std::size_t k);

// One (recall, precision) point per rank position.
std::vector<std::pair<double, double>> pr_curve(const Ranking& ranking,
                                                const std::set<std::string>& positives);

// Mann-Whitney form: probability a random positive outranks a random
// negative, ties counted 1/2.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// --- statistics ---

double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct PairedTTest {
    double t_stat = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;
};

// One-sided paired test of mean(b - a) > 0. All-zero differences give p = 1;
// zero variance with positive mean gives the documented floor of 1e-300.
PairedTTest paired_t_test_one_sided(const std::vector<double>& a, const std::vector<double>& b);

struct BhCorrection {
    std::vector<double> adjusted;
    std::vector<bool> reject;
};

// Benjamini-Hochberg step-up; output order matches input order.
BhCorrection bh_correct(const std::vector<double>& pvalues, double alpha);

// Continued-fraction evaluation (Lentz), accurate to ~1e-15.
double regularized_incomplete_beta(double a, double b, double x);

// P(T >= t) for Student's t with df degrees of freedom.
double student_t_upper_tail(double t, double df);

// --- report assembly ---

struct QueryResult {
    std::string query_id;
    std::map<std::string, Ranking> ranking_by_setting;
    std::map<std::string, double> ap_by_setting;
};

struct SignificanceEntry {
    std::string baseline;  // setting a
    std::string improved;  // setting b; alternative: mean AP(b) - AP(a) > 0
    double t_stat = 0.0;
    double p_raw = 1.0;
    double p_adjusted = 1.0;
    bool reject = false;
    std::size_t n = 0;
};

struct FeedbackQualityEntry {
    std::string query_id;
    double auc = 0.0;
    double ap_gain_pct = 0.0;
};

struct FeedbackQuality {
    bool computed = false;
    std::string note;  // reason when not computed
    std::vector<FeedbackQualityEntry> per_query;
    double pearson_r = 0.0;
    double p_value = 1.0;
};

struct EvalReport {
    std::vector<QueryResult> per_query;
    std::map<std::string, double> map_by_setting;
    // setting -> k -> mean recall across queries
    std::map<std::string, std::map<std::size_t, double>> recall_at_k_by_setting;
    std::vector<SignificanceEntry> significance;
    FeedbackQuality feedback_quality;
    std::size_t skipped_queries = 0;  // queries without positive judgments
};

std::string report_to_json(const EvalReport& report);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);

// CSV `query_id,setting,ap`, rows ordered by query id then setting.
std::string per_query_csv(const EvalReport& report);
void write_per_query_csv(const std::filesystem::path& path, const EvalReport& report);

// CSV `recall,precision` in rank order.
void write_pr_curve_csv(const std::filesystem::path& path,
                        const std::vector<std::pair<double, double>>& points);

// CSV `k,setting,recall`.
void write_recall_sweep_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace refrank
