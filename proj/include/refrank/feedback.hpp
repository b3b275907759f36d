#pragma once

#include <string>
#include <vector>

namespace refrank {

enum class ScoreSource { Llm, Oracle };

struct FeedbackEntry {
    std::string doc_id;
    double score = 0.0;  // in [0, 1]
    ScoreSource source = ScoreSource::Oracle;
    int retries = 0;
    bool used_text_fallback = false;
    bool used_default_score = false;
};

// Teacher scores for the feedback documents of one query, in request order.
struct FeedbackSet {
    std::string query_id;
    std::vector<FeedbackEntry> entries;
    std::vector<std::string> failed;

    std::vector<double> scores() const {
        std::vector<double> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.score);
        return out;
    }
};

}  // namespace refrank
