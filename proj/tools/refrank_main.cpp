// Command-line front end: index, rank, refine, eval, sweep-k, trace, cache.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "refrank/analysis.hpp"
#include "refrank/error.hpp"
#include "refrank/pipeline.hpp"
#include "refrank/ranking.hpp"

namespace {

using namespace refrank;

std::unique_ptr<Teacher> build_teacher(const RunConfig& config, const LoadedData& data) {
    if (config.teacher_is_oracle)
        return std::make_unique<OracleTeacher>(data.qrels, config.oracle.flip_probability,
                                               config.oracle.noise_sigma, config.seed);
    std::shared_ptr<ResponseCache> cache;
    if (!config.llm.cache_dir.empty())
        cache = std::make_shared<ResponseCache>(config.llm.cache_dir);
    return std::make_unique<LlmTeacher>(config.llm,
                                        make_http_transport(config.llm.timeout_seconds),
                                        config.token_sets, std::move(cache));
}

const QueryInput& find_query(const LoadedData& data, const std::string& query_id) {
    for (const auto& q : data.queries)
        if (q.id == query_id) return q;
    fail(Errc::UnknownQuery, "query id '" + query_id + "' not present in the query file");
}

struct SingleQueryRun {
    Ranking original;
    FeedbackSet feedback;
    RefinementResult refined;
};

// One query through embed -> rank -> feedback -> refinement, keeping the
// intermediate snapshots for trace and projection exports.
SingleQueryRun refine_single(const RunConfig& config, const LoadedData& data,
                             const QueryInput& query, Teacher& teacher,
                             EmbeddingProvider& provider) {
    SingleQueryRun run;
    std::vector<double> z0 =
        provider.embed({render_query_template(config.instruction, query.text,
                                              config.query_template)})[0];
    run.original = rank(score_corpus(z0, data.index), data.index);
    std::size_t prefix = std::min(config.refinement.k, run.original.entries.size());
    std::vector<Document> docs;
    docs.reserve(prefix);
    for (std::size_t i = 0; i < prefix; ++i)
        docs.push_back(data.index.documents[data.index.row_of(run.original.entries[i].doc_id)]);
    run.feedback = teacher.score(query.id, query.text, config.instruction, docs);
    run.refined = refine_query(z0, run.feedback, data.index, config.refinement,
                               /*capture_snapshots=*/true);
    return run;
}

int cmd_index(const std::string& corpus_path, const std::string& embeddings_path,
              const std::string& write_path, std::size_t dim, std::uint64_t seed) {
    CorpusIndex index = load_corpus(corpus_path);
    std::cout << "corpus: " << index.count() << " documents\n";
    if (!embeddings_path.empty()) {
        attach_embeddings(index, load_embeddings(embeddings_path, index.count()));
        std::cout << "embeddings: " << index.embeddings.count() << " rows, dim "
                  << index.embeddings.dim() << ", every row finite with nonzero norm\n";
    }
    if (!write_path.empty()) {
        EmbeddingProviderConfig pc;
        pc.mode = EmbeddingProviderMode::Synthetic;
        pc.dim = dim;
        pc.seed = seed;
        EmbeddingProvider provider(pc);
        std::vector<std::string> texts;
        texts.reserve(index.count());
        for (const auto& doc : index.documents) texts.push_back(doc.text);
        EmbeddingMatrix matrix;
        for (const auto& v : provider.embed(texts)) matrix.append_row(v);
        write_embeddings(write_path, matrix);
        std::cout << "wrote " << matrix.count() << " x " << matrix.dim() << " embeddings to "
                  << write_path << "\n";
    }
    return 0;
}

int cmd_rank(const std::string& config_path, const std::string& query_id,
             const std::string& query_text, std::size_t k, const std::string& out_path) {
    RunConfig config = RunConfig::from_json_file(config_path);
    LoadedData data = load_inputs(config);
    std::string text = query_text;
    if (!query_id.empty()) text = find_query(data, query_id).text;
    EmbeddingProvider provider(config.provider);
    std::vector<double> z =
        provider.embed({render_query_template(config.instruction, text,
                                              config.query_template)})[0];
    Ranking top = Ranking::from_entries(
        top_k(rank(score_corpus(z, data.index), data.index), k));
    if (out_path.empty())
        std::cout << ranking_to_tsv(top);
    else
        write_ranking_tsv(out_path, top);
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& out_override,
             std::size_t threads_override) {
    RunConfig config = RunConfig::from_json_file(config_path);
    if (!out_override.empty()) config.output_dir = out_override;
    if (threads_override > 0) config.threads = threads_override;
    PipelineResult result = run_pipeline(config);

    for (const auto& [setting, map] : result.report.map_by_setting)
        std::printf("MAP %-16s %.6f\n", setting.c_str(), map);
    for (const auto& s : result.report.significance)
        std::printf("significance %s -> %s: t=%.4f p=%.3g adjusted=%.3g %s\n", s.baseline.c_str(),
                    s.improved.c_str(), s.t_stat, s.p_raw, s.p_adjusted,
                    s.reject ? "(reject)" : "");
    if (result.report.skipped_queries > 0)
        std::printf("skipped %zu queries without positive judgments\n",
                    result.report.skipped_queries);
    if (!config.output_dir.empty())
        std::cout << "outputs written to " << config.output_dir.string() << "\n";
    return 0;
}

int cmd_refine(const std::string& config_path, const std::string& query_id,
               const std::string& out_dir) {
    RunConfig config = RunConfig::from_json_file(config_path);
    LoadedData data = load_inputs(config);
    const QueryInput& query = find_query(data, query_id);
    auto teacher = build_teacher(config, data);
    EmbeddingProvider provider(config.provider);
    SingleQueryRun run = refine_single(config, data, query, *teacher, provider);

    std::filesystem::path out(out_dir);
    std::filesystem::create_directories(out);
    write_trace_jsonl(out / "trace.jsonl", run.refined.trace);
    write_snapshots(out / "snapshots.bin", run.refined.trace);
    write_loss_csv(out / "loss.csv", run.refined.trace);
    write_ranking_tsv(out / "ranking_original.tsv", run.original);
    write_ranking_tsv(out / "ranking_optimized.tsv",
                      rank(score_corpus(run.refined.z, data.index), data.index));

    if (run.refined.skipped) {
        std::cout << "refinement skipped: " << run.refined.skip_reason << "\n";
    } else {
        const auto& losses = run.refined.trace.loss_per_step;
        std::printf("refined %s: %zu steps, loss %.6g -> %.6g\n", query.id.c_str(),
                    losses.size() - 1, losses.front(), losses.back());
    }
    std::cout << "outputs written to " << out.string() << "\n";
    return 0;
}

int cmd_trace(const std::string& config_path, const std::string& query_id,
              const std::string& out_dir) {
    RunConfig config = RunConfig::from_json_file(config_path);
    LoadedData data = load_inputs(config);
    const QueryInput& query = find_query(data, query_id);
    auto teacher = build_teacher(config, data);
    EmbeddingProvider provider(config.provider);
    SingleQueryRun run = refine_single(config, data, query, *teacher, provider);

    Projection2D projection =
        project_run(data.index, run.refined.trace, run.feedback, data.qrels, query.id);
    std::filesystem::path out(out_dir);
    std::filesystem::create_directories(out);
    write_projection_csv(out / "projection.csv", projection);
    write_loss_csv(out / "loss.csv", run.refined.trace);

    std::printf("projected %zu corpus points and %zu trajectory points\n",
                projection.corpus_points.size(), projection.trajectory_points.size());
    std::printf("explained variance: %.6g, %.6g\n", projection.basis.explained_variance[0],
                projection.basis.explained_variance[1]);
    std::cout << "outputs written to " << out.string() << "\n";
    return 0;
}

int cmd_sweep_k(const std::string& config_path, const std::vector<std::size_t>& ks,
                const std::string& out_dir) {
    RunConfig config = RunConfig::from_json_file(config_path);
    config.output_dir.clear();  // per-k runs write nothing; only the sweep table lands on disk
    LoadedData data = load_inputs(config);
    auto teacher = build_teacher(config, data);
    EmbeddingProvider provider(config.provider);
    std::vector<KSweepRow> rows = k_sweep(config, data, *teacher, provider, ks);

    std::filesystem::path out(out_dir);
    std::filesystem::create_directories(out);
    write_k_sweep_csv(out / "k_sweep.csv", rows);
    for (const auto& row : rows)
        std::printf("k=%-4zu %-16s MAP %.6f\n", row.k, row.setting.c_str(), row.map);
    std::cout << "outputs written to " << out.string() << "\n";
    return 0;
}

int cmd_cache(const std::string& dir, bool clear) {
    ResponseCache cache{std::filesystem::path(dir)};
    if (clear)
        std::cout << "removed " << cache.clear() << " cached responses\n";
    else
        std::cout << cache.count() << " cached responses in " << cache.dir().string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"refrank: dense retrieval with test-time query refinement"};
    app.set_version_flag("--version", std::string(kArtifactVersion));
    app.require_subcommand(1);

    // index
    auto* index = app.add_subcommand("index", "Build or validate corpus files");
    std::string idx_corpus, idx_embeddings, idx_write;
    std::size_t idx_dim = 64;
    std::uint64_t idx_seed = 0;
    index->add_option("--corpus", idx_corpus, "Corpus JSONL path")->required();
    index->add_option("--embeddings", idx_embeddings, "Embedding file to validate");
    index->add_option("--write-embeddings", idx_write,
                      "Write synthetic embeddings for the corpus to this path");
    index->add_option("--dim", idx_dim, "Synthetic embedding dimension");
    index->add_option("--seed", idx_seed, "Synthetic embedding seed");

    // rank
    auto* rank_cmd = app.add_subcommand("rank", "Rank the corpus for a single query");
    std::string rank_config, rank_qid, rank_text, rank_out;
    std::size_t rank_k = 10;
    rank_cmd->add_option("--config", rank_config, "Run config JSON")->required();
    rank_cmd->add_option("--query-id", rank_qid, "Query id from the configured query file");
    rank_cmd->add_option("--query-text", rank_text, "Literal query text");
    rank_cmd->add_option("--k", rank_k, "Number of results to print");
    rank_cmd->add_option("--out", rank_out, "Write TSV here instead of stdout");

    // refine
    auto* refine_cmd = app.add_subcommand("refine", "Refine one query and export its trace");
    std::string ref_config, ref_qid, ref_out;
    refine_cmd->add_option("--config", ref_config, "Run config JSON")->required();
    refine_cmd->add_option("--query-id", ref_qid, "Query id to refine")->required();
    refine_cmd->add_option("--out", ref_out, "Output directory")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Run the full evaluation pipeline");
    std::string eval_config, eval_out;
    std::size_t eval_threads = 0;
    eval_cmd->add_option("--config", eval_config, "Run config JSON")->required();
    eval_cmd->add_option("--out", eval_out, "Override the config's output directory");
    eval_cmd->add_option("--threads", eval_threads, "Override the config's worker count");

    // sweep-k
    auto* sweep_cmd = app.add_subcommand("sweep-k", "MAP as a function of the feedback size k");
    std::string sweep_config, sweep_out;
    std::vector<std::size_t> sweep_ks = {2, 5, 10, 20, 40};
    sweep_cmd->add_option("--config", sweep_config, "Run config JSON")->required();
    sweep_cmd->add_option("--ks", sweep_ks, "Ascending k values")->delimiter(',');
    sweep_cmd->add_option("--out", sweep_out, "Output directory")->required();

    // trace
    auto* trace_cmd =
        app.add_subcommand("trace", "Project one query's refinement trajectory to 2D");
    std::string trace_config, trace_qid, trace_out;
    trace_cmd->add_option("--config", trace_config, "Run config JSON")->required();
    trace_cmd->add_option("--query-id", trace_qid, "Query id to trace")->required();
    trace_cmd->add_option("--out", trace_out, "Output directory")->required();

    // cache
    auto* cache_cmd = app.add_subcommand("cache", "Inspect or clear the teacher response cache");
    std::string cache_dir;
    bool cache_clear = false;
    cache_cmd->add_option("--dir", cache_dir, "Cache directory")->required();
    cache_cmd->add_flag("--clear", cache_clear, "Delete all cached responses");

    try {
        app.parse(argc, argv);
        if (*index) return cmd_index(idx_corpus, idx_embeddings, idx_write, idx_dim, idx_seed);
        if (*rank_cmd) {
            if (rank_qid.empty() == rank_text.empty())
                fail(Errc::BadConfig, "rank needs exactly one of --query-id or --query-text");
            return cmd_rank(rank_config, rank_qid, rank_text, rank_k, rank_out);
        }
        if (*refine_cmd) return cmd_refine(ref_config, ref_qid, ref_out);
        if (*eval_cmd) return cmd_eval(eval_config, eval_out, eval_threads);
        if (*sweep_cmd) return cmd_sweep_k(sweep_config, sweep_ks, sweep_out);
        if (*trace_cmd) return cmd_trace(trace_config, trace_qid, trace_out);
        if (*cache_cmd) return cmd_cache(cache_dir, cache_clear);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const Error& e) {
        // what() already leads with the code name; avoid printing it twice.
        std::string message = e.what();
        std::string prefix = std::string(errc_name(e.code())) + ": ";
        if (message.rfind(prefix, 0) == 0) message = message.substr(prefix.size());
        std::cerr << "error [" << errc_name(e.code()) << "]: " << message << "\n";
        return static_cast<int>(e.cls());
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return static_cast<int>(ErrorClass::Internal);
    }
    return 0;
}
