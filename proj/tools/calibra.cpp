// calibra: command-line front end for runs, metric recomputation, sweeps and
// the knowledge-augmentation experiment.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calibra/calibra.hpp"

namespace {

using namespace calibra;

struct RunFlags {
    std::string config_path;
    std::vector<std::string> datasets;
    std::vector<std::string> strategies;
    std::vector<std::string> extractions;
    std::string backend_url;
    std::string model;
    std::string mock_script;
    std::optional<int> buckets;
    std::optional<std::uint64_t> seed;
    std::string cache;
    std::string out;
    bool no_clamp = false;
    std::string concern_lexicon;
    std::optional<int> workers;
    std::optional<double> rps;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("--config", f.config_path, "Run config JSON")->check(CLI::ExistingFile);
    cmd->add_option("--dataset", f.datasets, "Dataset JSONL (repeatable, replaces config list)");
    cmd->add_option("--strategy", f.strategies, "Strategy id (repeatable)");
    cmd->add_option("--extract", f.extractions, "Extraction method (repeatable)");
    cmd->add_option("--backend-url", f.backend_url, "OpenAI-compatible base URL");
    cmd->add_option("--model", f.model, "Model id for the HTTP backend");
    cmd->add_option("--mock-script", f.mock_script, "Mock backend script JSON");
    cmd->add_option("--buckets", f.buckets, "Number of ECE buckets");
    cmd->add_option("--seed", f.seed, "Run seed");
    cmd->add_option("--cache", f.cache, "Response cache JSONL");
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_flag("--no-clamp", f.no_clamp, "Keep out-of-range confidences");
    cmd->add_option("--concern-lexicon", f.concern_lexicon, "Concern pattern file");
    cmd->add_option("--workers", f.workers, "Worker count");
    cmd->add_option("--max-rps", f.rps, "HTTP request rate limit");
}

RunConfig build_config(const RunFlags& f) {
    RunConfig c = f.config_path.empty() ? RunConfig{} : load_run_config(f.config_path);
    if (!f.datasets.empty()) c.dataset_paths = f.datasets;
    if (!f.strategies.empty()) c.strategy_ids = f.strategies;
    if (!f.extractions.empty()) c.extraction_method_ids = f.extractions;
    if (!f.backend_url.empty() || !f.model.empty()) {
        if (!f.mock_script.empty()) throw ConfigError("--mock-script conflicts with --backend-url/--model");
        c.backend.kind = "http";
        if (!f.backend_url.empty()) c.backend.base_url = f.backend_url;
        if (!f.model.empty()) c.backend.model = f.model;
    } else if (!f.mock_script.empty()) {
        c.backend.kind = "mock";
        c.backend.script_path = f.mock_script;
    }
    if (f.rps) c.backend.max_requests_per_second = *f.rps;
    if (f.buckets) c.num_buckets = *f.buckets;
    if (f.seed) c.seed = *f.seed;
    if (!f.cache.empty()) c.cache_path = f.cache;
    if (!f.out.empty()) c.out_dir = f.out;
    if (f.no_clamp) c.clamp_confidences = false;
    if (!f.concern_lexicon.empty()) c.concern_lexicon_path = f.concern_lexicon;
    if (f.workers) c.worker_count = *f.workers;
    validate(c);
    return c;
}

void print_summaries(const MetricsBundle& b) {
    std::cout << metrics_csv(b);
}

std::vector<std::size_t> parse_values(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    for (std::string v; std::getline(ss, v, ',');) {
        if (v.empty()) continue;
        try {
            std::size_t used = 0;
            const auto n = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            out.push_back(n);
        } catch (const std::exception&) {
            throw ConfigError("sweep value '" + v + "' is not a non-negative integer");
        }
    }
    if (out.empty()) throw ConfigError("sweep needs at least one value");
    return out;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

int cmd_run(const RunFlags& f) {
    const auto config = build_config(f);
    const auto report = run_eval(config);
    emit_report(report, config.out_dir);
    print_summaries(report.metrics);
    std::fprintf(stderr, "wrote %s (%zu records, %zu backend calls)\n", config.out_dir.c_str(),
                 report.records.size(), report.backend_calls);
    return 0;
}

int cmd_metrics(const std::string& records_path, int buckets, const std::string& out) {
    const auto records = load_records(records_path);
    const auto bundle = compute_metrics(records, {}, {}, buckets);
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream(fs::path(out) / "metrics.csv", std::ios::binary) << metrics_csv(bundle);
        std::ofstream(fs::path(out) / "metrics.json", std::ios::binary)
            << to_json(bundle).dump(2) << '\n';
    }
    print_summaries(bundle);
    return 0;
}

int cmd_augment(const std::string& report_dir, const std::string& mode, std::uint64_t seed,
                std::string strategy, const std::string& cache, const std::string& out) {
    const auto body = read_json(fs::path(report_dir) / "report.json");
    RunConfig config = run_config_from_json(body.at("config"));
    config.cache_path = cache;
    std::vector<EvalRecord> records;
    for (const auto& r : body.at("records")) records.push_back(eval_record_from_json(r));
    if (strategy.empty()) strategy = config.strategy_ids.at(0);
    const auto result = augment_run(config, records, strategy, parse_selection_mode(mode), seed);
    const auto j = to_json(result);
    const fs::path target = out.empty() ? fs::path(report_dir) : fs::path(out);
    fs::create_directories(target);
    const auto file = target / ("augment_" + to_string(result.selection.mode) + ".json");
    std::ofstream(file, std::ios::binary) << j.dump(2) << '\n';
    if (result.selection.warning) std::fprintf(stderr, "warning: %s\n", result.selection.warning->c_str());
    std::printf("mode=%s selected=%zu before=%.6f after=%.6f absolute=%+.6f relative=%s\n",
                to_string(result.selection.mode).c_str(), result.selection.ids.size(),
                result.outcome.accuracy_before, result.outcome.accuracy_after,
                result.outcome.absolute_improvement,
                result.outcome.relative_improvement
                    ? std::to_string(*result.outcome.relative_improvement).c_str()
                    : "undefined");
    return 0;
}

int cmd_sweep(const RunFlags& f, const std::string& axis, const std::string& values) {
    const auto config = build_config(f);
    const auto points = sweep(config, parse_sweep_axis(axis), parse_values(values));
    std::cout << axis << ",strategy,extraction,ece,macro_ce,accuracy,backend_calls\n";
    for (const auto& p : points) {
        emit_report(p.report, p.report.config.out_dir);
        for (const auto& c : p.report.metrics.summaries) {
            std::cout << p.value << ',' << c.strategy << ',' << c.extraction << ','
                      << json(c.summary.ece).dump() << ',' << json(c.summary.macro_ce).dump() << ','
                      << json(c.summary.accuracy).dump() << ',' << p.report.backend_calls << '\n';
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Confidence-calibration harness for prompted question answering"};
    app.require_subcommand(1);

    RunFlags run_flags;
    auto* run = app.add_subcommand("run", "Run strategies over datasets and emit a report");
    add_run_flags(run, run_flags);

    std::string records_path;
    int metric_buckets = kDefaultNumBuckets;
    std::string metrics_out;
    auto* metrics = app.add_subcommand("metrics", "Recompute metrics from a records JSONL file");
    metrics->add_option("--records", records_path, "records.jsonl")->required();
    metrics->add_option("--buckets", metric_buckets, "Number of ECE buckets");
    metrics->add_option("--out", metrics_out, "Directory for metrics.csv/metrics.json");

    std::string report_dir;
    std::string mode = "concern";
    std::uint64_t augment_seed = 7;
    std::string augment_strategy;
    std::string augment_cache;
    std::string augment_out;
    auto* augment = app.add_subcommand("augment", "Re-run hard examples with external knowledge");
    augment->add_option("--report", report_dir, "Run output directory")->required();
    augment->add_option("--mode", mode, "concern | random");
    augment->add_option("--seed", augment_seed, "Seed for random selection");
    augment->add_option("--strategy", augment_strategy, "Strategy to augment");
    augment->add_option("--cache", augment_cache, "Response cache JSONL");
    augment->add_option("--out", augment_out, "Output directory (default: the report directory)");

    RunFlags sweep_flags;
    std::string axis;
    std::string values;
    auto* sweep_cmd = app.add_subcommand("sweep", "One run per value along an axis");
    add_run_flags(sweep_cmd, sweep_flags);
    sweep_cmd->add_option("--axis", axis, "thought_char_budget | demonstrations_count")->required();
    sweep_cmd->add_option("--values", values, "Comma-separated values")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ErrorKind::config);
    }

    try {
        if (*run) return cmd_run(run_flags);
        if (*metrics) return cmd_metrics(records_path, metric_buckets, metrics_out);
        if (*augment) {
            return cmd_augment(report_dir, mode, augment_seed, augment_strategy, augment_cache,
                               augment_out);
        }
        if (*sweep_cmd) return cmd_sweep(sweep_flags, axis, values);
    } catch (const Error& e) {
        std::fprintf(stderr, "calibra: %s\n", e.what());
        return e.exit_code();
    } catch (const json::exception& e) {
        std::fprintf(stderr, "calibra: %s\n", e.what());
        return static_cast<int>(ErrorKind::data);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "calibra: %s\n", e.what());
        return static_cast<int>(ErrorKind::data);
    }
    return 0;
}
