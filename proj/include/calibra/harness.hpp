#pragma once

// Run orchestration: dataset ingestion, the item x strategy worker pool,
// metric aggregation, report serialization and emission, sweeps, and the
// knowledge-augmentation experiment.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "calibra/backend.hpp"
#include "calibra/concern.hpp"
#include "calibra/confidence.hpp"
#include "calibra/errors.hpp"
#include "calibra/metrics.hpp"
#include "calibra/qa.hpp"
#include "calibra/strategies.hpp"

namespace calibra {

namespace fs = std::filesystem;

inline constexpr int kDefaultKdeGridSize = 512;

struct BackendConfig {
    std::string kind = "mock";  // mock | http
    std::string base_url;
    std::string model;
    std::string script_path;
    double max_requests_per_second = 0.0;
};

struct RunConfig {
    std::vector<std::string> dataset_paths;
    std::vector<std::string> strategy_ids;
    std::vector<std::string> extraction_method_ids = {"token_prob"};
    BackendConfig backend;
    int num_buckets = kDefaultNumBuckets;
    int max_tokens = kDefaultMaxTokens;
    double temperature = kDefaultTemperature;
    int self_consistency_n = 10;
    double self_consistency_temperature = 0.7;
    int self_ask_max_followups = 3;
    bool clamp_confidences = true;
    std::uint64_t seed = 7;
    std::vector<Demonstration> demonstrations;
    std::optional<std::size_t> thought_char_budget;
    std::map<std::string, std::string> templates;
    bool p_true_normalized = false;
    PTrueContext p_true_context = PTrueContext::full_transcript;
    bool verbalized_percent = false;
    std::string concern_lexicon_path;
    int kde_grid_size = kDefaultKdeGridSize;
    // Execution-only settings; never part of the report body.
    std::string cache_path;
    std::string out_dir = "out";
    int worker_count = 4;
};

// ---------------------------------------------------------------------------
// Config JSON

namespace detail {

inline std::string resolve_path(const std::string& p, const fs::path& base) {
    if (p.empty()) return p;
    const fs::path path(p);
    return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

}  // namespace detail

/// Reads a run config object. Relative paths resolve against `base_dir`.
inline RunConfig run_config_from_json(const json& j, const fs::path& base_dir = {}) {
    RunConfig c;
    try {
        if (j.contains("datasets")) {
            for (const auto& d : j.at("datasets")) c.dataset_paths.push_back(d.get<std::string>());
        }
        if (j.contains("dataset_path")) c.dataset_paths.push_back(j.at("dataset_path").get<std::string>());
        for (auto& p : c.dataset_paths) p = detail::resolve_path(p, base_dir);
        if (j.contains("strategies")) c.strategy_ids = j.at("strategies").get<std::vector<std::string>>();
        if (j.contains("extractions")) {
            c.extraction_method_ids = j.at("extractions").get<std::vector<std::string>>();
        }
        if (j.contains("backend")) {
            const auto& b = j.at("backend");
            c.backend.kind = b.value("kind", std::string("mock"));
            c.backend.base_url = b.value("base_url", std::string());
            c.backend.model = b.value("model", std::string());
            c.backend.script_path = detail::resolve_path(b.value("script_path", std::string()), base_dir);
            c.backend.max_requests_per_second = b.value("max_requests_per_second", 0.0);
        }
        c.num_buckets = j.value("num_buckets", c.num_buckets);
        c.max_tokens = j.value("max_tokens", c.max_tokens);
        c.temperature = j.value("temperature", c.temperature);
        c.self_consistency_n = j.value("self_consistency_n", c.self_consistency_n);
        c.self_consistency_temperature =
            j.value("self_consistency_temperature", c.self_consistency_temperature);
        c.self_ask_max_followups = j.value("self_ask_max_followups", c.self_ask_max_followups);
        c.clamp_confidences = j.value("clamp_confidences", c.clamp_confidences);
        c.seed = j.value("seed", c.seed);
        if (j.contains("demonstrations")) {
            for (const auto& d : j.at("demonstrations")) {
                c.demonstrations.push_back(
                    {d.at("question").get<std::string>(), d.at("answer").get<std::string>()});
            }
        }
        if (j.contains("thought_char_budget") && !j.at("thought_char_budget").is_null()) {
            c.thought_char_budget = j.at("thought_char_budget").get<std::size_t>();
        }
        if (j.contains("templates")) {
            c.templates = j.at("templates").get<std::map<std::string, std::string>>();
        }
        c.p_true_normalized = j.value("p_true_normalized", c.p_true_normalized);
        if (j.contains("p_true_context")) {
            const auto ctx = j.at("p_true_context").get<std::string>();
            if (ctx == "full_transcript") {
                c.p_true_context = PTrueContext::full_transcript;
            } else if (ctx == "question_only") {
                c.p_true_context = PTrueContext::question_only;
            } else {
                throw ConfigError("p_true_context must be full_transcript or question_only");
            }
        }
        c.verbalized_percent = j.value("verbalized_percent", c.verbalized_percent);
        c.concern_lexicon_path =
            detail::resolve_path(j.value("concern_lexicon", std::string()), base_dir);
        c.kde_grid_size = j.value("kde_grid_size", c.kde_grid_size);
        c.cache_path = detail::resolve_path(j.value("cache_path", std::string()), base_dir);
        if (j.contains("out_dir")) c.out_dir = detail::resolve_path(j.at("out_dir").get<std::string>(), base_dir);
        c.worker_count = j.value("worker_count", c.worker_count);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
    return run_config_from_json(j, path.parent_path());
}

/// Everything that influences results. Paths of execution-only outputs
/// (cache, out_dir) and the worker count are deliberately absent.
inline json config_snapshot(const RunConfig& c) {
    json j;
    j["datasets"] = c.dataset_paths;
    j["strategies"] = c.strategy_ids;
    j["extractions"] = c.extraction_method_ids;
    json b;
    b["kind"] = c.backend.kind;
    if (c.backend.kind == "http") {
        b["base_url"] = c.backend.base_url;
        b["model"] = c.backend.model;
    } else {
        b["script_path"] = c.backend.script_path;
    }
    j["backend"] = b;
    j["num_buckets"] = c.num_buckets;
    j["max_tokens"] = c.max_tokens;
    j["temperature"] = c.temperature;
    j["self_consistency_n"] = c.self_consistency_n;
    j["self_consistency_temperature"] = c.self_consistency_temperature;
    j["self_ask_max_followups"] = c.self_ask_max_followups;
    j["clamp_confidences"] = c.clamp_confidences;
    j["seed"] = c.seed;
    j["demonstrations"] = json::array();
    for (const auto& d : c.demonstrations) {
        j["demonstrations"].push_back({{"question", d.question}, {"answer", d.answer}});
    }
    j["thought_char_budget"] = c.thought_char_budget ? json(*c.thought_char_budget) : json(nullptr);
    j["templates"] = c.templates;
    j["p_true_normalized"] = c.p_true_normalized;
    j["p_true_context"] =
        c.p_true_context == PTrueContext::full_transcript ? "full_transcript" : "question_only";
    j["verbalized_percent"] = c.verbalized_percent;
    j["concern_lexicon"] = c.concern_lexicon_path;
    j["kde_grid_size"] = c.kde_grid_size;
    return j;
}

inline void validate(const RunConfig& c) {
    if (c.dataset_paths.empty()) throw ConfigError("no dataset given");
    if (c.strategy_ids.empty()) throw ConfigError("no strategy given");
    if (c.extraction_method_ids.empty()) throw ConfigError("no extraction method given");
    for (const auto& s : c.strategy_ids) {
        if (!is_known_strategy(s)) throw ConfigError("unknown strategy '" + s + "'");
    }
    for (const auto& m : c.extraction_method_ids) parse_extraction_method(m);
    if (c.num_buckets < 1) throw ConfigError("num_buckets must be >= 1");
    if (c.max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
    if (c.temperature < 0.0 || c.self_consistency_temperature < 0.0) {
        throw ConfigError("temperature must be >= 0");
    }
    if (c.self_consistency_n < 1) throw ConfigError("self_consistency_n must be >= 1");
    if (c.self_ask_max_followups < 0) throw ConfigError("self_ask_max_followups must be >= 0");
    if (c.worker_count < 1) throw ConfigError("worker_count must be >= 1");
    if (c.kde_grid_size < 2) throw ConfigError("kde_grid_size must be >= 2");
    if (c.backend.kind == "mock") {
        if (c.backend.script_path.empty()) throw ConfigError("mock backend needs a script path");
    } else if (c.backend.kind == "http") {
        if (c.backend.base_url.empty() || c.backend.model.empty()) {
            throw ConfigError("http backend needs base_url and model");
        }
    } else {
        throw ConfigError("unknown backend kind '" + c.backend.kind + "'");
    }
    PromptTemplates probe;
    for (const auto& [name, value] : c.templates) probe.override(name, value);
}

inline StrategyConfig strategy_config(const RunConfig& c) {
    StrategyConfig s;
    for (const auto& [name, value] : c.templates) s.templates.override(name, value);
    s.demonstrations = c.demonstrations;
    s.thought_char_budget = c.thought_char_budget;
    s.max_tokens = c.max_tokens;
    s.temperature = c.temperature;
    s.self_consistency_n = c.self_consistency_n;
    s.self_consistency_temperature = c.self_consistency_temperature;
    s.self_ask_max_followups = c.self_ask_max_followups;
    return s;
}

inline ExtractionOptions extraction_options(const RunConfig& c) {
    ExtractionOptions o;
    o.clamp = c.clamp_confidences;
    o.p_true_normalized = c.p_true_normalized;
    o.p_true_context = c.p_true_context;
    o.verbalized_percent = c.verbalized_percent;
    o.temperature = c.temperature;
    return o;
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
    std::string name;
    std::string path;
    std::vector<QAItem> items;
};

inline QAItem qa_item_from_json(const json& j) {
    QAItem item;
    const auto& id = j.at("id");
    item.id = id.is_string() ? id.get<std::string>() : id.dump();
    item.question = j.at("question").get<std::string>();
    item.gold_answers = j.at("answers").get<std::vector<std::string>>();
    item.answer_kind = parse_answer_kind(j.value("answer_kind", std::string("free_form")));
    if (j.contains("gold_facts") && !j.at("gold_facts").is_null()) {
        item.gold_facts = j.at("gold_facts").get<std::vector<std::string>>();
    }
    if (j.contains("external_knowledge") && !j.at("external_knowledge").is_null()) {
        item.external_knowledge = j.at("external_knowledge").get<std::string>();
    }
    return item;
}

inline json to_json(const QAItem& item) {
    json j;
    j["id"] = item.id;
    j["question"] = item.question;
    j["answers"] = item.gold_answers;
    j["answer_kind"] = to_string(item.answer_kind);
    if (item.gold_facts) j["gold_facts"] = *item.gold_facts;
    if (item.external_knowledge) j["external_knowledge"] = *item.external_knowledge;
    if (item.original_question) j["original_question"] = *item.original_question;
    return j;
}

/// One JSON object per line: {id, question, answers, answer_kind, gold_facts?,
/// external_knowledge?}. Blank lines are skipped.
inline std::vector<QAItem> load_dataset(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
    std::vector<QAItem> items;
    std::map<std::string, std::size_t> seen;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
        QAItem item;
        try {
            item = qa_item_from_json(json::parse(line));
            validate(item);
        } catch (const json::exception& e) {
            throw DataError(where + e.what());
        } catch (const DataError& e) {
            throw DataError(where + e.what());
        }
        const auto [it, inserted] = seen.emplace(item.id, line_no);
        if (!inserted) {
            throw DataError(path.string() + ": duplicate id '" + item.id + "' on lines " +
                            std::to_string(it->second) + " and " + std::to_string(line_no));
        }
        items.push_back(std::move(item));
    }
    return items;
}

// ---------------------------------------------------------------------------
// Records and transcripts JSON

inline json to_json(const EvalRecord& r) {
    json j;
    j["dataset"] = r.dataset;
    j["item_id"] = r.item_id;
    j["strategy"] = r.strategy_id;
    j["correct"] = r.correct;
    j["concern"] = r.concern;
    j["confidences"] = r.confidences;
    return j;
}

inline EvalRecord eval_record_from_json(const json& j) {
    EvalRecord r;
    r.dataset = j.value("dataset", std::string());
    r.item_id = j.at("item_id").get<std::string>();
    r.strategy_id = j.at("strategy").get<std::string>();
    r.correct = j.at("correct").get<bool>();
    r.concern = j.value("concern", false);
    for (const auto& [k, v] : j.at("confidences").items()) {
        r.confidences[k] = v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    }
    if (r.confidences.empty()) {
        throw DataError("record '" + r.item_id + "' has no confidence entries");
    }
    return r;
}

inline std::vector<EvalRecord> load_records(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open records '" + path.string() + "'");
    std::vector<EvalRecord> records;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            records.push_back(eval_record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (records.empty()) throw DataError("records file '" + path.string() + "' is empty");
    return records;
}

inline json to_json(const ExtractedAnswer& a) {
    json j;
    j["raw_text"] = a.raw_text;
    j["normalized"] = a.normalized;
    j["boolean_value"] = a.boolean_value ? json(to_string(*a.boolean_value)) : json(nullptr);
    return j;
}

inline json to_json(const StepRecord& s) {
    json j;
    j["step"] = s.step;
    j["prompt"] = s.prompt;
    j["request"] = to_json(s.request);
    j["completion"] = to_json(s.completion);
    j["fixed"] = s.fixed;
    return j;
}

inline json to_json(const Transcript& t) {
    json j;
    j["item_id"] = t.item_id;
    j["strategy"] = t.strategy_id;
    j["steps"] = json::array();
    for (const auto& s : t.steps) j["steps"].push_back(to_json(s));
    j["final_answer"] = to_json(t.final_answer);
    if (t.vote) {
        json v;
        v["winner"] = t.vote->winner;
        v["winner_index"] = t.vote->winner_index;
        v["counts"] = json::array();
        for (const auto& [k, n] : t.vote->counts) v["counts"].push_back({{"answer", k}, {"count", n}});
        j["vote"] = v;
    }
    j["extraction_steps"] = json::array();
    for (const auto& s : t.extraction_steps) j["extraction_steps"].push_back(to_json(s));
    return j;
}

inline json to_json(const ConfidenceResult& c) {
    json j;
    j["method"] = to_string(c.method);
    j["value"] = c.value;
    j["raw_value"] = c.raw_value;
    j["clamped"] = c.clamped;
    if (!c.aux.empty()) j["aux"] = c.aux;
    return j;
}

// ---------------------------------------------------------------------------
// Metrics over a record set

struct CellSummary {
    std::string strategy;
    std::string extraction;
    CalibrationSummary summary;
    ConfidenceGap gap;
    double concern_rate = 0.0;
};

struct CurveCell {
    std::string strategy;
    std::string extraction;
    DistributionCurve curve;
};

struct MetricsBundle {
    std::vector<std::string> datasets;
    std::vector<std::string> strategies;
    std::vector<std::string> extractions;
    // Headline per (strategy, extraction): the single dataset, or the
    // unweighted mean over datasets when there are several.
    std::vector<CellSummary> summaries;
    // dataset -> per-cell summaries (only when there are several datasets).
    std::map<std::string, std::vector<CellSummary>> per_dataset;
    std::map<std::string, double> accuracy;      // per strategy
    std::map<std::string, double> concern_rate;  // per strategy
    std::vector<CurveCell> curves;
    std::map<std::string, int> ece_wins;
    std::map<std::string, int> macro_ce_wins;
};

namespace detail {

inline CellSummary summarize_cell(std::span<const EvalRecord> records, const std::string& strategy,
                                  const std::string& method, int num_buckets) {
    CellSummary cell;
    cell.strategy = strategy;
    cell.extraction = method;
    const auto preds = predictions_for(records, method);
    cell.summary = summarize(preds, num_buckets);
    cell.gap = confidence_gap(std::span<const ScoredPrediction>(preds));
    cell.concern_rate = concern_rate(records);
    return cell;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline CellSummary macro_average(const std::vector<CellSummary>& cells) {
    CellSummary out;
    out.strategy = cells.front().strategy;
    out.extraction = cells.front().extraction;
    std::vector<double> ece, ice_pos, ice_neg, macro, conf, acc, concern;
    for (const auto& c : cells) {
        ece.push_back(c.summary.ece);
        ice_pos.push_back(c.summary.ice_pos);
        ice_neg.push_back(c.summary.ice_neg);
        macro.push_back(c.summary.macro_ce);
        conf.push_back(c.summary.avg_confidence);
        acc.push_back(c.summary.accuracy);
        concern.push_back(c.concern_rate);
        out.summary.n += c.summary.n;
        out.summary.n_pos += c.summary.n_pos;
        out.summary.n_neg += c.summary.n_neg;
        out.summary.out_of_range += c.summary.out_of_range;
        if (c.summary.degenerate_flag != DegenerateFlag::none) {
            out.summary.degenerate_flag = c.summary.degenerate_flag;
        }
    }
    out.summary.ece = mean_of(ece);
    out.summary.ice_pos = mean_of(ice_pos);
    out.summary.ice_neg = mean_of(ice_neg);
    out.summary.macro_ce = mean_of(macro);
    out.summary.avg_confidence = mean_of(conf);
    out.summary.accuracy = mean_of(acc);
    out.gap = {out.summary.avg_confidence, out.summary.accuracy,
               out.summary.avg_confidence - out.summary.accuracy};
    out.concern_rate = mean_of(concern);
    return out;
}

inline double nan_as_inf(double v) {
    return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
}

}  // namespace detail

/// Computes every reported metric from records alone. `strategies` and
/// `extractions` fix output order; empty means "as first seen".
inline MetricsBundle compute_metrics(const std::vector<EvalRecord>& records,
                                     std::vector<std::string> strategies,
                                     std::vector<std::string> extractions, int num_buckets,
                                     int kde_grid_size = kDefaultKdeGridSize) {
    if (records.empty()) throw DataError("no records to compute metrics over");
    MetricsBundle b;
    auto remember = [](std::vector<std::string>& order, const std::string& v) {
        if (std::find(order.begin(), order.end(), v) == order.end()) order.push_back(v);
    };
    for (const auto& r : records) {
        remember(b.datasets, r.dataset);
        if (strategies.empty()) remember(b.strategies, r.strategy_id);
        if (extractions.empty()) {
            for (const auto& [m, _] : r.confidences) remember(b.extractions, m);
        }
    }
    if (!strategies.empty()) b.strategies = std::move(strategies);
    if (!extractions.empty()) b.extractions = std::move(extractions);

    auto select = [&](const std::string* dataset, const std::string& strategy) {
        std::vector<EvalRecord> out;
        for (const auto& r : records) {
            if (r.strategy_id != strategy) continue;
            if (dataset != nullptr && r.dataset != *dataset) continue;
            out.push_back(r);
        }
        return out;
    };

    const bool multi = b.datasets.size() > 1;
    std::map<std::string, std::map<std::string, double>> ece_rows;
    std::map<std::string, std::map<std::string, double>> macro_rows;
    for (const auto& strategy : b.strategies) {
        const auto pooled = select(nullptr, strategy);
        if (pooled.empty()) throw DataError("no records for strategy '" + strategy + "'");
        std::vector<double> acc_by_dataset;
        std::vector<double> concern_by_dataset;
        std::map<std::string, std::vector<CellSummary>> cells_by_method;
        for (const auto& dataset : b.datasets) {
            const auto subset = multi ? select(&dataset, strategy) : pooled;
            if (subset.empty()) {
                throw DataError("no records for strategy '" + strategy + "' on dataset '" +
                                dataset + "'");
            }
            acc_by_dataset.push_back(accuracy(subset));
            concern_by_dataset.push_back(concern_rate(std::span<const EvalRecord>(subset)));
            for (const auto& method : b.extractions) {
                auto cell = detail::summarize_cell(subset, strategy, method, num_buckets);
                if (multi) b.per_dataset[dataset].push_back(cell);
                cells_by_method[method].push_back(std::move(cell));
            }
        }
        b.accuracy[strategy] = detail::mean_of(acc_by_dataset);
        b.concern_rate[strategy] = detail::mean_of(concern_by_dataset);
        for (const auto& method : b.extractions) {
            const auto& cells = cells_by_method[method];
            auto headline = multi ? detail::macro_average(cells) : cells.front();
            ece_rows[strategy][method] = detail::nan_as_inf(headline.summary.ece);
            macro_rows[strategy][method] = detail::nan_as_inf(headline.summary.macro_ce);
            b.summaries.push_back(std::move(headline));

            std::vector<double> confs;
            for (const auto& r : pooled) confs.push_back(r.confidences.at(method));
            b.curves.push_back({strategy, method,
                                distribution_curve(confs, CurveKind::histogram, num_buckets)});
            b.curves.push_back(
                {strategy, method, distribution_curve(confs, CurveKind::kde, kde_grid_size)});
        }
    }
    b.ece_wins = wins_table(ece_rows);
    b.macro_ce_wins = wins_table(macro_rows);
    return b;
}

inline json to_json(const Bucket& bk) {
    json j;
    j["index"] = bk.index;
    j["lower"] = bk.lower;
    j["upper"] = bk.upper;
    j["count"] = bk.member_ids.size();
    j["member_ids"] = bk.member_ids;
    j["avg_confidence"] = bk.avg_confidence;
    j["accuracy"] = bk.accuracy;
    return j;
}

inline json to_json(const CellSummary& c) {
    const auto& s = c.summary;
    json j;
    j["strategy"] = c.strategy;
    j["extraction"] = c.extraction;
    j["n"] = s.n;
    j["n_pos"] = s.n_pos;
    j["n_neg"] = s.n_neg;
    j["accuracy"] = s.accuracy;
    j["avg_confidence"] = s.avg_confidence;
    j["gap"] = c.gap.gap;
    j["ece"] = s.ece;
    j["ice_pos"] = s.ice_pos;
    j["ice_neg"] = s.ice_neg;
    j["macro_ce"] = s.macro_ce;
    j["degenerate"] = to_string(s.degenerate_flag);
    j["out_of_range"] = s.out_of_range;
    j["concern_rate"] = c.concern_rate;
    j["buckets"] = json::array();
    for (const auto& bk : s.buckets) j["buckets"].push_back(to_json(bk));
    return j;
}

inline json to_json(const CurveCell& c) {
    json j;
    j["strategy"] = c.strategy;
    j["extraction"] = c.extraction;
    j["kind"] = to_string(c.curve.kind);
    j["bandwidth"] = c.curve.bandwidth;
    j["fallback_bandwidth"] = c.curve.fallback_bandwidth;
    j["mass_outside_unit"] = c.curve.mass_outside_unit;
    j["samples"] = c.curve.samples;
    j["points"] = c.curve.points.size();
    return j;
}

inline json to_json(const MetricsBundle& b) {
    json j;
    j["datasets"] = b.datasets;
    j["summaries"] = json::array();
    for (const auto& c : b.summaries) j["summaries"].push_back(to_json(c));
    if (!b.per_dataset.empty()) {
        json pd;
        for (const auto& [name, cells] : b.per_dataset) {
            pd[name] = json::array();
            for (const auto& c : cells) pd[name].push_back(to_json(c));
        }
        j["per_dataset"] = pd;
    }
    j["accuracy"] = b.accuracy;
    j["concern_rate"] = b.concern_rate;
    j["curves"] = json::array();
    for (const auto& c : b.curves) j["curves"].push_back(to_json(c));
    j["wins"] = {{"ece", b.ece_wins}, {"macro_ce", b.macro_ce_wins}};
    return j;
}

// ---------------------------------------------------------------------------
// Running

struct TranscriptEntry {
    std::string dataset;
    Transcript transcript;
    std::vector<ConfidenceResult> confidences;
};

struct RunReport {
    RunConfig config;
    MetricsBundle metrics;
    std::vector<EvalRecord> records;
    std::vector<TranscriptEntry> transcripts;
    std::string started_at;
    std::string finished_at;
    std::size_t backend_calls = 0;
};

inline json transcript_line(const TranscriptEntry& e) {
    json j = to_json(e.transcript);
    j["dataset"] = e.dataset;
    j["confidences"] = json::array();
    for (const auto& c : e.confidences) j["confidences"].push_back(to_json(c));
    return j;
}

/// The report body. Deterministic given the config and backend behaviour.
inline json report_json(const RunReport& r) {
    json j;
    j["config"] = config_snapshot(r.config);
    j["metrics"] = to_json(r.metrics);
    j["records"] = json::array();
    for (const auto& rec : r.records) j["records"].push_back(to_json(rec));
    j["transcripts"] = "transcripts.jsonl";
    return j;
}

/// Shared pieces a run (or a sweep of runs) executes against.
struct RunContext {
    std::shared_ptr<const Backend> backend;
    std::shared_ptr<CountingBackend> counter;
    std::shared_ptr<ResponseCache> cache;
};

inline RunContext make_context(const RunConfig& c) {
    std::shared_ptr<const Backend> base;
    if (c.backend.kind == "mock") {
        base = mock_from_script_file(c.backend.script_path);
    } else if (c.backend.kind == "http") {
        HttpBackendOptions o;
        o.base_url = c.backend.base_url;
        o.model = c.backend.model;
        o.max_requests_per_second = c.backend.max_requests_per_second;
        base = http_backend(std::move(o));
    } else {
        throw ConfigError("unknown backend kind '" + c.backend.kind + "'");
    }
    RunContext ctx;
    ctx.counter = std::make_shared<CountingBackend>(std::move(base));
    ctx.backend = ctx.counter;
    if (!c.cache_path.empty()) {
        ctx.cache = std::make_shared<ResponseCache>(c.cache_path);
        ctx.backend = std::make_shared<CachingBackend>(ctx.counter, ctx.cache);
    }
    return ctx;
}

inline std::vector<Dataset> load_datasets(const RunConfig& c) {
    std::vector<Dataset> out;
    std::set<std::string> names;
    for (const auto& path : c.dataset_paths) {
        Dataset d;
        d.path = path;
        d.name = fs::path(path).stem().string();
        for (int k = 2; names.contains(d.name); ++k) {
            d.name = fs::path(path).stem().string() + "_" + std::to_string(k);
        }
        names.insert(d.name);
        d.items = load_dataset(path);
        if (d.items.empty()) throw DataError("dataset '" + path + "' is empty");
        out.push_back(std::move(d));
    }
    return out;
}

namespace detail {

inline void write_lines(const fs::path& path, const std::vector<json>& lines) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    for (const auto& l : lines) out << l.dump() << '\n';
}

}  // namespace detail

/// Plan -> execute -> score -> EvalRecord for every (dataset, strategy, item),
/// on a bounded worker pool; metrics are computed after all tasks finish.
/// With a non-empty out_dir, transcripts stream to transcripts.partial.jsonl as
/// they complete, and completed records are persisted before an abort.
inline RunReport run_eval(const RunConfig& config, const RunContext& ctx,
                          const std::vector<Dataset>& datasets) {
    validate(config);
    const auto lexicon = config.concern_lexicon_path.empty()
                             ? ConcernLexicon::shipped()
                             : ConcernLexicon::from_file(config.concern_lexicon_path);
    const auto scfg = strategy_config(config);
    ExecuteOptions exec;
    exec.extraction = extraction_options(config);
    std::vector<ExtractionMethod> methods;
    for (const auto& m : config.extraction_method_ids) methods.push_back(parse_extraction_method(m));

    struct Task {
        const Dataset* dataset;
        const QAItem* item;
        const std::string* strategy;
    };
    std::vector<Task> tasks;
    for (const auto& d : datasets) {
        for (const auto& s : config.strategy_ids) {
            for (const auto& item : d.items) tasks.push_back({&d, &item, &s});
        }
    }
    if (tasks.empty()) throw DataError("nothing to run: empty dataset");

    RunReport report;
    report.config = config;
    report.started_at = utc_timestamp();
    const auto calls_before = ctx.counter ? ctx.counter->calls() : 0;

    std::ofstream partial;
    std::mutex partial_mutex;
    if (!config.out_dir.empty()) {
        fs::create_directories(config.out_dir);
        partial.open(fs::path(config.out_dir) / "transcripts.partial.jsonl",
                     std::ios::binary | std::ios::app);
    }

    std::vector<std::optional<EvalRecord>> records(tasks.size());
    std::vector<std::optional<TranscriptEntry>> transcripts(tasks.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> abort{false};
    std::mutex error_mutex;
    std::optional<std::size_t> error_task;
    std::optional<Error> error;

    auto work = [&] {
        while (!abort.load()) {
            const auto i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            const auto& task = tasks[i];
            try {
                const auto p = plan(*task.strategy, *task.item, scfg);
                auto result = execute(p, *ctx.backend, methods, exec);
                EvalRecord rec;
                rec.item_id = task.item->id;
                rec.dataset = task.dataset->name;
                rec.strategy_id = *task.strategy;
                rec.correct = exact_match(result.transcript.final_answer, *task.item);
                for (const auto& c : result.confidences) rec.confidences[to_string(c.method)] = c.value;
                rec.concern = detect_concern(result.transcript.final_answer.raw_text, lexicon).concern;
                TranscriptEntry entry{task.dataset->name, std::move(result.transcript),
                                      std::move(result.confidences)};
                if (partial.is_open()) {
                    const auto line = transcript_line(entry).dump();
                    std::lock_guard lock(partial_mutex);
                    partial << line << '\n';
                    partial.flush();
                }
                records[i] = std::move(rec);
                transcripts[i] = std::move(entry);
            } catch (const Error& e) {
                std::lock_guard lock(error_mutex);
                if (!error_task || i < *error_task) {
                    error_task = i;
                    error.emplace(e.kind(), "item '" + task.item->id + "' (dataset '" +
                                                task.dataset->name + "'), strategy '" +
                                                *task.strategy + "': " + e.what());
                }
                abort.store(true);
            } catch (const std::exception& e) {
                std::lock_guard lock(error_mutex);
                if (!error_task || i < *error_task) {
                    error_task = i;
                    error.emplace(ErrorKind::data, "item '" + task.item->id + "', strategy '" +
                                                       *task.strategy + "': " + e.what());
                }
                abort.store(true);
            }
        }
    };

    {
        const auto n = static_cast<std::size_t>(std::max(1, config.worker_count));
        std::vector<std::jthread> pool;
        for (std::size_t w = 1; w < std::min(n, tasks.size()); ++w) pool.emplace_back(work);
        work();
    }

    if (error) {
        if (!config.out_dir.empty()) {
            std::vector<json> done;
            for (const auto& r : records) {
                if (r) done.push_back(to_json(*r));
            }
            detail::write_lines(fs::path(config.out_dir) / "records.partial.jsonl", done);
        }
        throw *error;
    }

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        report.records.push_back(std::move(*records[i]));
        report.transcripts.push_back(std::move(*transcripts[i]));
    }
    report.metrics = compute_metrics(report.records, config.strategy_ids,
                                     config.extraction_method_ids, config.num_buckets,
                                     config.kde_grid_size);
    report.backend_calls = (ctx.counter ? ctx.counter->calls() : 0) - calls_before;
    report.finished_at = utc_timestamp();
    return report;
}

inline RunReport run_eval(const RunConfig& config) {
    validate(config);
    const auto datasets = load_datasets(config);
    const auto ctx = make_context(config);
    return run_eval(config, ctx, datasets);
}

// ---------------------------------------------------------------------------
// Emission

enum class ReportFormat { json, csv };

namespace detail {

inline std::string csv_number(double v) {
    if (std::isnan(v)) return "";
    return json(v).dump();
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string file_safe(const std::string& s) {
    std::string out;
    for (char c : s) {
        out += (std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '-' || c == '_') ? c : '_';
    }
    return out;
}

}  // namespace detail

inline std::string metrics_csv(const MetricsBundle& b) {
    std::ostringstream out;
    out << "strategy,extraction,n,accuracy,avg_conf,gap,ece,ice_pos,ice_neg,macro_ce,concern_rate\n";
    for (const auto& c : b.summaries) {
        const auto& s = c.summary;
        out << detail::csv_field(c.strategy) << ',' << detail::csv_field(c.extraction) << ','
            << s.n << ',' << detail::csv_number(s.accuracy) << ','
            << detail::csv_number(s.avg_confidence) << ',' << detail::csv_number(c.gap.gap) << ','
            << detail::csv_number(s.ece) << ',' << detail::csv_number(s.ice_pos) << ','
            << detail::csv_number(s.ice_neg) << ',' << detail::csv_number(s.macro_ce) << ','
            << detail::csv_number(c.concern_rate) << '\n';
    }
    return out.str();
}

inline std::string curve_csv(const DistributionCurve& curve) {
    std::ostringstream out;
    out << "x,density\n";
    for (const auto& p : curve.points) {
        out << detail::csv_number(p.x) << ',' << detail::csv_number(p.density) << '\n';
    }
    return out.str();
}

/// json: report.json, records.jsonl, transcripts.jsonl, run_meta.json.
/// csv: metrics.csv and curves/<strategy>__<extraction>__<kind>.csv.
inline std::vector<fs::path> emit_report(const RunReport& report, const fs::path& out_dir,
                                         const std::vector<ReportFormat>& formats = {
                                             ReportFormat::json, ReportFormat::csv}) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) {
        throw ConfigError("output directory '" + out_dir.string() + "' is not writable");
    }
    std::vector<fs::path> written;
    auto write = [&](const fs::path& path, const std::string& body) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot write '" + path.string() + "'");
        out << body;
        if (!out) throw ConfigError("failed writing '" + path.string() + "'");
        written.push_back(path);
    };
    const bool want_json =
        std::find(formats.begin(), formats.end(), ReportFormat::json) != formats.end();
    const bool want_csv =
        std::find(formats.begin(), formats.end(), ReportFormat::csv) != formats.end();
    if (want_json) {
        write(out_dir / "report.json", report_json(report).dump(2) + "\n");
        std::string records;
        for (const auto& r : report.records) records += to_json(r).dump() + "\n";
        write(out_dir / "records.jsonl", records);
        std::string transcripts;
        for (const auto& t : report.transcripts) transcripts += transcript_line(t).dump() + "\n";
        write(out_dir / "transcripts.jsonl", transcripts);
        fs::remove(out_dir / "transcripts.partial.jsonl", ec);
        json meta;
        meta["started_at"] = report.started_at;
        meta["finished_at"] = report.finished_at;
        meta["worker_count"] = report.config.worker_count;
        meta["backend_calls"] = report.backend_calls;
        meta["cache_path"] = report.config.cache_path;
        write(out_dir / "run_meta.json", meta.dump(2) + "\n");
    }
    if (want_csv) {
        write(out_dir / "metrics.csv", metrics_csv(report.metrics));
        fs::create_directories(out_dir / "curves");
        for (const auto& c : report.metrics.curves) {
            const auto name = detail::file_safe(c.strategy) + "__" + detail::file_safe(c.extraction) +
                              "__" + to_string(c.curve.kind) + ".csv";
            write(out_dir / "curves" / name, curve_csv(c.curve));
        }
    }
    return written;
}

// ---------------------------------------------------------------------------
// Self-audit

/// Recomputes every headline metric in a report.json body from its records.
/// Returns one message per disagreement larger than `tolerance`.
inline std::vector<std::string> audit_report(const json& report, double tolerance = 1e-12) {
    std::vector<EvalRecord> records;
    for (const auto& r : report.at("records")) records.push_back(eval_record_from_json(r));
    const auto& cfg = report.at("config");
    const auto bundle = compute_metrics(records, cfg.at("strategies").get<std::vector<std::string>>(),
                                        cfg.at("extractions").get<std::vector<std::string>>(),
                                        cfg.at("num_buckets").get<int>(),
                                        cfg.value("kde_grid_size", kDefaultKdeGridSize));
    const auto fresh = to_json(bundle);
    std::vector<std::string> problems;
    const auto& stored = report.at("metrics").at("summaries");
    if (stored.size() != fresh.at("summaries").size()) {
        problems.push_back("summary count differs");
        return problems;
    }
    for (std::size_t i = 0; i < stored.size(); ++i) {
        for (const char* key : {"ece", "ice_pos", "ice_neg", "macro_ce", "accuracy", "avg_confidence",
                                "gap", "concern_rate"}) {
            const auto& a = stored[i].at(key);
            const auto& b = fresh["summaries"][i].at(key);
            if (a.is_null() != b.is_null()) {
                problems.push_back("summary " + std::to_string(i) + " " + key + " definedness");
                continue;
            }
            if (a.is_null()) continue;
            if (std::abs(a.get<double>() - b.get<double>()) > tolerance) {
                problems.push_back("summary " + std::to_string(i) + " " + key + ": stored " +
                                   a.dump() + " recomputed " + b.dump());
            }
        }
    }
    return problems;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { thought_char_budget, demonstrations_count };

inline SweepAxis parse_sweep_axis(std::string_view s) {
    if (s == "thought_char_budget") return SweepAxis::thought_char_budget;
    if (s == "demonstrations_count") return SweepAxis::demonstrations_count;
    throw ConfigError("unknown sweep axis '" + std::string(s) + "'");
}

inline std::string to_string(SweepAxis a) {
    return a == SweepAxis::thought_char_budget ? "thought_char_budget" : "demonstrations_count";
}

struct SweepPoint {
    std::size_t value = 0;
    RunReport report;
};

/// One run per value against a shared backend and cache. Demonstration counts
/// take a prefix of the config's demonstration list.
inline std::vector<SweepPoint> sweep(const RunConfig& config, SweepAxis axis,
                                     const std::vector<std::size_t>& values,
                                     const RunContext* shared = nullptr) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    validate(config);
    if (axis == SweepAxis::demonstrations_count) {
        const auto most = *std::max_element(values.begin(), values.end());
        if (most > config.demonstrations.size()) {
            throw ConfigError("sweep asks for " + std::to_string(most) + " demonstrations but the "
                              "config provides " + std::to_string(config.demonstrations.size()));
        }
    }
    const auto datasets = load_datasets(config);
    const auto ctx = shared != nullptr ? *shared : make_context(config);
    std::vector<SweepPoint> out;
    for (const auto v : values) {
        RunConfig c = config;
        if (axis == SweepAxis::thought_char_budget) {
            c.thought_char_budget = v;
        } else {
            c.demonstrations.resize(v);
        }
        if (!config.out_dir.empty()) {
            c.out_dir = (fs::path(config.out_dir) / (to_string(axis) + "_" + std::to_string(v))).string();
        }
        out.push_back({v, run_eval(c, ctx, datasets)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Knowledge augmentation on hard examples

struct AugmentationRun {
    std::string strategy;
    Selection selection;
    AugmentationOutcome outcome;
    std::vector<EvalRecord> after_records;
};

inline json to_json(const AugmentationRun& a) {
    json j;
    j["strategy"] = a.strategy;
    j["mode"] = to_string(a.selection.mode);
    j["selected_ids"] = a.selection.ids;
    j["realized_fraction"] = a.selection.realized_fraction;
    if (a.selection.warning) j["warning"] = *a.selection.warning;
    j["accuracy_before"] = a.outcome.accuracy_before;
    j["accuracy_after"] = a.outcome.accuracy_after;
    j["absolute_improvement"] = a.outcome.absolute_improvement;
    j["relative_improvement"] =
        a.outcome.relative_improvement ? json(*a.outcome.relative_improvement) : json(nullptr);
    j["relative_improvement_defined"] = a.outcome.relative_improvement.has_value();
    j["after_records"] = json::array();
    for (const auto& r : a.after_records) j["after_records"].push_back(to_json(r));
    return j;
}

/// Selects hard items from a finished run's records for one strategy,
/// prepends their external knowledge, re-runs them, and compares accuracy on
/// the selection. Item keys are "<dataset>/<id>" when several datasets ran.
inline AugmentationRun augment_run(const RunConfig& config, const std::vector<EvalRecord>& records,
                                   const std::string& strategy, SelectionMode mode,
                                   std::uint64_t seed, const RunContext* shared = nullptr) {
    const auto datasets = load_datasets(config);
    const bool multi = datasets.size() > 1;
    auto key = [&](const std::string& dataset, const std::string& id) {
        return multi ? dataset + "/" + id : id;
    };
    std::vector<EvalRecord> before;
    for (const auto& r : records) {
        if (r.strategy_id != strategy) continue;
        EvalRecord k = r;
        k.item_id = key(r.dataset, r.item_id);
        before.push_back(std::move(k));
    }
    if (before.empty()) throw DataError("report has no records for strategy '" + strategy + "'");

    AugmentationRun out;
    out.strategy = strategy;
    out.selection = select_hard(before, mode, seed);
    if (out.selection.ids.empty()) {
        out.outcome.selection_mode = mode;
        return out;
    }

    const std::set<std::string> chosen(out.selection.ids.begin(), out.selection.ids.end());
    std::vector<Dataset> augmented;
    for (const auto& d : datasets) {
        Dataset a{d.name, d.path, {}};
        for (const auto& item : d.items) {
            if (chosen.contains(key(d.name, item.id))) a.items.push_back(augment_with_knowledge(item));
        }
        if (!a.items.empty()) augmented.push_back(std::move(a));
    }
    RunConfig c = config;
    c.strategy_ids = {strategy};
    c.out_dir.clear();
    const auto ctx = shared != nullptr ? *shared : make_context(config);
    const auto rerun = run_eval(c, ctx, augmented);
    for (const auto& r : rerun.records) {
        EvalRecord k = r;
        k.item_id = key(r.dataset, r.item_id);
        out.after_records.push_back(std::move(k));
    }
    out.outcome = improvement(before, out.after_records, out.selection);
    return out;
}

}  // namespace calibra
