#include <gtest/gtest.h>

#include "calibra/calibra.hpp"
#include "support.hpp"

using namespace calibra;
using testing_support::read_file;
using testing_support::TempDir;
using testing_support::write_file;

namespace {

fs::path e2e_dir() { return testing_support::data_dir() / "fixtures" / "e2e"; }

RunConfig e2e_config(const fs::path& out, int workers = 1) {
    auto c = load_run_config(e2e_dir() / "run.json");
    c.out_dir = out.string();
    c.worker_count = workers;
    return c;
}

const CellSummary& cell(const MetricsBundle& b, const std::string& strategy) {
    for (const auto& c : b.summaries) {
        if (c.strategy == strategy) return c;
    }
    throw std::runtime_error("no cell for " + strategy);
}

// Writes a dataset and a lenient mock under `dir`, returns a config for it.
RunConfig lenient_config(const fs::path& dir, const std::string& dataset_lines,
                         const std::string& reply = " Yes") {
    write_file(dir / "data.jsonl", dataset_lines);
    write_file(dir / "mock.json",
               json({{"fallback", {{"text", reply}}}, {"rules", json::array()}}).dump());
    RunConfig c;
    c.dataset_paths = {(dir / "data.jsonl").string()};
    c.strategy_ids = {"standard"};
    c.backend.script_path = (dir / "mock.json").string();
    c.out_dir = (dir / "out").string();
    return c;
}

const std::string kTwoItems =
    R"({"id": "a", "question": "Is the sky blue?", "answers": ["yes"], "answer_kind": "boolean"})"
    "\n"
    R"({"id": 2, "question": "Is fire cold?", "answers": ["no"], "answer_kind": "boolean", "external_knowledge": "Fire is hot."})"
    "\n";

}  // namespace

TEST(Dataset, LoadsAndValidates) {
    TempDir dir("dataset");
    write_file(dir.path() / "ok.jsonl", kTwoItems + "\n");
    const auto items = load_dataset(dir.path() / "ok.jsonl");
    ASSERT_EQ(items.size(), 2u);
    EXPECT_EQ(items[1].id, "2");
    EXPECT_EQ(items[1].external_knowledge, "Fire is hot.");

    write_file(dir.path() / "dup.jsonl", kTwoItems + kTwoItems);
    try {
        load_dataset(dir.path() / "dup.jsonl");
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("lines 1 and 3"), std::string::npos) << e.what();
    }

    write_file(dir.path() / "maybe.jsonl",
               R"({"id": "m", "question": "?", "answers": ["maybe"], "answer_kind": "boolean"})");
    EXPECT_THROW(load_dataset(dir.path() / "maybe.jsonl"), DataError);

    write_file(dir.path() / "broken.jsonl", kTwoItems + "{not json\n");
    try {
        load_dataset(dir.path() / "broken.jsonl");
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("broken.jsonl:3"), std::string::npos) << e.what();
    }
    EXPECT_THROW(load_dataset(dir.path() / "absent.jsonl"), DataError);
}

TEST(Config, DefaultsAndValidation) {
    const RunConfig d;
    EXPECT_EQ(d.num_buckets, 10);
    EXPECT_EQ(d.max_tokens, 120);
    EXPECT_DOUBLE_EQ(d.temperature, 1.2);
    EXPECT_EQ(d.self_consistency_n, 10);
    EXPECT_DOUBLE_EQ(d.self_consistency_temperature, 0.7);
    EXPECT_TRUE(d.clamp_confidences);
    EXPECT_EQ(d.worker_count, 4);

    auto c = e2e_config("out");
    EXPECT_NO_THROW(validate(c));
    EXPECT_TRUE(fs::path(c.backend.script_path).is_absolute());
    c.strategy_ids = {"nope"};
    EXPECT_THROW(validate(c), ConfigError);
    c = e2e_config("out");
    c.extraction_method_ids = {"nope"};
    EXPECT_THROW(validate(c), ConfigError);
    c = e2e_config("out");
    c.backend.kind = "http";
    EXPECT_THROW(validate(c), ConfigError);
    c = e2e_config("out");
    c.templates["unknown_fragment"] = "x";
    EXPECT_THROW(validate(c), ConfigError);
    EXPECT_THROW(run_config_from_json(json::parse(R"({"num_buckets": "ten"})")), ConfigError);
}

TEST(EndToEnd, MatchesHandComputedOracle) {
    TempDir dir("e2e");
    const auto report = run_eval(e2e_config(dir.path() / "out"));
    const auto expected = json::parse(read_file(e2e_dir() / "expected.json"));
    const double tol = expected.at("tolerance").get<double>();
    for (const std::string strategy : {"standard", "far_final"}) {
        const auto& c = cell(report.metrics, strategy);
        const auto& e = expected.at(strategy);
        EXPECT_NEAR(c.summary.ece, e.at("ece").get<double>(), tol) << strategy;
        EXPECT_NEAR(c.summary.ice_pos, e.at("ice_pos").get<double>(), tol) << strategy;
        EXPECT_NEAR(c.summary.ice_neg, e.at("ice_neg").get<double>(), tol) << strategy;
        EXPECT_NEAR(c.summary.macro_ce, e.at("macro_ce").get<double>(), tol) << strategy;
        EXPECT_NEAR(c.summary.accuracy, e.at("accuracy").get<double>(), tol) << strategy;
        EXPECT_NEAR(c.summary.avg_confidence, e.at("avg_confidence").get<double>(), tol) << strategy;
        EXPECT_NEAR(c.concern_rate, e.at("concern_rate").get<double>(), tol) << strategy;
    }
    EXPECT_EQ(report.metrics.summaries.size(), 2u);
    EXPECT_EQ(report.backend_calls, 4u * 1u + 4u * 4u);
}

TEST(EndToEnd, ByteIdenticalAcrossWorkerCounts) {
    TempDir dir("determinism");
    const auto a = run_eval(e2e_config(dir.path() / "one", 1));
    const auto b = run_eval(e2e_config(dir.path() / "eight", 8));
    emit_report(a, dir.path() / "one");
    emit_report(b, dir.path() / "eight");
    EXPECT_EQ(read_file(dir.path() / "one" / "report.json"),
              read_file(dir.path() / "eight" / "report.json"));
    EXPECT_EQ(read_file(dir.path() / "one" / "transcripts.jsonl"),
              read_file(dir.path() / "eight" / "transcripts.jsonl"));
    EXPECT_EQ(read_file(dir.path() / "one" / "metrics.csv"),
              read_file(dir.path() / "eight" / "metrics.csv"));
}

TEST(EndToEnd, EmittedFilesAndSelfAudit) {
    TempDir dir("emit");
    const auto out = dir.path() / "out";
    const auto report = run_eval(e2e_config(out));
    emit_report(report, out);
    for (const char* f : {"report.json", "records.jsonl", "transcripts.jsonl", "run_meta.json",
                          "metrics.csv", "curves/standard__token_prob__kde.csv",
                          "curves/far_final__token_prob__histogram.csv"}) {
        EXPECT_TRUE(fs::exists(out / f)) << f;
    }
    EXPECT_FALSE(fs::exists(out / "transcripts.partial.jsonl"));

    const auto csv = read_file(out / "metrics.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 1);
    EXPECT_TRUE(csv.starts_with(
        "strategy,extraction,n,accuracy,avg_conf,gap,ece,ice_pos,ice_neg,macro_ce,concern_rate\n"));

    const auto body = json::parse(read_file(out / "report.json"));
    EXPECT_TRUE(audit_report(body).empty());
    EXPECT_FALSE(body.contains("started_at"));
    auto tampered = body;
    tampered["metrics"]["summaries"][0]["ece"] = 0.5;
    EXPECT_EQ(audit_report(tampered).size(), 1u);

    const auto records = load_records(out / "records.jsonl");
    const auto fresh = compute_metrics(records, {}, {}, 10);
    EXPECT_NEAR(cell(fresh, "far_final").summary.ece, cell(report.metrics, "far_final").summary.ece,
                1e-12);
}

TEST(EndToEnd, KdeCurvesIntegrateToOne) {
    TempDir dir("kde");
    const auto report = run_eval(e2e_config(dir.path() / "out"));
    int kde = 0;
    for (const auto& c : report.metrics.curves) {
        if (c.curve.kind != CurveKind::kde) continue;
        ++kde;
        EXPECT_NEAR(trapezoid_integral(c.curve), 1.0, 1e-3);
    }
    EXPECT_EQ(kde, 2);
}

TEST(EndToEnd, CacheResumesWithoutRequerying) {
    TempDir dir("resume");
    auto c = e2e_config(dir.path() / "out");
    c.cache_path = (dir.path() / "cache.jsonl").string();
    const auto first = run_eval(c);
    EXPECT_EQ(first.backend_calls, 20u);
    const auto second = run_eval(c);
    EXPECT_EQ(second.backend_calls, 0u);
    EXPECT_EQ(report_json(first).dump(), report_json(second).dump());
}

TEST(EndToEnd, FailureNamesTheTaskAndKeepsPartialResults) {
    TempDir dir("abort");
    auto c = e2e_config(dir.path() / "out");
    c.strategy_ids = {"standard", "cot"};
    try {
        run_eval(c);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("item 'q1'"), std::string::npos) << what;
        EXPECT_NE(what.find("strategy 'cot'"), std::string::npos) << what;
        EXPECT_NE(what.find("step 'reason'"), std::string::npos) << what;
        EXPECT_EQ(e.exit_code(), 2);
    }
    const auto partial = read_file(dir.path() / "out" / "records.partial.jsonl");
    EXPECT_EQ(std::count(partial.begin(), partial.end(), '\n'), 4);
    EXPECT_TRUE(fs::exists(dir.path() / "out" / "transcripts.partial.jsonl"));
}

TEST(EndToEnd, EmptyDatasetIsAnError) {
    TempDir dir("empty");
    auto c = lenient_config(dir.path(), "");
    EXPECT_THROW(run_eval(c), DataError);
    EXPECT_FALSE(fs::exists(dir.path() / "out" / "report.json"));
}

TEST(EndToEnd, UnwritableOutputDirectory) {
    TempDir dir("unwritable");
    const auto report = run_eval(e2e_config(dir.path() / "out"));
    write_file(dir.path() / "file", "x");
    EXPECT_THROW(emit_report(report, dir.path() / "file" / "sub"), ConfigError);
}

TEST(MultiDataset, HeadlineIsTheUnweightedMean) {
    TempDir dir("multi");
    auto c = e2e_config(dir.path() / "out");
    write_file(dir.path() / "copy.jsonl", read_file(e2e_dir() / "dataset.jsonl").substr(
                                              0, read_file(e2e_dir() / "dataset.jsonl").find('\n') + 1));
    c.dataset_paths.push_back((dir.path() / "copy.jsonl").string());
    c.strategy_ids = {"standard"};
    const auto report = run_eval(c);
    const auto& per = report.metrics.per_dataset;
    ASSERT_EQ(per.size(), 2u);
    const double a = per.at("dataset").front().summary.ece;
    const double b = per.at("copy").front().summary.ece;
    EXPECT_NEAR(report.metrics.summaries.front().summary.ece, (a + b) / 2.0, 1e-12);
    EXPECT_NEAR(b, 0.05, 1e-9);
    EXPECT_TRUE(audit_report(report_json(report)).empty());
}

TEST(Sweep, OneReportPerValue) {
    TempDir dir("sweep");
    auto c = e2e_config(dir.path() / "out");
    const auto points = sweep(c, SweepAxis::thought_char_budget, {100, 200});
    ASSERT_EQ(points.size(), 2u);
    EXPECT_EQ(points[0].value, 100u);
    EXPECT_EQ(points[1].report.config.thought_char_budget, 200u);
    EXPECT_THROW(sweep(c, SweepAxis::thought_char_budget, {}), ConfigError);
    EXPECT_THROW(sweep(c, SweepAxis::demonstrations_count, {1}), ConfigError);
}

TEST(Sweep, DemonstrationsGrowEveryPrompt) {
    TempDir dir("demos");
    auto c = lenient_config(dir.path(), kTwoItems);
    for (int i = 0; i < 4; ++i) c.demonstrations.push_back({"Demo question " + std::to_string(i) + "?", "Yes"});
    const auto ctx = make_context(c);
    const auto points = sweep(c, SweepAxis::demonstrations_count, {0, 2, 4}, &ctx);
    ASSERT_EQ(points.size(), 3u);
    std::size_t previous = 0;
    for (const auto& p : points) {
        std::size_t chars = 0;
        for (const auto& t : p.report.transcripts) {
            for (const auto& s : t.transcript.steps) chars += s.prompt.size();
        }
        EXPECT_GT(chars, previous);
        previous = chars;
        EXPECT_EQ(p.report.backend_calls, 2u);
    }
}

TEST(Augment, ConcernAndRandomSelections) {
    TempDir dir("augment");
    auto c = e2e_config(dir.path() / "out");
    const auto report = run_eval(c);
    const auto concern = augment_run(c, report.records, "far_final", SelectionMode::concern_triggered, 7);
    EXPECT_EQ(concern.selection.ids, (std::vector<std::string>{"q2", "q4"}));
    EXPECT_DOUBLE_EQ(concern.outcome.accuracy_before, 0.5);
    EXPECT_DOUBLE_EQ(concern.outcome.accuracy_after, 1.0);
    EXPECT_DOUBLE_EQ(*concern.outcome.relative_improvement, 1.0);

    const auto random = augment_run(c, report.records, "far_final", SelectionMode::random_control, 7);
    EXPECT_EQ(random.selection.ids.size(), 2u);
    const auto again = augment_run(c, report.records, "far_final", SelectionMode::random_control, 7);
    EXPECT_EQ(random.selection.ids, again.selection.ids);

    const auto none = augment_run(c, report.records, "standard", SelectionMode::concern_triggered, 7);
    EXPECT_TRUE(none.selection.ids.empty());
    EXPECT_TRUE(none.selection.warning.has_value());
}

TEST(Records, JsonRoundTripKeepsUndefinedValues) {
    EvalRecord r;
    r.item_id = "x";
    r.dataset = "d";
    r.strategy_id = "standard";
    r.correct = true;
    r.confidences["verbalized"] = 0.25;
    const auto back = eval_record_from_json(to_json(r));
    EXPECT_EQ(to_json(back), to_json(r));
    auto j = to_json(r);
    j["confidences"] = json::object();
    EXPECT_THROW(eval_record_from_json(j), DataError);
}
