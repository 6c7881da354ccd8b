#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "calibra/calibra.hpp"
#include "support.hpp"

using namespace calibra;

namespace {

QAItem owl() {
    QAItem item;
    item.id = "owl";
    item.question = "Would an owl monkey enjoy a strawberry?";
    item.gold_answers = {"True"};
    item.answer_kind = AnswerKind::boolean;
    item.gold_facts = std::vector<std::string>{"Owl monkeys are omnivores that eat fruit.",
                                               "Strawberries are fruit."};
    return item;
}

std::shared_ptr<MockBackend> always(const std::string& text) {
    return mock_from_script(
        mock_script_from_json({{"fallback", {{"text", text}}}, {"rules", json::array()}}));
}

// Renders every prompt a strategy produces, in the layout of the golden files.
std::string render_transcript(const std::string& strategy, const StrategyConfig& config = {}) {
    const auto mock = always(" Yes");
    const auto p = plan(strategy, owl(), config);
    const auto result = execute(p, *mock, {});
    const auto& tr = result.transcript;
    std::string out;
    for (const auto& s : tr.steps) out += "=== " + s.step + " ===\n" + s.prompt + "\n";
    out += "=== confidence:p_true ===\n" + p_true_prompt(tr.final_context, tr.final_answer.raw_text) + "\n";
    out += "=== confidence:verbalized ===\n" + verbalized_prompt(tr.final_context) + "\n";
    return out;
}

std::size_t calls_for(const std::string& strategy, const std::string& reply,
                      const StrategyConfig& config = {}) {
    auto counter = std::make_shared<CountingBackend>(always(reply));
    execute(plan(strategy, owl(), config), *counter, {});
    return counter->calls();
}

}  // namespace

TEST(Registry, AllStrategiesPlan) {
    for (const auto& id : strategy_registry()) {
        const auto p = plan(id, owl());
        EXPECT_FALSE(p.steps.empty()) << id;
        EXPECT_EQ(p.steps.back().name, "answer") << id;
        EXPECT_TRUE(p.steps.back().clip_priors) << id;
    }
    EXPECT_THROW(plan("tree_of_thought", owl()), ConfigError);
}

TEST(Plans, AreDeterministic) {
    for (const auto& id : strategy_registry()) {
        EXPECT_EQ(render_transcript(id), render_transcript(id)) << id;
    }
}

TEST(Plans, MatchGoldens) {
    for (const auto& id : strategy_registry()) {
        const auto golden =
            testing_support::read_file(testing_support::data_dir() / "goldens" / (id + ".txt"));
        ASSERT_FALSE(golden.empty()) << id;
        EXPECT_EQ(render_transcript(id), golden) << id;
    }
}

TEST(Plans, StepShapes) {
    auto names = [](const StrategyPlan& p) {
        std::vector<std::string> out;
        for (const auto& s : p.steps) out.push_back(s.name);
        return out;
    };
    using V = std::vector<std::string>;
    EXPECT_EQ(names(plan("standard", owl())), V({"answer"}));
    EXPECT_EQ(names(plan("cot", owl())), V({"reason", "answer"}));
    EXPECT_EQ(names(plan("far_final", owl())), V({"fact", "source", "reflection", "answer"}));
    EXPECT_EQ(names(plan("far_fact_only", owl())), V({"fact", "source", "answer"}));
    EXPECT_EQ(names(plan("far_fact_only_no_source", owl())), V({"fact", "answer"}));
    EXPECT_EQ(names(plan("far_no_source", owl())), V({"fact", "reflection", "answer"}));
    EXPECT_EQ(plan("self_ask", owl()).control, ControlFlow::conditional_branch);
    const auto sc = plan("self_consistency", owl());
    EXPECT_EQ(sc.control, ControlFlow::repeat_n_vote);
    EXPECT_EQ(sc.repeat_n, 10);
    EXPECT_EQ(*sc.steps.back().overrides.temperature, 0.7);
}

TEST(Plans, HumanFactsNeedGoldFacts) {
    auto item = owl();
    item.gold_facts.reset();
    EXPECT_THROW(plan("far_human_facts", item), DataError);
    EXPECT_EQ(calls_for("far_human_facts", " Yes"), 2u);
}

TEST(Plans, DemonstrationsPrefixEveryPrompt) {
    StrategyConfig config;
    config.demonstrations = {{"Is the sky blue?", "Yes"}, {"Is fire cold?", "No"}};
    const auto mock = always(" Yes");
    const auto result = execute(plan("cot", owl(), config), *mock, {});
    for (const auto& s : result.transcript.steps) {
        EXPECT_TRUE(s.prompt.starts_with(
            "Question: Is the sky blue?\nAnswer: Yes\n\nQuestion: Is fire cold?\nAnswer: No\n\n"
            "Question: Would an owl monkey enjoy a strawberry?\n"));
    }
}

TEST(Plans, TemplateOverrides) {
    StrategyConfig config;
    config.templates.override("cot", "Think carefully:");
    const auto p = plan("cot", owl(), config);
    EXPECT_NE(p.steps.front().templ.find("Think carefully:"), std::string::npos);
    EXPECT_THROW(config.templates.override("nonexistent", "x"), ConfigError);
    EXPECT_EQ(PromptTemplates::names().size(), 16u);
}

TEST(Render, PlaceholdersAndBudget) {
    Step s;
    s.name = "answer";
    s.templ = "Q: {question} T: {prior:reason} {literal}";
    EXPECT_EQ(render_step(s, "q?", {{"reason", "abcdef"}}), "Q: q? T: abcdef {literal}");
    s.clip_priors = true;
    EXPECT_EQ(render_step(s, "q?", {{"reason", "abcdef"}}, 3), "Q: q? T: abc {literal}");
    EXPECT_THROW(render_step(s, "q?", {}), ConfigError);
    s.templ = "{prior:unterminated";
    EXPECT_THROW(render_step(s, "q?", {}), ConfigError);
}

TEST(Render, BudgetNeverSplitsUtf8) {
    Step s;
    s.name = "answer";
    s.templ = "{prior:x}";
    s.clip_priors = true;
    EXPECT_EQ(render_step(s, "", {{"x", "a\xc3\xa9"}}, 2), "a");
}

TEST(Render, BudgetShortensOnlyTheFinalStep) {
    StrategyConfig config;
    config.thought_char_budget = 2;
    const auto mock = always(" Yes indeed");
    const auto result = execute(plan("cot", owl(), config), *mock, {});
    const auto& steps = result.transcript.steps;
    ASSERT_EQ(steps.size(), 2u);
    EXPECT_TRUE(steps[1].prompt.ends_with("step by step: Y\nAnswer:"));
}

TEST(CallCounts, FollowThePlan) {
    EXPECT_EQ(calls_for("standard", " Yes"), 1u);
    EXPECT_EQ(calls_for("cot", " Yes"), 2u);
    EXPECT_EQ(calls_for("knowledge", " Yes"), 2u);
    EXPECT_EQ(calls_for("far_final", " Yes"), 4u);
    EXPECT_EQ(calls_for("far_fact_only_no_source", " Yes"), 2u);
    EXPECT_EQ(calls_for("self_consistency", " Yes"), 10u);
    EXPECT_EQ(calls_for("pseudo_tot", " Yes"), 2u);
    EXPECT_EQ(calls_for("self_ask_aggregate", " Yes"), 2u);
}

TEST(CallCounts, SelfAskBranches) {
    EXPECT_EQ(calls_for("self_ask", " No"), 2u);
    EXPECT_EQ(calls_for("self_ask", " Yes"), 2u + 2u * 3u);
    StrategyConfig one;
    one.self_ask_max_followups = 1;
    EXPECT_EQ(calls_for("self_ask", " Yes", one), 4u);
}

TEST(SelfAsk, NoneEndsTheFollowUps) {
    const auto mock = mock_from_script(mock_script_from_json(
        {{"fallback", {{"text", " Yes"}}},
         {"rules",
          {{{"match", "prefix"},
            {"prompt", "Question: Would an owl monkey enjoy a strawberry?\nAre follow-up questions "
                       "needed? Yes\nFollow up:"},
            {"response", " None"}}}}}));
    CountingBackend counter(mock);
    const auto result = execute(plan("self_ask", owl()), counter, {});
    EXPECT_EQ(counter.calls(), 3u);
    EXPECT_EQ(result.transcript.steps.back().prompt,
              "Question:Would an owl monkey enjoy a strawberry?; Intermediate Questions and "
              "Answers:  Answer:");
}

TEST(SelfConsistency, SeedsAreDistinctAndVoteIsRecorded) {
    const auto mock = mock_from_script(mock_script_from_json(
        {{"rules",
          {{{"prompt", "Question: Would an owl monkey enjoy a strawberry?\nAnswer:"},
            {"responses", {" No", " Yes", " Yes, surely", " no"}}}}}}));
    const auto result = execute(plan("self_consistency", owl()), *mock, {});
    const auto& tr = result.transcript;
    ASSERT_TRUE(tr.vote.has_value());
    ASSERT_EQ(tr.steps.size(), 10u);
    for (std::size_t i = 0; i < tr.steps.size(); ++i) {
        EXPECT_EQ(*tr.steps[i].request.seed, static_cast<long long>(i));
        EXPECT_DOUBLE_EQ(tr.steps[i].request.temperature, 0.7);
    }
    // seeds 0..9 mod 4 -> No Yes Yes No No Yes Yes No No Yes: false 5, true 5; false seen first.
    EXPECT_EQ(tr.vote->winner, "false");
    EXPECT_EQ(tr.vote->winner_index, 0u);
    EXPECT_EQ(tr.final_answer.raw_text, "No");
}

TEST(Vote, CountsAndTies) {
    auto ans = [](const std::vector<std::string>& xs) {
        std::vector<ExtractedAnswer> out;
        for (const auto& x : xs) out.push_back(make_answer(x, AnswerKind::free_form));
        return out;
    };
    const auto r = majority_vote(ans({"b", "x", "c", "x", "b", "x", "c", "x", "b", "c"}));
    EXPECT_EQ(r.winner, "x");
    EXPECT_EQ(r.winner_index, 1u);
    const auto tie = majority_vote(ans({"p", "q", "q", "p"}));
    EXPECT_EQ(tie.winner, "p");
    EXPECT_EQ(majority_vote(ans({"a"})).winner, "");
    EXPECT_THROW(majority_vote({}), DataError);
    EXPECT_EQ(majority_vote(ans({"The Paris.", "paris"})).counts.size(), 1u);
}

TEST(VoteProperty, TieGoesToFirstSeenUnderOrderPreservingShuffles) {
    // Five "x" and five "y"; shuffle everything after the first occurrence of each.
    testing_support::Gen g(41);
    for (int t = 0; t < 50; ++t) {
        std::vector<std::string> xs = {"x", "y", "x", "y", "x", "y", "x", "y", "x", "y"};
        std::shuffle(xs.begin() + 2, xs.end(), g.engine());
        std::vector<ExtractedAnswer> c;
        for (const auto& x : xs) c.push_back(make_answer(x, AnswerKind::free_form));
        ASSERT_EQ(majority_vote(c).winner, "x");
    }
}

TEST(Execute, ConfidencesFollowTheFinalAnswer) {
    const std::string final_prompt = "Question: Would an owl monkey enjoy a strawberry?\nAnswer:";
    const auto ctx = final_prompt + " Yes";
    const auto mock = mock_from_script(mock_script_from_json(
        {{"rules",
          {{{"prompt", final_prompt}, {"response", {{"text", " Yes"}, {"logprobs", {-0.2}}}}},
           {{"prompt", p_true_prompt(ctx, "Yes")},
            {"response",
             {{"text", " A"},
              {"logprobs", {std::log(0.6)}},
              {"top_logprobs", json::array({{{" A", std::log(0.6)}, {" B", std::log(0.3)}}})}}}},
           {{"prompt", verbalized_prompt(ctx)}, {"response", " 0.75"}}}}}));
    const auto result = execute(plan("standard", owl()), *mock,
                                {ExtractionMethod::token_prob, ExtractionMethod::p_true,
                                 ExtractionMethod::verbalized});
    ASSERT_EQ(result.confidences.size(), 3u);
    EXPECT_NEAR(result.confidences[0].value, std::exp(-0.2), 1e-12);
    EXPECT_NEAR(result.confidences[1].value, 0.6, 1e-12);
    EXPECT_NEAR(result.confidences[2].value, 0.75, 1e-12);
    EXPECT_EQ(result.transcript.extraction_steps.size(), 2u);
    EXPECT_EQ(result.transcript.final_answer.boolean_value, TriState::true_value);
}

TEST(Execute, ErrorsNameTheStep) {
    const auto mock = mock_from_script(mock_script_from_json({{"rules", json::array()}}));
    try {
        execute(plan("cot", owl()), *mock, {});
        FAIL() << "expected CapabilityError";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("step 'reason'"), std::string::npos);
        EXPECT_EQ(e.kind(), ErrorKind::backend);
    }
}
