#pragma once

// Prompting strategies as declarative plans of generation steps, plus the
// executor that runs a plan against a backend and extracts confidences after
// the final answer.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "calibra/backend.hpp"
#include "calibra/confidence.hpp"
#include "calibra/errors.hpp"
#include "calibra/qa.hpp"

namespace calibra {

/// Prompt fragments every plan is assembled from. Each is overridable by name.
struct PromptTemplates {
    std::string question = "Question: {question}";
    std::string answer = "Answer:";
    std::string explain_answer = "Explain and Answer:";
    std::string knowledge = "Generate some knowledge about the question:";
    std::string cot = "Let's think step by step:";
    std::string self_ask_needed = "Are follow-up questions needed?";
    std::string self_ask_follow_up = "Follow up:";
    std::string self_ask_intermediate = "Intermediate answer:";
    std::string self_ask_final =
        "Question:{question}; Intermediate Questions and Answers: {prior:followups} Answer:";
    std::string self_ask_aggregate =
        "Are follow-up questions needed? List the follow-up questions and answer all of them "
        "together.\nIntermediate Questions and Answers:";
    std::string pseudo_tot =
        "Imagine three different experts are answering this question. All experts will write "
        "down one step of their thinking, then share it with the group. Then all experts will go "
        "on to the next step, and so on. If any expert realises they are wrong at any point, they "
        "leave. The discussion:";
    std::string far_fact = "List the facts you know that are relevant to the question.";
    std::string far_source = "What are the sources of the above facts?";
    std::string far_reflection = "Reflect on the facts above and reason about the question.";
    std::string far_single_answer = "Choose only one answer.";
    std::string demonstration = "Question: {demo_question}\nAnswer: {demo_answer}\n\n";

    /// Fragment names accepted by override().
    static const std::vector<std::string>& names() {
        static const std::vector<std::string> n = {
            "question",       "answer",         "explain_answer",     "knowledge",
            "cot",            "self_ask_needed", "self_ask_follow_up", "self_ask_intermediate",
            "self_ask_final", "self_ask_aggregate", "pseudo_tot",     "far_fact",
            "far_source",     "far_reflection", "far_single_answer",  "demonstration"};
        return n;
    }

    std::string* field(std::string_view name) {
        if (name == "question") return &question;
        if (name == "answer") return &answer;
        if (name == "explain_answer") return &explain_answer;
        if (name == "knowledge") return &knowledge;
        if (name == "cot") return &cot;
        if (name == "self_ask_needed") return &self_ask_needed;
        if (name == "self_ask_follow_up") return &self_ask_follow_up;
        if (name == "self_ask_intermediate") return &self_ask_intermediate;
        if (name == "self_ask_final") return &self_ask_final;
        if (name == "self_ask_aggregate") return &self_ask_aggregate;
        if (name == "pseudo_tot") return &pseudo_tot;
        if (name == "far_fact") return &far_fact;
        if (name == "far_source") return &far_source;
        if (name == "far_reflection") return &far_reflection;
        if (name == "far_single_answer") return &far_single_answer;
        if (name == "demonstration") return &demonstration;
        return nullptr;
    }

    void override(std::string_view name, std::string value) {
        auto* f = field(name);
        if (f == nullptr) throw ConfigError("unknown prompt template '" + std::string(name) + "'");
        *f = std::move(value);
    }
};

struct Demonstration {
    std::string question;
    std::string answer;
};

struct StrategyConfig {
    PromptTemplates templates;
    std::vector<Demonstration> demonstrations;
    // Max characters of each model-generated thought injected into the final step.
    std::optional<std::size_t> thought_char_budget;
    int max_tokens = kDefaultMaxTokens;
    double temperature = kDefaultTemperature;
    int self_consistency_n = 10;
    double self_consistency_temperature = 0.7;
    int self_ask_max_followups = 3;
};

enum class ControlFlow { linear, conditional_branch, repeat_n_vote };

inline std::string to_string(ControlFlow c) {
    switch (c) {
        case ControlFlow::linear: return "linear";
        case ControlFlow::conditional_branch: return "conditional_branch";
        case ControlFlow::repeat_n_vote: return "repeat_n_vote";
    }
    return "linear";
}

struct RequestOverrides {
    std::optional<int> max_tokens;
    std::optional<double> temperature;
    std::optional<std::vector<std::string>> stop;
};

struct Step {
    std::string name;
    std::string templ;  // placeholders: {question}, {prior:<step name>}
    RequestOverrides overrides;
    // Static steps are not generated; their output is fixed by the plan.
    std::optional<std::string> fixed_output;
    // Priors injected into this step are clipped to the thought budget.
    bool clip_priors = false;
};

struct StrategyPlan {
    std::string strategy_id;
    std::string item_id;
    std::string question;
    // The question alone as the pipeline would present it; used by P(True)
    // when the intermediate transcript is excluded.
    std::string question_context;
    AnswerKind answer_kind = AnswerKind::free_form;
    std::vector<Step> steps;
    ControlFlow control = ControlFlow::linear;
    int repeat_n = 1;
    int max_followups = 0;
    std::optional<std::size_t> thought_char_budget;
    int max_tokens = kDefaultMaxTokens;
    double temperature = kDefaultTemperature;

    [[nodiscard]] const Step& step(std::string_view name) const {
        for (const auto& s : steps) {
            if (s.name == name) return s;
        }
        throw ConfigError("plan '" + strategy_id + "' has no step '" + std::string(name) + "'");
    }
};

inline const std::vector<std::string>& strategy_registry() {
    static const std::vector<std::string> ids = {
        "standard",        "knowledge",  "knowledge_explain", "cot",
        "self_ask",        "self_ask_aggregate", "self_consistency", "pseudo_tot",
        "far_final",       "far_fact_only", "far_fact_only_no_source", "far_no_source",
        "far_explain",     "far_free",   "far_human_facts"};
    return ids;
}

inline bool is_known_strategy(std::string_view id) {
    const auto& ids = strategy_registry();
    return std::find(ids.begin(), ids.end(), id) != ids.end();
}

namespace detail {

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

inline std::string trim(std::string_view s) {
    const auto is_ws = [](char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; };
    while (!s.empty() && is_ws(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_ws(s.back())) s.remove_suffix(1);
    return std::string(s);
}

// Clip to at most `budget` bytes without splitting a UTF-8 sequence.
inline std::string clip_utf8(std::string_view s, std::size_t budget) {
    if (s.size() <= budget) return std::string(s);
    std::size_t cut = budget;
    while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
    return std::string(s.substr(0, cut));
}

inline std::string demonstrations_block(const StrategyConfig& config) {
    std::string block;
    for (const auto& d : config.demonstrations) {
        auto text = replace_all(config.templates.demonstration, "{demo_question}", d.question);
        block += replace_all(std::move(text), "{demo_answer}", d.answer);
    }
    return block;
}

}  // namespace detail

/// Deterministic plan for (strategy, item, config).
inline StrategyPlan plan(std::string_view strategy_id, const QAItem& item,
                         const StrategyConfig& config = {}) {
    if (!is_known_strategy(strategy_id)) {
        throw ConfigError("unknown strategy '" + std::string(strategy_id) + "'");
    }
    const auto& t = config.templates;
    StrategyPlan p;
    p.strategy_id = std::string(strategy_id);
    p.item_id = item.id;
    p.question = item.question;
    p.answer_kind = item.answer_kind;
    p.thought_char_budget = config.thought_char_budget;
    p.max_tokens = config.max_tokens;
    p.temperature = config.temperature;

    const std::string head = detail::demonstrations_block(config) + t.question + "\n";
    p.question_context = detail::replace_all(detail::demonstrations_block(config) + t.question,
                                             "{question}", item.question);
    auto add = [&p](std::string name, std::string templ, bool final_step = false) -> Step& {
        Step s;
        s.name = std::move(name);
        s.templ = std::move(templ);
        s.clip_priors = final_step;
        p.steps.push_back(std::move(s));
        return p.steps.back();
    };
    const std::string id(strategy_id);

    if (id == "standard") {
        add("answer", head + t.answer, true);
    } else if (id == "knowledge" || id == "knowledge_explain") {
        const auto k = head + t.knowledge;
        add("knowledge", k);
        add("answer", k + "{prior:knowledge}\n" + (id == "knowledge" ? t.answer : t.explain_answer),
            true);
    } else if (id == "cot") {
        const auto r = head + t.cot;
        add("reason", r);
        add("answer", r + "{prior:reason}\n" + t.answer, true);
    } else if (id == "self_ask") {
        p.control = ControlFlow::conditional_branch;
        p.max_followups = config.self_ask_max_followups;
        const auto needed = head + t.self_ask_needed;
        add("followup_needed", needed);
        const auto q = needed + "{prior:followup_needed}\n{prior:followup_log}" + t.self_ask_follow_up;
        add("followup_question", q).overrides.stop = std::vector<std::string>{"\n"};
        add("followup_answer", q + "{prior:followup_question}\n" + t.self_ask_intermediate)
            .overrides.stop = std::vector<std::string>{"\n"};
        add("answer", detail::demonstrations_block(config) + t.self_ask_final, true);
    } else if (id == "self_ask_aggregate") {
        add("decompose", head + t.self_ask_aggregate);
        add("answer", detail::demonstrations_block(config) + t.self_ask_final, true);
    } else if (id == "self_consistency") {
        p.control = ControlFlow::repeat_n_vote;
        p.repeat_n = config.self_consistency_n;
        if (p.repeat_n < 1) throw ConfigError("self_consistency_n must be >= 1");
        add("answer", head + t.answer, true).overrides.temperature =
            config.self_consistency_temperature;
    } else if (id == "pseudo_tot") {
        const auto d = head + t.pseudo_tot;
        add("discussion", d);
        add("answer", d + "{prior:discussion}\n" + t.answer, true);
    } else {
        // Fact-and-reflection family.
        const bool human = id == "far_human_facts";
        const bool source = !human && id != "far_no_source" && id != "far_fact_only_no_source";
        const bool reflection = id != "far_fact_only" && id != "far_fact_only_no_source";
        const bool constrained = id != "far_free";
        const auto& final_cue = id == "far_explain" ? t.explain_answer : t.answer;

        std::string context = head + t.far_fact;
        auto& fact = add("fact", context);
        if (human) {
            if (!item.gold_facts || item.gold_facts->empty()) {
                throw DataError("far_human_facts: item '" + item.id + "' has no gold_facts");
            }
            std::string facts;
            for (const auto& f : *item.gold_facts) facts += "\n" + f;
            fact.fixed_output = facts;
        }
        context += "{prior:fact}";
        if (source) {
            context += "\n" + t.far_source;
            add("source", context);
            context += "{prior:source}";
        }
        if (reflection) {
            context += "\n" + t.far_reflection;
            add("reflection", context);
            context += "{prior:reflection}";
        }
        if (constrained) context += "\n" + t.far_single_answer;
        add("answer", context + "\n" + final_cue, true);
    }
    return p;
}

/// Substitutes {question} and {prior:name}. Other braces are literal.
inline std::string render_step(const Step& step, std::string_view question,
                               const std::map<std::string, std::string>& priors,
                               std::optional<std::size_t> thought_char_budget = std::nullopt) {
    static constexpr std::string_view kQuestion = "{question}";
    static constexpr std::string_view kPrior = "{prior:";
    const std::string& t = step.templ;
    std::string out;
    out.reserve(t.size() + question.size());
    std::size_t i = 0;
    while (i < t.size()) {
        if (t.compare(i, kQuestion.size(), kQuestion) == 0) {
            out += question;
            i += kQuestion.size();
            continue;
        }
        if (t.compare(i, kPrior.size(), kPrior) == 0) {
            const auto close = t.find('}', i);
            if (close == std::string::npos) {
                throw ConfigError("step '" + step.name + "': unterminated placeholder");
            }
            const auto name = t.substr(i + kPrior.size(), close - i - kPrior.size());
            const auto it = priors.find(name);
            if (it == priors.end()) {
                throw ConfigError("step '" + step.name + "': unresolved placeholder {prior:" +
                                  name + "}");
            }
            if (step.clip_priors && thought_char_budget) {
                out += detail::clip_utf8(it->second, *thought_char_budget);
            } else {
                out += it->second;
            }
            i = close + 1;
            continue;
        }
        out.push_back(t[i]);
        ++i;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Majority vote

struct VoteResult {
    std::size_t winner_index = 0;  // first occurrence of the winning answer
    std::string winner;
    std::vector<std::pair<std::string, int>> counts;  // first-seen order
};

/// Key an answer votes under: the resolved boolean for boolean answers,
/// otherwise the normalized string.
inline std::string vote_key(const ExtractedAnswer& a) {
    if (a.boolean_value && *a.boolean_value != TriState::unresolved) {
        return to_string(*a.boolean_value);
    }
    return a.normalized;
}

/// Most frequent answer wins; ties go to the tied answer seen first.
inline VoteResult majority_vote(const std::vector<ExtractedAnswer>& candidates) {
    if (candidates.empty()) throw DataError("majority vote over no candidates");
    VoteResult r;
    std::map<std::string, std::size_t> slot;
    std::vector<std::size_t> first_index;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto key = vote_key(candidates[i]);
        const auto [it, inserted] = slot.emplace(key, r.counts.size());
        if (inserted) {
            r.counts.emplace_back(key, 0);
            first_index.push_back(i);
        }
        ++r.counts[it->second].second;
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < r.counts.size(); ++k) {
        if (r.counts[k].second > r.counts[best].second) best = k;
    }
    r.winner = r.counts[best].first;
    r.winner_index = first_index[best];
    return r;
}

// ---------------------------------------------------------------------------
// Execution

struct StepRecord {
    std::string step;
    std::string prompt;
    CompletionRequest request;
    Completion completion;
    bool fixed = false;
};

struct Transcript {
    std::string item_id;
    std::string strategy_id;
    std::vector<StepRecord> steps;
    ExtractedAnswer final_answer;
    std::string final_context;  // final prompt + final completion text
    std::optional<VoteResult> vote;
    std::vector<StepRecord> extraction_steps;
};

struct ExecutionResult {
    Transcript transcript;
    std::vector<ConfidenceResult> confidences;
};

namespace detail {

inline bool ends_follow_ups(std::string_view question) {
    const auto n = normalize_answer(question);
    return n.empty() || n == "none" || n == "no" || n == "na";
}

class StepRunner {
public:
    StepRunner(const StrategyPlan& plan, const Backend& backend, const RetryPolicy& retry,
               Transcript& transcript)
        : plan_(plan), backend_(backend), retry_(retry), transcript_(transcript) {}

    const StepRecord& run(const Step& step, std::string record_name,
                          std::optional<long long> seed = std::nullopt) {
        StepRecord rec;
        rec.step = std::move(record_name);
        try {
            rec.prompt = render_step(step, plan_.question, priors, plan_.thought_char_budget);
            rec.request.prompt = rec.prompt;
            rec.request.max_tokens = step.overrides.max_tokens.value_or(plan_.max_tokens);
            rec.request.temperature = step.overrides.temperature.value_or(plan_.temperature);
            if (step.overrides.stop) rec.request.stop = *step.overrides.stop;
            rec.request.seed = seed;
            if (step.fixed_output) {
                rec.fixed = true;
                rec.completion.text = *step.fixed_output;
            } else {
                rec.completion = complete(backend_, rec.request, retry_);
            }
        } catch (const Error& e) {
            throw Error(e.kind(), "step '" + rec.step + "': " + e.what());
        }
        priors[step.name] = rec.completion.text;
        transcript_.steps.push_back(std::move(rec));
        return transcript_.steps.back();
    }

    std::map<std::string, std::string> priors;

private:
    const StrategyPlan& plan_;
    const Backend& backend_;
    const RetryPolicy& retry_;
    Transcript& transcript_;
};

}  // namespace detail

struct ExecuteOptions {
    ExtractionOptions extraction{};
};

/// Runs the plan's steps in order, derives the final answer, then applies each
/// requested extraction method to the final-answer context.
inline ExecutionResult execute(const StrategyPlan& plan, const Backend& backend,
                               const std::vector<ExtractionMethod>& methods,
                               const ExecuteOptions& options = {}) {
    ExecutionResult result;
    auto& tr = result.transcript;
    tr.item_id = plan.item_id;
    tr.strategy_id = plan.strategy_id;
    const auto& retry = options.extraction.retry;
    detail::StepRunner runner(plan, backend, retry, tr);
    const StepRecord* final_record = nullptr;

    switch (plan.control) {
        case ControlFlow::linear: {
            for (const auto& step : plan.steps) {
                final_record = &runner.run(step, step.name);
                if (step.name == "decompose") {
                    runner.priors["followups"] = detail::trim(final_record->completion.text);
                }
            }
            break;
        }
        case ControlFlow::conditional_branch: {
            const auto& needed = runner.run(plan.step("followup_needed"), "followup_needed");
            std::string pairs;
            if (extract_boolean(needed.completion.text) != TriState::false_value) {
                std::string log;
                runner.priors["followup_log"] = log;
                for (int k = 1; k <= plan.max_followups; ++k) {
                    const auto& q = runner.run(plan.step("followup_question"),
                                               "followup_question_" + std::to_string(k));
                    if (detail::ends_follow_ups(q.completion.text)) break;
                    const auto question = q.completion.text;
                    const auto& a = runner.run(plan.step("followup_answer"),
                                               "followup_answer_" + std::to_string(k));
                    log += "Follow up:" + question + "\nIntermediate answer:" + a.completion.text +
                           "\n";
                    runner.priors["followup_log"] = log;
                    if (!pairs.empty()) pairs += " ";
                    pairs += "Follow up: " + detail::trim(question) +
                             " Intermediate answer: " + detail::trim(a.completion.text);
                }
            }
            runner.priors["followups"] = pairs;
            final_record = &runner.run(plan.step("answer"), "answer");
            break;
        }
        case ControlFlow::repeat_n_vote: {
            const auto& step = plan.step("answer");
            std::vector<ExtractedAnswer> candidates;
            std::vector<std::size_t> record_index;
            for (int i = 0; i < plan.repeat_n; ++i) {
                const auto& rec = runner.run(step, "answer_" + std::to_string(i + 1), i);
                candidates.push_back(make_answer(detail::trim(rec.completion.text), plan.answer_kind));
                record_index.push_back(tr.steps.size() - 1);
            }
            auto vote = majority_vote(candidates);
            final_record = &tr.steps[record_index[vote.winner_index]];
            tr.vote = std::move(vote);
            break;
        }
    }

    tr.final_answer = make_answer(detail::trim(final_record->completion.text), plan.answer_kind);
    tr.final_context = final_record->prompt + final_record->completion.text;

    const auto& ex = options.extraction;
    for (const auto method : methods) {
        try {
            switch (method) {
                case ExtractionMethod::token_prob:
                    result.confidences.push_back(token_prob_confidence(final_record->completion));
                    break;
                case ExtractionMethod::p_true: {
                    const auto& context = ex.p_true_context == PTrueContext::full_transcript
                                              ? tr.final_context
                                              : plan.question_context;
                    StepRecord rec;
                    rec.step = "confidence:p_true";
                    rec.prompt = p_true_prompt(context, tr.final_answer.raw_text);
                    rec.request.prompt = rec.prompt;
                    result.confidences.push_back(p_true_confidence(
                        backend, context, tr.final_answer.raw_text, ex, &rec.completion));
                    tr.extraction_steps.push_back(std::move(rec));
                    break;
                }
                case ExtractionMethod::verbalized: {
                    StepRecord rec;
                    rec.step = "confidence:verbalized";
                    rec.prompt = verbalized_prompt(tr.final_context);
                    rec.request.prompt = rec.prompt;
                    result.confidences.push_back(
                        verbalized_confidence(backend, tr.final_context, ex, &rec.completion));
                    tr.extraction_steps.push_back(std::move(rec));
                    break;
                }
            }
        } catch (const Error& e) {
            throw Error(e.kind(), "confidence '" + to_string(method) + "': " + e.what());
        }
    }
    return result;
}

}  // namespace calibra
