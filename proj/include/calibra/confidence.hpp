#pragma once

// Confidence-score protocols applied after a final answer: token probability,
// P(True) self-evaluation, and verbalized confidence.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "calibra/backend.hpp"
#include "calibra/errors.hpp"

namespace calibra {

inline constexpr std::string_view kPossibleAnswerPrefix = "Possible answer: ";
inline constexpr std::string_view kPTrueQuestion = "Is the possible answer: (A) True (B) False";
inline constexpr std::string_view kVerbalizedSuffix = "Confidence (0-1):";

enum class ExtractionMethod { token_prob, p_true, verbalized };

inline std::string to_string(ExtractionMethod m) {
    switch (m) {
        case ExtractionMethod::token_prob: return "token_prob";
        case ExtractionMethod::p_true: return "p_true";
        case ExtractionMethod::verbalized: return "verbalized";
    }
    return "token_prob";
}

inline ExtractionMethod parse_extraction_method(std::string_view s) {
    if (s == "token_prob") return ExtractionMethod::token_prob;
    if (s == "p_true") return ExtractionMethod::p_true;
    if (s == "verbalized") return ExtractionMethod::verbalized;
    throw ConfigError("unknown extraction method '" + std::string(s) + "'");
}

struct ConfidenceResult {
    ExtractionMethod method = ExtractionMethod::token_prob;
    double value = 0.0;
    bool clamped = false;
    double raw_value = 0.0;
    std::map<std::string, double> aux;
};

enum class PTrueContext { full_transcript, question_only };

struct ExtractionOptions {
    bool clamp = true;
    bool p_true_normalized = false;
    int p_true_top_k = kMaxTopLogprobs;
    PTrueContext p_true_context = PTrueContext::full_transcript;
    bool verbalized_percent = false;
    int verbalized_max_tokens = 10;
    double temperature = kDefaultTemperature;
    RetryPolicy retry{};
};

/// exp(mean(token_logprobs)), the reciprocal perplexity of the sequence.
inline ConfidenceResult token_prob_confidence(const Completion& completion) {
    if (completion.token_logprobs.empty()) {
        throw ExtractionError("token_prob: completion has no tokens");
    }
    double sum = 0.0;
    for (double lp : completion.token_logprobs) {
        if (std::isnan(lp) || lp > 0.0) {
            throw ExtractionError("token_prob: log-probability " + std::to_string(lp) + " > 0");
        }
        sum += lp;
    }
    const double value = std::exp(sum / static_cast<double>(completion.token_logprobs.size()));
    return {ExtractionMethod::token_prob, value, false, value, {}};
}

/// exp(-mean(token_logprobs)).
inline double perplexity(const Completion& completion) {
    if (completion.token_logprobs.empty()) throw ExtractionError("perplexity of empty completion");
    double sum = 0.0;
    for (double lp : completion.token_logprobs) sum += lp;
    return std::exp(-sum / static_cast<double>(completion.token_logprobs.size()));
}

namespace detail {

// One leading space removed, then ASCII case-folded.
inline std::string fold_choice_token(std::string_view token) {
    if (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    std::string out(token);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

}  // namespace detail

inline std::string p_true_prompt(std::string_view answer_context, std::string_view possible_answer) {
    std::string prompt(answer_context);
    prompt += '\n';
    prompt += kPossibleAnswerPrefix;
    prompt += possible_answer;
    prompt += '\n';
    prompt += kPTrueQuestion;
    prompt += '\n';
    return prompt;
}

/// Reads P("A") off the first-position alternatives. Every alternative that
/// folds to "a" (e.g. "A" and " A") contributes its probability mass.
inline ConfidenceResult p_true_from_alternatives(const std::map<std::string, double>& top,
                                                 bool normalized) {
    double p_a = 0.0;
    double p_b = 0.0;
    bool seen = false;
    for (const auto& [token, lp] : top) {
        const auto folded = detail::fold_choice_token(token);
        if (folded == "a") {
            p_a += std::exp(lp);
            seen = true;
        } else if (folded == "b") {
            p_b += std::exp(lp);
            seen = true;
        }
    }
    if (!seen) {
        std::string observed;
        for (const auto& [token, lp] : top) {
            if (!observed.empty()) observed += ", ";
            observed += "'" + token + "'";
        }
        throw ExtractionError("p_true: neither 'A' nor 'B' among top alternatives [" + observed +
                              "]");
    }
    const double norm = p_a / (p_a + p_b);
    ConfidenceResult r;
    r.method = ExtractionMethod::p_true;
    r.value = normalized ? norm : p_a;
    r.raw_value = r.value;
    r.aux = {{"p_a", p_a}, {"p_b", p_b}, {"normalized", norm}};
    return r;
}

/// Appends the possible answer and the True/False question, asks for one token
/// with top-K alternatives, and reads the probability of answering "A".
inline ConfidenceResult p_true_confidence(const Backend& backend, std::string_view answer_context,
                                          std::string_view possible_answer,
                                          const ExtractionOptions& options = {},
                                          Completion* trace = nullptr) {
    if (options.p_true_top_k < 2) throw ConfigError("p_true needs top_logprobs K >= 2");
    CompletionRequest request;
    request.prompt = p_true_prompt(answer_context, possible_answer);
    request.max_tokens = 1;
    request.temperature = options.temperature;
    request.top_logprobs = options.p_true_top_k;
    const Completion c = complete(backend, request, options.retry);
    if (trace != nullptr) *trace = c;
    if (c.top_logprobs.empty()) throw ExtractionError("p_true: completion returned no tokens");
    return p_true_from_alternatives(c.top_logprobs.front(), options.p_true_normalized);
}

/// First unsigned decimal or integer numeral in the text, read as a real.
inline ConfidenceResult parse_verbalized(std::string_view text, bool clamp = true,
                                         bool percent = false) {
    std::size_t i = 0;
    auto digit = [&](std::size_t k) {
        return k < text.size() && std::isdigit(static_cast<unsigned char>(text[k])) != 0;
    };
    while (i < text.size() && !digit(i) && !(text[i] == '.' && digit(i + 1))) ++i;
    if (i == text.size()) {
        throw ExtractionError("verbalized: unparseable confidence in '" + std::string(text) + "'");
    }
    std::size_t j = i;
    while (digit(j)) ++j;
    if (j < text.size() && text[j] == '.' && digit(j + 1)) {
        ++j;
        while (digit(j)) ++j;
    }
    double raw = std::strtod(std::string(text.substr(i, j - i)).c_str(), nullptr);
    if (percent && raw > 1.0 && raw <= 100.0) raw /= 100.0;
    ConfidenceResult r;
    r.method = ExtractionMethod::verbalized;
    r.raw_value = raw;
    r.value = clamp ? std::clamp(raw, 0.0, 1.0) : raw;
    r.clamped = r.value != raw;
    return r;
}

inline std::string verbalized_prompt(std::string_view answer_context) {
    std::string prompt(answer_context);
    prompt += '\n';
    prompt += kVerbalizedSuffix;
    return prompt;
}

inline ConfidenceResult verbalized_confidence(const Backend& backend,
                                              std::string_view answer_context,
                                              const ExtractionOptions& options = {},
                                              Completion* trace = nullptr) {
    CompletionRequest request;
    request.prompt = verbalized_prompt(answer_context);
    request.max_tokens = options.verbalized_max_tokens;
    request.temperature = options.temperature;
    const Completion c = complete(backend, request, options.retry);
    if (trace != nullptr) *trace = c;
    return parse_verbalized(c.text, options.clamp, options.verbalized_percent);
}

}  // namespace calibra
