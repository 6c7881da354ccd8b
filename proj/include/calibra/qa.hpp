#pragma once

// Question/answer domain types, answer normalization and exact-match scoring.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calibra/errors.hpp"

namespace calibra {

enum class AnswerKind { boolean, free_form };

enum class TriState { true_value, false_value, unresolved };

inline std::string to_string(AnswerKind kind) {
    return kind == AnswerKind::boolean ? "boolean" : "free_form";
}

inline AnswerKind parse_answer_kind(std::string_view s) {
    if (s == "boolean") return AnswerKind::boolean;
    if (s == "free_form") return AnswerKind::free_form;
    throw DataError("unknown answer_kind '" + std::string(s) + "'");
}

inline std::string to_string(TriState v) {
    switch (v) {
        case TriState::true_value: return "true";
        case TriState::false_value: return "false";
        case TriState::unresolved: return "unresolved";
    }
    return "unresolved";
}

struct QAItem {
    std::string id;
    std::string question;
    std::vector<std::string> gold_answers;
    AnswerKind answer_kind = AnswerKind::free_form;
    std::optional<std::vector<std::string>> gold_facts;
    std::optional<std::string> external_knowledge;
    // Set by knowledge augmentation; holds the question as originally loaded.
    std::optional<std::string> original_question;
};

struct ExtractedAnswer {
    std::string raw_text;
    std::string normalized;
    std::optional<TriState> boolean_value;
};

/// The atom of all metric computation: one item scored under one strategy.
struct EvalRecord {
    std::string item_id;
    std::string dataset;
    std::string strategy_id;
    bool correct = false;
    std::map<std::string, double> confidences;
    bool concern = false;
};

namespace detail {

inline constexpr char32_t kReplacement = 0xFFFD;

// Decodes one UTF-8 code point starting at s[i]; advances i. An invalid byte
// decodes as U+FFFD.
inline char32_t next_code_point(std::string_view s, std::size_t& i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    auto continuation = [&](std::size_t k) -> int {
        if (i + k >= s.size()) return -1;
        const auto b = static_cast<unsigned char>(s[i + k]);
        return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
    };
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    if ((b0 & 0xE0) == 0xC0) {
        const int c1 = continuation(1);
        if (c1 >= 0) {
            i += 2;
            return (char32_t(b0 & 0x1F) << 6) | char32_t(c1);
        }
    } else if ((b0 & 0xF0) == 0xE0) {
        const int c1 = continuation(1);
        const int c2 = c1 >= 0 ? continuation(2) : -1;
        if (c2 >= 0) {
            i += 3;
            return (char32_t(b0 & 0x0F) << 12) | (char32_t(c1) << 6) | char32_t(c2);
        }
    } else if ((b0 & 0xF8) == 0xF0) {
        const int c1 = continuation(1);
        const int c2 = c1 >= 0 ? continuation(2) : -1;
        const int c3 = c2 >= 0 ? continuation(3) : -1;
        if (c3 >= 0) {
            i += 4;
            return (char32_t(b0 & 0x07) << 18) | (char32_t(c1) << 12) | (char32_t(c2) << 6) |
                   char32_t(c3);
        }
    }
    ++i;
    return kReplacement;
}

inline void append_utf8(std::string& out, char32_t c) {
    if (c < 0x80) {
        out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (c >> 6)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (c >> 12)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (c >> 18)));
        out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
}

inline bool is_punctuation(char32_t c) {
    if (c < 0x80) {
        return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
               (c >= 0x7B && c <= 0x7E);
    }
    // Latin-1 punctuation and symbols, General Punctuation, CJK punctuation.
    return (c >= 0xA1 && c <= 0xBF && c != 0xAA && c != 0xB5 && c != 0xBA) || c == 0xD7 ||
           c == 0xF7 || (c >= 0x2010 && c <= 0x205E) || (c >= 0x3001 && c <= 0x3003) ||
           (c >= 0x3008 && c <= 0x3011) || (c >= 0xFF01 && c <= 0xFF0F);
}

inline bool is_space(char32_t c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v' ||
           c == 0xA0 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 ||
           c == 0x202F || c == 0x205F || c == 0x3000;
}

inline std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ' ') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

}  // namespace detail

/// SQuAD-style normalization: lowercase, strip punctuation, drop the
/// articles a/an/the, collapse whitespace. Idempotent.
inline std::string normalize_answer(std::string_view raw) {
    // Lowercase + punctuation removal; every whitespace run becomes one ' '.
    std::string stripped;
    stripped.reserve(raw.size());
    std::size_t i = 0;
    while (i < raw.size()) {
        const char32_t c = detail::next_code_point(raw, i);
        if (detail::is_punctuation(c)) continue;
        if (detail::is_space(c)) {
            stripped.push_back(' ');
            continue;
        }
        if (c >= 'A' && c <= 'Z') {
            stripped.push_back(static_cast<char>(c - 'A' + 'a'));
            continue;
        }
        detail::append_utf8(stripped, c);
    }

    std::string out;
    for (const auto& word : detail::split_words(stripped)) {
        if (word == "a" || word == "an" || word == "the") continue;
        if (!out.empty()) out.push_back(' ');
        out += word;
    }
    return out;
}

/// First boolean-looking token wins: {true, yes} or {false, no}.
inline TriState extract_boolean(std::string_view raw) {
    for (const auto& token : detail::split_words(normalize_answer(raw))) {
        if (token == "true" || token == "yes") return TriState::true_value;
        if (token == "false" || token == "no") return TriState::false_value;
    }
    return TriState::unresolved;
}

/// Gold aliases for boolean items must normalize to exactly one boolean word.
inline std::optional<bool> gold_boolean(std::string_view alias) {
    const auto n = normalize_answer(alias);
    if (n == "true" || n == "yes") return true;
    if (n == "false" || n == "no") return false;
    return std::nullopt;
}

/// Throws DataError naming the item when an invariant does not hold.
inline void validate(const QAItem& item) {
    if (item.id.empty()) throw DataError("item with empty id");
    if (item.gold_answers.empty()) {
        throw DataError("item '" + item.id + "': gold_answers must be non-empty");
    }
    if (item.answer_kind == AnswerKind::boolean) {
        std::optional<bool> first;
        for (const auto& alias : item.gold_answers) {
            const auto value = gold_boolean(alias);
            if (!value) {
                throw DataError("item '" + item.id + "': boolean gold alias '" + alias +
                                "' does not normalize to true/false");
            }
            if (first && *first != *value) {
                throw DataError("item '" + item.id + "': contradictory boolean gold aliases");
            }
            first = value;
        }
    }
}

inline ExtractedAnswer make_answer(std::string_view raw_text, AnswerKind kind) {
    ExtractedAnswer answer;
    answer.raw_text = std::string(raw_text);
    answer.normalized = normalize_answer(raw_text);
    if (kind == AnswerKind::boolean) answer.boolean_value = extract_boolean(raw_text);
    return answer;
}

inline bool exact_match(const ExtractedAnswer& answer, const QAItem& item) {
    if (item.answer_kind == AnswerKind::boolean) {
        const auto predicted = answer.boolean_value.value_or(extract_boolean(answer.raw_text));
        if (predicted == TriState::unresolved) return false;
        for (const auto& alias : item.gold_answers) {
            if (const auto gold = gold_boolean(alias)) {
                return *gold == (predicted == TriState::true_value);
            }
        }
        return false;
    }
    return std::any_of(item.gold_answers.begin(), item.gold_answers.end(),
                       [&](const std::string& alias) {
                           return normalize_answer(alias) == answer.normalized;
                       });
}

inline double accuracy(std::span<const EvalRecord> records) {
    if (records.empty()) throw DataError("accuracy of an empty record set");
    const auto hits = std::count_if(records.begin(), records.end(),
                                    [](const EvalRecord& r) { return r.correct; });
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

}  // namespace calibra
