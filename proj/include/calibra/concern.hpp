#pragma once

// Expressing-concern detection, hard-example selection, knowledge
// augmentation and before/after accuracy accounting.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calibra/errors.hpp"
#include "calibra/qa.hpp"

namespace calibra {

inline constexpr std::string_view kDefaultLexiconVersion = "calibra-concern-v1";

inline const std::vector<std::string>& default_concern_patterns() {
    static const std::vector<std::string> patterns = {
        "not sufficient evidence", "not yet sufficient evidence", "no sufficient evidence",
        "not possible to answer",  "cannot be answered",          "further research",
        "it depends",              "need further",                "insufficient evidence",
        "current evidence"};
    return patterns;
}

namespace detail {

inline std::string fold_and_collapse(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c) != 0) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

inline bool is_word_char(char c) {
    const auto u = static_cast<unsigned char>(c);
    return std::isalnum(u) != 0 || c == '_' || u >= 0x80;
}

// '*' matches any run of characters, '?' exactly one; everything else literal.
// Whole-phrase: a pattern edge that is a word character must sit on a word boundary.
inline std::regex compile_pattern(const std::string& pattern) {
    const auto folded = fold_and_collapse(pattern);
    std::string re;
    if (!folded.empty() && is_word_char(folded.front())) re += "\\b";
    for (char c : folded) {
        if (c == '*') {
            re += ".*?";
        } else if (c == '?') {
            re += ".";
        } else if (std::string_view("\\^$.|+()[]{}").find(c) != std::string_view::npos) {
            re += '\\';
            re += c;
        } else {
            re += c;
        }
    }
    if (!folded.empty() && is_word_char(folded.back())) re += "\\b";
    return std::regex(re, std::regex::ECMAScript | std::regex::optimize);
}

}  // namespace detail

class ConcernLexicon {
public:
    ConcernLexicon(std::vector<std::string> patterns, std::string version)
        : patterns_(std::move(patterns)), version_(std::move(version)) {
        if (patterns_.empty()) throw ConfigError("concern lexicon has no patterns");
        for (const auto& p : patterns_) {
            const auto folded = detail::fold_and_collapse(p);
            if (folded.find_first_not_of("*") == std::string::npos) {
                throw ConfigError("concern pattern '" + p + "' matches the empty string");
            }
            try {
                compiled_.push_back(detail::compile_pattern(p));
            } catch (const std::regex_error& e) {
                throw ConfigError("concern pattern '" + p + "' does not compile: " + e.what());
            }
        }
    }

    static ConcernLexicon shipped() {
        return {default_concern_patterns(), std::string(kDefaultLexiconVersion)};
    }

    /// One pattern per line, '#' starts a comment line, blank lines ignored.
    static ConcernLexicon from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open concern lexicon '" + path.string() + "'");
        std::vector<std::string> patterns;
        for (std::string line; std::getline(in, line);) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            const auto first = line.find_first_not_of(" \t");
            if (first == std::string::npos || line[first] == '#') continue;
            const auto last = line.find_last_not_of(" \t");
            patterns.push_back(line.substr(first, last - first + 1));
        }
        return {std::move(patterns), path.filename().string()};
    }

    [[nodiscard]] const std::vector<std::string>& patterns() const { return patterns_; }
    [[nodiscard]] const std::string& version() const { return version_; }
    [[nodiscard]] const std::vector<std::regex>& compiled() const { return compiled_; }

private:
    std::vector<std::string> patterns_;
    std::string version_;
    std::vector<std::regex> compiled_;
};

struct ConcernMatch {
    bool concern = false;
    std::vector<std::string> matched;
};

inline ConcernMatch detect_concern(std::string_view answer_text, const ConcernLexicon& lexicon) {
    const auto text = detail::fold_and_collapse(answer_text);
    ConcernMatch m;
    for (std::size_t i = 0; i < lexicon.compiled().size(); ++i) {
        if (std::regex_search(text, lexicon.compiled()[i])) {
            m.matched.push_back(lexicon.patterns()[i]);
        }
    }
    m.concern = !m.matched.empty();
    return m;
}

inline double concern_rate(const std::vector<bool>& flags) {
    if (flags.empty()) throw DataError("concern rate of an empty set");
    const auto hits = std::count(flags.begin(), flags.end(), true);
    return static_cast<double>(hits) / static_cast<double>(flags.size());
}

inline double concern_rate(std::span<const EvalRecord> records) {
    if (records.empty()) throw DataError("concern rate of an empty set");
    const auto hits = std::count_if(records.begin(), records.end(),
                                    [](const EvalRecord& r) { return r.concern; });
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Hard-example selection

enum class SelectionMode { concern_triggered, random_control };

inline std::string to_string(SelectionMode m) {
    return m == SelectionMode::concern_triggered ? "concern_triggered" : "random_control";
}

inline SelectionMode parse_selection_mode(std::string_view s) {
    if (s == "concern" || s == "concern_triggered") return SelectionMode::concern_triggered;
    if (s == "random" || s == "random_control") return SelectionMode::random_control;
    throw ConfigError("unknown selection mode '" + std::string(s) + "'");
}

struct Selection {
    SelectionMode mode = SelectionMode::concern_triggered;
    std::vector<std::string> ids;  // sorted
    double realized_fraction = 0.0;
    std::optional<std::string> warning;
};

namespace detail {

// Unbiased draw in [0, bound) from a 64-bit engine (rejection sampling), so
// subsets do not depend on the standard library's distribution algorithms.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v = 0;
    do {
        v = rng();
    } while (v >= limit);
    return v % bound;
}

}  // namespace detail

/// concern_triggered: every concern-flagged id. random_control: a seeded
/// uniform sample, over all ids, of the same size as the concern set.
/// Records are keyed by item id; duplicates (several strategies) collapse.
inline Selection select_hard(std::span<const EvalRecord> records, SelectionMode mode,
                             std::uint64_t seed) {
    std::set<std::string> all;
    std::set<std::string> flagged;
    for (const auto& r : records) {
        all.insert(r.item_id);
        if (r.concern) flagged.insert(r.item_id);
    }
    Selection s;
    s.mode = mode;
    if (flagged.empty()) {
        s.warning = "no concern-flagged records; selection is empty";
        return s;
    }
    if (mode == SelectionMode::concern_triggered) {
        s.ids.assign(flagged.begin(), flagged.end());
    } else {
        std::vector<std::string> pool(all.begin(), all.end());
        std::mt19937_64 rng(seed);
        const auto k = flagged.size();
        for (std::size_t i = 0; i < k; ++i) {
            const auto j = i + detail::bounded(rng, pool.size() - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        std::sort(pool.begin(), pool.end());
        s.ids = std::move(pool);
    }
    s.realized_fraction = static_cast<double>(s.ids.size()) / static_cast<double>(all.size());
    return s;
}

inline QAItem augment_with_knowledge(const QAItem& item) {
    if (!item.external_knowledge) {
        throw DataError("item '" + item.id + "' has no external_knowledge to augment with");
    }
    QAItem out = item;
    out.original_question = item.original_question.value_or(item.question);
    out.question = "Knowledge: " + *item.external_knowledge + "\n" + item.question;
    return out;
}

struct AugmentationOutcome {
    SelectionMode selection_mode = SelectionMode::concern_triggered;
    std::vector<std::string> selected_ids;
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    double absolute_improvement = 0.0;
    std::optional<double> relative_improvement;  // nullopt when accuracy_before == 0
};

/// Accuracy over the selected ids only, before and after augmentation.
inline AugmentationOutcome improvement(std::span<const EvalRecord> before,
                                       std::span<const EvalRecord> after,
                                       const Selection& selection) {
    if (selection.ids.empty()) throw DataError("improvement over an empty selection");
    const auto acc = [&](std::span<const EvalRecord> records, const char* which) {
        std::map<std::string, bool> correct;
        for (const auto& r : records) correct.emplace(r.item_id, r.correct);
        std::size_t hits = 0;
        for (const auto& id : selection.ids) {
            const auto it = correct.find(id);
            if (it == correct.end()) {
                throw DataError(std::string(which) + " records do not cover selected id '" + id +
                                "'");
            }
            hits += it->second ? 1 : 0;
        }
        return static_cast<double>(hits) / static_cast<double>(selection.ids.size());
    };
    AugmentationOutcome o;
    o.selection_mode = selection.mode;
    o.selected_ids = selection.ids;
    o.accuracy_before = acc(before, "before");
    o.accuracy_after = acc(after, "after");
    o.absolute_improvement = o.accuracy_after - o.accuracy_before;
    if (o.accuracy_before > 0.0) {
        o.relative_improvement = (o.accuracy_after - o.accuracy_before) / o.accuracy_before;
    }
    return o;
}

}  // namespace calibra
