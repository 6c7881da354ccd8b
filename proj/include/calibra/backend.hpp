#pragma once

// Completion backends: a scripted deterministic mock, an OpenAI-compatible
// HTTP client for /v1/completions, an append-only JSONL response cache, and
// the retrying complete() entry point every pipeline step goes through.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <openssl/evp.h>

#include <httplib.h>
#include <json.hpp>

#include "calibra/errors.hpp"

namespace calibra {

using json = nlohmann::json;

inline constexpr int kDefaultMaxTokens = 120;
inline constexpr double kDefaultTemperature = 1.2;
inline constexpr int kMaxTopLogprobs = 5;
inline constexpr const char* kApiKeyEnv = "CALIBRA_API_KEY";

struct CompletionRequest {
    std::string prompt;
    int max_tokens = kDefaultMaxTokens;
    double temperature = kDefaultTemperature;
    int top_logprobs = 0;
    std::optional<long long> seed;
    std::vector<std::string> stop;
};

enum class FinishReason { stop, length, error };

inline std::string to_string(FinishReason r) {
    switch (r) {
        case FinishReason::stop: return "stop";
        case FinishReason::length: return "length";
        case FinishReason::error: return "error";
    }
    return "error";
}

inline FinishReason parse_finish_reason(std::string_view s) {
    if (s == "stop") return FinishReason::stop;
    if (s == "length") return FinishReason::length;
    return FinishReason::error;
}

struct Completion {
    std::string text;
    std::vector<std::string> tokens;
    std::vector<double> token_logprobs;  // natural log, <= 0
    std::vector<std::map<std::string, double>> top_logprobs;
    FinishReason finish_reason = FinishReason::stop;
};

inline void validate(const CompletionRequest& r) {
    if (r.max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
    if (!(r.temperature >= 0.0) || !std::isfinite(r.temperature)) {
        throw ConfigError("temperature must be a finite value >= 0");
    }
    if (r.top_logprobs < 0 || r.top_logprobs > kMaxTopLogprobs) {
        throw ConfigError("top_logprobs must be in [0, 5]");
    }
}

/// Throws MalformedResponseError when the parallel arrays disagree.
inline void validate(const Completion& c) {
    if (c.tokens.size() != c.token_logprobs.size() || c.tokens.size() != c.top_logprobs.size()) {
        throw MalformedResponseError("completion has mismatched token / logprob array lengths");
    }
    std::string joined;
    for (std::size_t i = 0; i < c.tokens.size(); ++i) {
        joined += c.tokens[i];
        if (!c.top_logprobs[i].contains(c.tokens[i])) {
            throw MalformedResponseError("top_logprobs at position " + std::to_string(i) +
                                         " does not contain the chosen token");
        }
    }
    if (joined != c.text) {
        throw MalformedResponseError("completion tokens do not concatenate to its text");
    }
}

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const CompletionRequest& r) {
    json j;
    j["prompt"] = r.prompt;
    j["max_tokens"] = r.max_tokens;
    j["temperature"] = r.temperature;
    j["top_logprobs"] = r.top_logprobs;
    j["seed"] = r.seed ? json(*r.seed) : json(nullptr);
    j["stop"] = r.stop;
    return j;
}

inline CompletionRequest request_from_json(const json& j) {
    CompletionRequest r;
    r.prompt = j.at("prompt").get<std::string>();
    r.max_tokens = j.at("max_tokens").get<int>();
    r.temperature = j.at("temperature").get<double>();
    r.top_logprobs = j.at("top_logprobs").get<int>();
    if (j.contains("seed") && !j.at("seed").is_null()) r.seed = j.at("seed").get<long long>();
    if (j.contains("stop")) r.stop = j.at("stop").get<std::vector<std::string>>();
    return r;
}

inline json to_json(const Completion& c) {
    json j;
    j["text"] = c.text;
    j["tokens"] = c.tokens;
    j["token_logprobs"] = c.token_logprobs;
    j["top_logprobs"] = c.top_logprobs;
    j["finish_reason"] = to_string(c.finish_reason);
    return j;
}

inline Completion completion_from_json(const json& j) {
    Completion c;
    c.text = j.at("text").get<std::string>();
    c.tokens = j.at("tokens").get<std::vector<std::string>>();
    c.token_logprobs = j.at("token_logprobs").get<std::vector<double>>();
    c.top_logprobs = j.at("top_logprobs").get<std::vector<std::map<std::string, double>>>();
    c.finish_reason = parse_finish_reason(j.at("finish_reason").get<std::string>());
    return c;
}

// ---------------------------------------------------------------------------
// Canonical request hashing

inline std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("SHA-256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0x0F]);
    }
    return out;
}

/// Sorted keys, temperature rendered with six fixed decimals, -0 folded to 0.
inline std::string canonical_request(const CompletionRequest& r) {
    char temp[64];
    const double t = r.temperature == 0.0 ? 0.0 : r.temperature;
    std::snprintf(temp, sizeof temp, "%.6f", t);
    json j;  // nlohmann::json objects keep keys sorted
    j["max_tokens"] = r.max_tokens;
    j["prompt"] = r.prompt;
    j["seed"] = r.seed ? json(*r.seed) : json(nullptr);
    j["stop"] = r.stop;
    j["temperature"] = std::string(temp);
    j["top_logprobs"] = r.top_logprobs;
    return j.dump();
}

inline std::string request_hash(const CompletionRequest& r) {
    return sha256_hex(canonical_request(r));
}

// ---------------------------------------------------------------------------
// Backend interface

/// A completion source. Implementations must be safe to call concurrently.
class Backend {
public:
    virtual ~Backend() = default;

    [[nodiscard]] virtual Completion generate(const CompletionRequest& request) const = 0;

    /// Namespaces cache entries; two backends with the same id must answer
    /// identical requests identically.
    [[nodiscard]] virtual std::string id() const = 0;
};

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds base_delay{500};
    std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
        std::this_thread::sleep_for(d);
    };
};

/// Validates the request, calls the backend, and retries transport and
/// rate-limit failures with exponential backoff. Other errors propagate at once.
inline Completion complete(const Backend& backend, const CompletionRequest& request,
                           const RetryPolicy& retry = {}) {
    validate(request);
    const int attempts = std::max(1, retry.max_attempts);
    for (int attempt = 1;; ++attempt) {
        try {
            Completion c = backend.generate(request);
            validate(c);
            return c;
        } catch (const BackendError& e) {
            if (!e.retryable() || attempt >= attempts) throw;
            if (retry.sleep) retry.sleep(retry.base_delay * (1 << (attempt - 1)));
        }
    }
}

/// Counts generate() calls reaching the wrapped backend.
class CountingBackend : public Backend {
public:
    explicit CountingBackend(std::shared_ptr<const Backend> inner) : inner_(std::move(inner)) {}

    Completion generate(const CompletionRequest& request) const override {
        calls_.fetch_add(1, std::memory_order_relaxed);
        return inner_->generate(request);
    }
    std::string id() const override { return inner_->id(); }

    [[nodiscard]] std::size_t calls() const { return calls_.load(); }
    void reset() { calls_.store(0); }

private:
    std::shared_ptr<const Backend> inner_;
    mutable std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Mock backend

/// Whitespace-attached tokenization: each token is a run of whitespace followed
/// by a run of non-whitespace, e.g. " English", " and", " Creole".
inline std::vector<std::string> simple_tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    bool seen_word = false;
    for (char ch : text) {
        const bool space = ch == ' ' || ch == '\n' || ch == '\t' || ch == '\r';
        if (space && seen_word) {
            tokens.push_back(std::move(cur));
            cur.clear();
            seen_word = false;
        }
        cur.push_back(ch);
        if (!space) seen_word = true;
    }
    if (!cur.empty()) {
        if (!seen_word && !tokens.empty()) {
            tokens.back() += cur;
        } else {
            tokens.push_back(std::move(cur));
        }
    }
    return tokens;
}

struct ScriptedResponse {
    std::string text;
    std::optional<std::vector<std::string>> tokens;
    std::optional<std::vector<double>> logprobs;
    std::optional<std::vector<std::map<std::string, double>>> top_logprobs;
};

enum class MatchKind { exact, prefix };

struct ScriptRule {
    MatchKind kind = MatchKind::exact;
    std::string prompt;
    // Selected by seed modulo size; requests without a seed get the first.
    std::vector<ScriptedResponse> responses;
};

enum class FallbackMode { error, fixed_text };

struct MockScript {
    std::vector<ScriptRule> rules;
    FallbackMode fallback = FallbackMode::error;
    std::string fallback_text = "UNKNOWN";
};

inline ScriptedResponse scripted_response_from_json(const json& j) {
    ScriptedResponse r;
    if (j.is_string()) {
        r.text = j.get<std::string>();
        return r;
    }
    r.text = j.at("text").get<std::string>();
    if (j.contains("tokens")) r.tokens = j.at("tokens").get<std::vector<std::string>>();
    if (j.contains("logprobs")) r.logprobs = j.at("logprobs").get<std::vector<double>>();
    if (j.contains("top_logprobs")) {
        r.top_logprobs = j.at("top_logprobs").get<std::vector<std::map<std::string, double>>>();
    }
    return r;
}

/// Script file layout:
///   {"fallback": "error" | {"text": "UNKNOWN"},
///    "rules": [{"match": "exact"|"prefix", "prompt": "...",
///               "response": <resp>} | {..., "responses": [<resp>, ...]}]}
/// where <resp> is a string or {"text", "tokens"?, "logprobs"?, "top_logprobs"?}.
inline MockScript mock_script_from_json(const json& j) {
    MockScript script;
    try {
        if (j.contains("fallback")) {
            const auto& fb = j.at("fallback");
            if (fb.is_string() && fb.get<std::string>() == "error") {
                script.fallback = FallbackMode::error;
            } else if (fb.is_object()) {
                script.fallback = FallbackMode::fixed_text;
                script.fallback_text = fb.value("text", std::string("UNKNOWN"));
            } else {
                throw ConfigError("mock script: fallback must be \"error\" or {\"text\": ...}");
            }
        }
        for (const auto& rj : j.at("rules")) {
            ScriptRule rule;
            const auto match = rj.value("match", std::string("exact"));
            if (match == "exact") {
                rule.kind = MatchKind::exact;
            } else if (match == "prefix") {
                rule.kind = MatchKind::prefix;
            } else {
                throw ConfigError("mock script: unknown match kind '" + match + "'");
            }
            rule.prompt = rj.at("prompt").get<std::string>();
            if (rj.contains("responses")) {
                for (const auto& resp : rj.at("responses")) {
                    rule.responses.push_back(scripted_response_from_json(resp));
                }
            } else {
                rule.responses.push_back(scripted_response_from_json(rj.at("response")));
            }
            script.rules.push_back(std::move(rule));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("mock script: ") + e.what());
    }
    return script;
}

/// Pure scripted backend: the output depends only on the request. Exact rules
/// take precedence over prefix rules; the rule set is rejected at construction
/// if two prefix rules could both match one prompt.
class MockBackend : public Backend {
public:
    explicit MockBackend(MockScript script) : fallback_(script.fallback),
                                              fallback_text_(std::move(script.fallback_text)) {
        for (auto& rule : script.rules) {
            if (rule.responses.empty()) {
                throw ConfigError("mock script: rule for prompt '" + rule.prompt +
                                  "' has no responses");
            }
            std::vector<Completion> prepared;
            for (const auto& r : rule.responses) prepared.push_back(prepare(r, rule.prompt));
            if (rule.kind == MatchKind::exact) {
                if (!exact_.emplace(rule.prompt, std::move(prepared)).second) {
                    throw ConfigError("mock script: duplicate exact rule for prompt '" +
                                      rule.prompt + "'");
                }
            } else {
                prefix_.emplace_back(rule.prompt, std::move(prepared));
            }
        }
        for (std::size_t a = 0; a < prefix_.size(); ++a) {
            for (std::size_t b = 0; b < prefix_.size(); ++b) {
                if (a == b) continue;
                if (prefix_[b].first.starts_with(prefix_[a].first)) {
                    throw ConfigError("mock script: ambiguous prefix rules '" + prefix_[a].first +
                                      "' and '" + prefix_[b].first + "'");
                }
            }
        }
    }

    Completion generate(const CompletionRequest& request) const override {
        const std::vector<Completion>* choices = nullptr;
        if (const auto it = exact_.find(request.prompt); it != exact_.end()) {
            choices = &it->second;
        } else {
            for (const auto& [prefix, completions] : prefix_) {
                if (request.prompt.starts_with(prefix)) {
                    choices = &completions;
                    break;
                }
            }
        }
        if (choices == nullptr) {
            if (fallback_ == FallbackMode::error) {
                throw CapabilityError("mock backend: no script rule matches prompt:\n" +
                                      request.prompt);
            }
            static const std::string empty;
            return truncate(prepare({fallback_text_, {}, {}, {}}, empty), request);
        }
        const auto seed = request.seed.value_or(0);
        const auto size = static_cast<long long>(choices->size());
        const auto index = static_cast<std::size_t>(((seed % size) + size) % size);
        return truncate((*choices)[index], request);
    }

    std::string id() const override { return "mock"; }

    /// Applies max_tokens and stop sequences the way a server would.
    static Completion truncate(const Completion& full, const CompletionRequest& request) {
        std::size_t cut = full.text.size();
        FinishReason reason = FinishReason::stop;
        for (const auto& s : request.stop) {
            if (s.empty()) continue;
            const auto pos = full.text.find(s);
            if (pos != std::string::npos && pos < cut) cut = pos;
        }
        std::size_t token_limit_end = 0;
        const auto max_tokens = static_cast<std::size_t>(request.max_tokens);
        for (std::size_t i = 0; i < full.tokens.size() && i < max_tokens; ++i) {
            token_limit_end += full.tokens[i].size();
        }
        if (full.tokens.size() > max_tokens && token_limit_end < cut) {
            cut = token_limit_end;
            reason = FinishReason::length;
        }
        if (cut == full.text.size()) return full;

        Completion out;
        out.finish_reason = reason;
        out.text = full.text.substr(0, cut);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < full.tokens.size() && offset < cut; ++i) {
            std::string token = full.tokens[i];
            auto top = full.top_logprobs[i];
            if (offset + token.size() > cut) {
                const double lp = full.token_logprobs[i];
                top.erase(token);
                token.resize(cut - offset);
                top[token] = lp;
            }
            offset += full.tokens[i].size();
            out.tokens.push_back(std::move(token));
            out.token_logprobs.push_back(full.token_logprobs[i]);
            out.top_logprobs.push_back(std::move(top));
        }
        return out;
    }

private:
    static Completion prepare(const ScriptedResponse& r, const std::string& prompt) {
        Completion c;
        c.text = r.text;
        c.tokens = r.tokens.value_or(simple_tokenize(r.text));
        const auto where = [&] { return " (script rule '" + prompt + "')"; };
        if (r.logprobs) {
            if (r.logprobs->size() != c.tokens.size()) {
                throw ConfigError("mock script: " + std::to_string(r.logprobs->size()) +
                                  " logprobs for " + std::to_string(c.tokens.size()) + " tokens" +
                                  where());
            }
            c.token_logprobs = *r.logprobs;
        } else {
            c.token_logprobs.assign(c.tokens.size(), 0.0);
        }
        for (double lp : c.token_logprobs) {
            if (lp > 0.0 || std::isnan(lp)) {
                throw ConfigError("mock script: logprob must be <= 0" + where());
            }
        }
        if (r.top_logprobs) {
            if (r.top_logprobs->size() != c.tokens.size()) {
                throw ConfigError("mock script: top_logprobs length mismatch" + where());
            }
            c.top_logprobs = *r.top_logprobs;
        } else {
            c.top_logprobs.resize(c.tokens.size());
        }
        for (std::size_t i = 0; i < c.tokens.size(); ++i) {
            c.top_logprobs[i].emplace(c.tokens[i], c.token_logprobs[i]);
        }
        try {
            validate(c);
        } catch (const MalformedResponseError& e) {
            throw ConfigError(std::string("mock script: ") + e.what() + where());
        }
        return c;
    }

    std::unordered_map<std::string, std::vector<Completion>> exact_;
    std::vector<std::pair<std::string, std::vector<Completion>>> prefix_;
    FallbackMode fallback_;
    std::string fallback_text_;
};

inline std::shared_ptr<MockBackend> mock_from_script(MockScript script) {
    return std::make_shared<MockBackend>(std::move(script));
}

inline std::shared_ptr<MockBackend> mock_from_script_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open mock script '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("mock script '" + path.string() + "': " + e.what());
    }
    return mock_from_script(mock_script_from_json(j));
}

// ---------------------------------------------------------------------------
// HTTP backend (OpenAI-compatible /v1/completions)

/// Request body for POST {base_url}/v1/completions. The seed is not sent.
inline json to_wire_body(const std::string& model, const CompletionRequest& r) {
    json body;
    body["model"] = model;
    body["prompt"] = r.prompt;
    body["max_tokens"] = r.max_tokens;
    body["temperature"] = r.temperature;
    body["logprobs"] = r.top_logprobs;
    if (!r.stop.empty()) body["stop"] = r.stop;
    return body;
}

/// Reads choices[0] of a completions response. Per-token logprobs are
/// mandatory; top-K alternatives are mandatory when K > 0.
inline Completion parse_wire_response(const json& body, int top_logprobs) {
    try {
        const auto& choices = body.at("choices");
        if (!choices.is_array() || choices.empty()) {
            throw MalformedResponseError("response has no choices");
        }
        const auto& choice = choices.at(0);
        Completion c;
        c.text = choice.at("text").get<std::string>();
        if (choice.contains("finish_reason") && choice.at("finish_reason").is_string()) {
            c.finish_reason = parse_finish_reason(choice.at("finish_reason").get<std::string>());
        }
        if (!choice.contains("logprobs") || choice.at("logprobs").is_null()) {
            throw CapabilityError(
                "backend response lacks 'logprobs'; token-level confidence extraction needs a "
                "completions endpoint that returns per-token log-probabilities");
        }
        const auto& lp = choice.at("logprobs");
        c.tokens = lp.at("tokens").get<std::vector<std::string>>();
        for (const auto& v : lp.at("token_logprobs")) {
            if (!v.is_number()) throw MalformedResponseError("non-numeric token logprob");
            c.token_logprobs.push_back(v.get<double>());
        }
        const bool has_top = lp.contains("top_logprobs") && lp.at("top_logprobs").is_array();
        if (top_logprobs > 0 && !has_top) {
            throw CapabilityError("backend response lacks 'top_logprobs' although " +
                                  std::to_string(top_logprobs) +
                                  " alternatives were requested (needed by p_true)");
        }
        if (has_top) {
            for (const auto& pos : lp.at("top_logprobs")) {
                std::map<std::string, double> alts;
                if (pos.is_object()) {
                    for (const auto& [tok, v] : pos.items()) alts[tok] = v.get<double>();
                }
                c.top_logprobs.push_back(std::move(alts));
            }
        } else {
            c.top_logprobs.resize(c.tokens.size());
        }
        if (c.tokens.size() != c.token_logprobs.size() ||
            c.tokens.size() != c.top_logprobs.size()) {
            throw MalformedResponseError("logprobs arrays have different lengths");
        }
        // Servers may omit the sampled token from its own alternatives.
        for (std::size_t i = 0; i < c.tokens.size(); ++i) {
            c.top_logprobs[i].emplace(c.tokens[i], c.token_logprobs[i]);
        }
        return c;
    } catch (const json::exception& e) {
        throw MalformedResponseError(std::string("malformed completions response: ") + e.what());
    }
}

struct HttpBackendOptions {
    std::string base_url;
    std::string model;
    std::optional<std::string> api_key;  // defaults to $CALIBRA_API_KEY
    std::chrono::seconds timeout{60};
    double max_requests_per_second = 0.0;  // 0 = unlimited
};

class HttpBackend : public Backend {
public:
    explicit HttpBackend(HttpBackendOptions options) : options_(std::move(options)) {
        if (options_.base_url.empty()) throw ConfigError("http backend needs a base URL");
        if (options_.model.empty()) throw ConfigError("http backend needs a model id");
        if (!options_.api_key) {
            if (const char* env = std::getenv(kApiKeyEnv); env != nullptr && *env != '\0') {
                options_.api_key = env;
            }
        }
        // Split "scheme://host[:port]/path" into host part and path prefix.
        const auto scheme_end = options_.base_url.find("://");
        const auto path_start = options_.base_url.find(
            '/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
        host_ = options_.base_url.substr(0, path_start);
        path_prefix_ = path_start == std::string::npos ? "" : options_.base_url.substr(path_start);
        while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
    }

    Completion generate(const CompletionRequest& request) const override {
        throttle();
        httplib::Client client(host_);
        client.set_connection_timeout(options_.timeout);
        client.set_read_timeout(options_.timeout);
        client.set_write_timeout(options_.timeout);
        httplib::Headers headers;
        if (options_.api_key) headers.emplace("Authorization", "Bearer " + *options_.api_key);
        const auto body = to_wire_body(options_.model, request).dump();
        const auto res =
            client.Post(path_prefix_ + "/v1/completions", headers, body, "application/json");
        if (!res) {
            throw TransportError("POST " + options_.base_url + "/v1/completions failed: " +
                                 httplib::to_string(res.error()));
        }
        if (res->status == 429) throw RateLimitError("rate limited (HTTP 429): " + res->body);
        if (res->status >= 500) {
            throw TransportError("HTTP " + std::to_string(res->status) + ": " + res->body);
        }
        if (res->status < 200 || res->status >= 300) {
            throw BackendError("HTTP " + std::to_string(res->status) + ": " + res->body);
        }
        json parsed;
        try {
            parsed = json::parse(res->body);
        } catch (const json::exception& e) {
            throw MalformedResponseError(std::string("response is not JSON: ") + e.what());
        }
        return parse_wire_response(parsed, request.top_logprobs);
    }

    std::string id() const override { return "http:" + options_.base_url + "|" + options_.model; }

private:
    void throttle() const {
        if (options_.max_requests_per_second <= 0.0) return;
        const auto interval = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
            std::chrono::duration<double>(1.0 / options_.max_requests_per_second));
        std::chrono::steady_clock::time_point slot;
        {
            std::lock_guard lock(throttle_mutex_);
            const auto now = std::chrono::steady_clock::now();
            slot = std::max(now, next_slot_);
            next_slot_ = slot + interval;
        }
        std::this_thread::sleep_until(slot);
    }

    HttpBackendOptions options_;
    std::string host_;
    std::string path_prefix_;
    mutable std::mutex throttle_mutex_;
    mutable std::chrono::steady_clock::time_point next_slot_{};
};

inline std::shared_ptr<HttpBackend> http_backend(HttpBackendOptions options) {
    return std::make_shared<HttpBackend>(std::move(options));
}

// ---------------------------------------------------------------------------
// Response cache

struct CacheEntry {
    std::string request_hash;
    std::string backend_id;
    CompletionRequest request;
    Completion completion;
    std::string created_at;  // ISO-8601 UTC
};

inline json to_json(const CacheEntry& e) {
    json j;
    j["request_hash"] = e.request_hash;
    j["backend"] = e.backend_id;
    j["request"] = to_json(e.request);
    j["completion"] = to_json(e.completion);
    j["created_at"] = e.created_at;
    return j;
}

inline CacheEntry cache_entry_from_json(const json& j) {
    CacheEntry e;
    e.request_hash = j.at("request_hash").get<std::string>();
    e.backend_id = j.at("backend").get<std::string>();
    e.request = request_from_json(j.at("request"));
    e.completion = completion_from_json(j.at("completion"));
    e.created_at = j.value("created_at", std::string());
    return e;
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Append-only JSONL cache keyed by (backend id, request hash). Existing
/// entries are loaded at construction; a torn final line (crash mid-write) is
/// skipped, any other unreadable line is a data error.
class ResponseCache {
public:
    explicit ResponseCache(std::filesystem::path path) : path_(std::move(path)) {
        if (std::filesystem::exists(path_)) load();
        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        out_.open(path_, std::ios::app | std::ios::binary);
        if (!out_) throw ConfigError("cannot open cache file '" + path_.string() + "'");
    }

    std::optional<Completion> find(const std::string& backend_id,
                                   const CompletionRequest& request) const {
        const auto key = backend_id + '\n' + request_hash(request);
        std::shared_lock lock(mutex_);
        if (const auto it = entries_.find(key); it != entries_.end()) return it->second;
        return std::nullopt;
    }

    void store(const std::string& backend_id, const CompletionRequest& request,
               const Completion& completion) {
        CacheEntry entry{request_hash(request), backend_id, request, completion, utc_timestamp()};
        const auto line = to_json(entry).dump();
        std::unique_lock lock(mutex_);
        const auto key = backend_id + '\n' + entry.request_hash;
        if (entries_.contains(key)) return;
        out_ << line << '\n';
        out_.flush();
        entries_.emplace(key, completion);
    }

    [[nodiscard]] std::size_t size() const {
        std::shared_lock lock(mutex_);
        return entries_.size();
    }

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }

private:
    void load() {
        std::ifstream in(path_, std::ios::binary);
        std::vector<std::string> lines;
        for (std::string line; std::getline(in, line);) lines.push_back(std::move(line));
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (lines[i].empty()) continue;
            try {
                const auto entry = cache_entry_from_json(json::parse(lines[i]));
                entries_.emplace(entry.backend_id + '\n' + entry.request_hash, entry.completion);
            } catch (const json::exception& e) {
                if (i + 1 == lines.size()) break;
                throw DataError("cache '" + path_.string() + "' line " + std::to_string(i + 1) +
                                ": " + e.what());
            }
        }
    }

    std::filesystem::path path_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::string, Completion> entries_;
    std::ofstream out_;
};

/// Serves cached completions and records fresh ones.
class CachingBackend : public Backend {
public:
    CachingBackend(std::shared_ptr<const Backend> inner, std::shared_ptr<ResponseCache> cache)
        : inner_(std::move(inner)), cache_(std::move(cache)) {}

    Completion generate(const CompletionRequest& request) const override {
        const auto backend_id = inner_->id();
        if (auto hit = cache_->find(backend_id, request)) {
            hits_.fetch_add(1, std::memory_order_relaxed);
            return *std::move(hit);
        }
        Completion c = inner_->generate(request);
        validate(c);
        cache_->store(backend_id, request, c);
        return c;
    }

    std::string id() const override { return inner_->id(); }

    [[nodiscard]] std::size_t hits() const { return hits_.load(); }

private:
    std::shared_ptr<const Backend> inner_;
    std::shared_ptr<ResponseCache> cache_;
    mutable std::atomic<std::size_t> hits_{0};
};

}  // namespace calibra
