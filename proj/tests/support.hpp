#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "calibra/calibra.hpp"

namespace testing_support {

inline std::filesystem::path data_dir() { return std::filesystem::path(CALIBRA_TEST_DATA); }

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& body) {
    std::ofstream(p, std::ios::binary) << body;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() /
                ("calibra-" + tag + "-" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    [[nodiscard]] const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

// Small generator toolkit for property tests.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
    double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }

    // Confidences drawn from a mix of interior values, bucket edges and the
    // interval endpoints so boundary rules get exercised.
    double confidence(int num_buckets) {
        switch (integer(0, 5)) {
            case 0: return 0.0;
            case 1: return 1.0;
            case 2: return static_cast<double>(integer(0, num_buckets)) / num_buckets;
            default: return real(0.0, 1.0);
        }
    }

    std::vector<calibra::ScoredPrediction> predictions(int n, int num_buckets) {
        std::vector<calibra::ScoredPrediction> out;
        for (int i = 0; i < n; ++i) {
            out.push_back({"r" + std::to_string(i), confidence(num_buckets), coin()});
        }
        return out;
    }

    std::string text(int max_len) {
        static const std::vector<std::string> atoms = {
            "a", "B", "the", " ", "  ", "\t", "\n", ".", ",", "!", "?", "'", "\"", "-", "An",
            "THE", "yes", "No", "true", "x", "42", "\xc3\xa9", "\xe2\x80\x94", "\xe3\x80\x82",
            "\xef\xbc\x81", "\xc2\xa0", "\xff", "\xe2\x80", "Cr\xc3\xa9ole", "(", ")", "theatre"};
        std::string s;
        const int n = integer(0, max_len);
        for (int i = 0; i < n; ++i) s += atoms[static_cast<std::size_t>(integer(0, static_cast<int>(atoms.size()) - 1))];
        return s;
    }

    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

// Direct-summation reference for ECE: for each bucket, scan every record and
// test membership against the boundary rule, independent of bucketize().
inline double reference_ece(const std::vector<calibra::ScoredPrediction>& ps, int m) {
    double total = 0.0;
    for (int b = 0; b < m; ++b) {
        const double lo = static_cast<double>(b) / m;
        const double hi = static_cast<double>(b + 1) / m;
        double conf = 0.0;
        double hits = 0.0;
        double count = 0.0;
        for (const auto& p : ps) {
            const bool member = b == m - 1 ? (p.confidence >= lo && p.confidence <= 1.0)
                                           : (p.confidence >= lo && p.confidence < hi);
            if (!member) continue;
            conf += p.confidence;
            hits += p.correct ? 1.0 : 0.0;
            count += 1.0;
        }
        if (count > 0) total += std::abs(hits - conf);  // |B|*|acc-conf| = |hits-sum conf|
    }
    return total / static_cast<double>(ps.size());
}

inline double reference_macro_ce(const std::vector<calibra::ScoredPrediction>& ps) {
    double pos = 0.0;
    double neg = 0.0;
    int np = 0;
    int nn = 0;
    for (const auto& p : ps) {
        if (p.correct) {
            pos += 1.0 - p.confidence;
            ++np;
        } else {
            neg += p.confidence;
            ++nn;
        }
    }
    if (np == 0) return neg / nn;
    if (nn == 0) return pos / np;
    return (pos / np + neg / nn) / 2.0;
}

}  // namespace testing_support
