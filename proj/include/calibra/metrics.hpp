#pragma once

// Calibration error computation: equal-width bucketing, ECE, instance-level
// errors (ICE_pos / ICE_neg), MacroCE, the over-confidence gap, wins tables,
// and histogram / KDE curves of confidence distributions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calibra/errors.hpp"
#include "calibra/qa.hpp"

namespace calibra {

inline constexpr int kDefaultNumBuckets = 10;

/// One scored prediction, independent of which extraction method produced it.
struct ScoredPrediction {
    std::string id;
    double confidence = 0.0;
    bool correct = false;
};

struct Bucket {
    int index = 0;
    double lower = 0.0;
    double upper = 0.0;
    std::vector<std::string> member_ids;
    double avg_confidence = 0.0;
    double accuracy = 0.0;
    double confidence_sum = 0.0;
    std::size_t hits = 0;
};

enum class DegenerateFlag { none, no_correct, no_incorrect };

inline std::string to_string(DegenerateFlag f) {
    switch (f) {
        case DegenerateFlag::none: return "none";
        case DegenerateFlag::no_correct: return "no_correct";
        case DegenerateFlag::no_incorrect: return "no_incorrect";
    }
    return "none";
}

struct MacroCE {
    double value = 0.0;
    DegenerateFlag degenerate = DegenerateFlag::none;
};

struct ConfidenceGap {
    double avg_confidence = 0.0;
    double accuracy = 0.0;
    double gap = 0.0;  // > 0 means over-confident
};

struct CalibrationSummary {
    double ece = 0.0;  // NaN when undefined (out-of-range confidences, no clamping)
    double ice_pos = 0.0;
    double ice_neg = 0.0;
    double macro_ce = 0.0;
    std::size_t n = 0;
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    double avg_confidence = 0.0;
    double accuracy = 0.0;
    std::vector<Bucket> buckets;
    DegenerateFlag degenerate_flag = DegenerateFlag::none;
    std::size_t out_of_range = 0;
};

inline bool in_unit_interval(double c) { return c >= 0.0 && c <= 1.0; }

/// Bucket m covers [m/M, (m+1)/M); the last bucket is closed at 1.0.
inline int bucket_index(double confidence, int num_buckets) {
    auto m = std::clamp(static_cast<int>(std::floor(confidence * num_buckets)), 0, num_buckets - 1);
    // Settle rounding at the edges against the edges themselves.
    const auto lower = [&](int k) { return static_cast<double>(k) / num_buckets; };
    while (m > 0 && confidence < lower(m)) --m;
    while (m < num_buckets - 1 && confidence >= lower(m + 1)) ++m;
    return m;
}

/// Equal-width bucketing over [0,1]. With clamp=false an out-of-range
/// confidence is an error naming the offending record; with clamp=true the
/// value is clamped into [0,1] first.
inline std::vector<Bucket> bucketize(std::span<const ScoredPrediction> predictions,
                                     int num_buckets, bool clamp = false) {
    if (num_buckets < 1) throw ConfigError("number of buckets must be >= 1");
    std::vector<Bucket> buckets(static_cast<std::size_t>(num_buckets));
    std::vector<double> conf_sum(buckets.size(), 0.0);
    std::vector<std::size_t> hits(buckets.size(), 0);
    for (int m = 0; m < num_buckets; ++m) {
        auto& b = buckets[static_cast<std::size_t>(m)];
        b.index = m;
        b.lower = static_cast<double>(m) / num_buckets;
        b.upper = static_cast<double>(m + 1) / num_buckets;
    }
    for (const auto& p : predictions) {
        double c = p.confidence;
        if (std::isnan(c)) throw DataError("record '" + p.id + "': confidence is NaN");
        if (!in_unit_interval(c)) {
            if (!clamp) {
                throw DataError("record '" + p.id + "': confidence " + std::to_string(c) +
                                " outside [0,1]");
            }
            c = std::clamp(c, 0.0, 1.0);
        }
        const auto m = static_cast<std::size_t>(bucket_index(c, num_buckets));
        buckets[m].member_ids.push_back(p.id);
        conf_sum[m] += c;
        hits[m] += p.correct ? 1 : 0;
    }
    for (std::size_t m = 0; m < buckets.size(); ++m) {
        const auto size = buckets[m].member_ids.size();
        buckets[m].confidence_sum = conf_sum[m];
        buckets[m].hits = hits[m];
        if (size == 0) continue;
        buckets[m].avg_confidence = conf_sum[m] / static_cast<double>(size);
        buckets[m].accuracy = static_cast<double>(hits[m]) / static_cast<double>(size);
    }
    return buckets;
}

/// ECE = (1/N) * sum_m |B_m| * |Acc(B_m) - Conf(B_m)|, summed as |hits_m - conf_sum_m|.
inline double ece(std::span<const ScoredPrediction> predictions, int num_buckets,
                  bool clamp = false) {
    if (predictions.empty()) throw DataError("ECE of an empty record set");
    const auto buckets = bucketize(predictions, num_buckets, clamp);
    double total = 0.0;
    for (const auto& b : buckets) {
        total += std::abs(static_cast<double>(b.hits) - b.confidence_sum);
    }
    return total / static_cast<double>(predictions.size());
}

/// Mean of (1 - confidence) over correct predictions; nullopt if there are none.
inline std::optional<double> ice_pos(std::span<const ScoredPrediction> predictions) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : predictions) {
        if (!p.correct) continue;
        sum += 1.0 - p.confidence;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

/// Mean confidence over incorrect predictions; nullopt if there are none.
inline std::optional<double> ice_neg(std::span<const ScoredPrediction> predictions) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : predictions) {
        if (p.correct) continue;
        sum += p.confidence - 0.0;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

/// (ICE_pos + ICE_neg) / 2. When one class is empty the other ICE is returned
/// with the degenerate flag naming the missing class.
inline MacroCE macro_ce(std::span<const ScoredPrediction> predictions) {
    if (predictions.empty()) throw DataError("MacroCE of an empty record set");
    const auto pos = ice_pos(predictions);
    const auto neg = ice_neg(predictions);
    if (pos && neg) return {(*pos + *neg) / 2.0, DegenerateFlag::none};
    if (pos) return {*pos, DegenerateFlag::no_incorrect};
    return {*neg, DegenerateFlag::no_correct};
}

inline ConfidenceGap confidence_gap(std::span<const ScoredPrediction> predictions) {
    if (predictions.empty()) throw DataError("confidence gap of an empty record set");
    double conf = 0.0;
    std::size_t hits = 0;
    for (const auto& p : predictions) {
        conf += p.confidence;
        hits += p.correct ? 1 : 0;
    }
    const auto n = static_cast<double>(predictions.size());
    ConfidenceGap g;
    g.avg_confidence = conf / n;
    g.accuracy = static_cast<double>(hits) / n;
    g.gap = g.avg_confidence - g.accuracy;
    return g;
}

/// Projects records onto one extraction method. Throws if any record lacks it.
inline std::vector<ScoredPrediction> predictions_for(std::span<const EvalRecord> records,
                                                     const std::string& method) {
    std::vector<ScoredPrediction> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        const auto it = r.confidences.find(method);
        if (it == r.confidences.end()) {
            throw DataError("record '" + r.item_id + "' has no confidence for method '" + method +
                            "'");
        }
        out.push_back({r.item_id, it->second, r.correct});
    }
    return out;
}

inline double ece(std::span<const EvalRecord> records, const std::string& method, int num_buckets,
                  bool clamp = false) {
    if (records.empty()) throw DataError("ECE of an empty record set");
    const auto p = predictions_for(records, method);
    return ece(std::span<const ScoredPrediction>(p), num_buckets, clamp);
}

inline MacroCE macro_ce(std::span<const EvalRecord> records, const std::string& method) {
    if (records.empty()) throw DataError("MacroCE of an empty record set");
    const auto p = predictions_for(records, method);
    return macro_ce(std::span<const ScoredPrediction>(p));
}

inline ConfidenceGap confidence_gap(std::span<const EvalRecord> records, const std::string& method) {
    if (records.empty()) throw DataError("confidence gap of an empty record set");
    const auto p = predictions_for(records, method);
    return confidence_gap(std::span<const ScoredPrediction>(p));
}

/// Everything the report needs for one (strategy, extraction) cell.
/// Out-of-range confidences leave ECE undefined (NaN, empty buckets) rather
/// than aborting, so unclamped runs still report MacroCE.
inline CalibrationSummary summarize(std::span<const ScoredPrediction> predictions,
                                    int num_buckets) {
    if (predictions.empty()) throw DataError("cannot summarize an empty record set");
    CalibrationSummary s;
    s.n = predictions.size();
    for (const auto& p : predictions) {
        if (p.correct) {
            ++s.n_pos;
        } else {
            ++s.n_neg;
        }
        if (!in_unit_interval(p.confidence)) ++s.out_of_range;
    }
    const auto gap = confidence_gap(predictions);
    s.avg_confidence = gap.avg_confidence;
    s.accuracy = gap.accuracy;
    if (s.out_of_range == 0) {
        s.buckets = bucketize(predictions, num_buckets);
        double total = 0.0;
        for (const auto& b : s.buckets) {
            total += static_cast<double>(b.member_ids.size()) *
                     std::abs(b.accuracy - b.avg_confidence);
        }
        s.ece = total / static_cast<double>(s.n);
    } else {
        s.ece = std::numeric_limits<double>::quiet_NaN();
    }
    s.ice_pos = ice_pos(predictions).value_or(std::numeric_limits<double>::quiet_NaN());
    s.ice_neg = ice_neg(predictions).value_or(std::numeric_limits<double>::quiet_NaN());
    const auto mce = macro_ce(predictions);
    s.macro_ce = mce.value;
    s.degenerate_flag = mce.degenerate;
    return s;
}

/// rows: prompting method -> (extraction method -> error). For each row the
/// extraction method with the strictly lowest error gets one win; ties award
/// nothing. Every extraction method appears in the result.
inline std::map<std::string, int> wins_table(
    const std::map<std::string, std::map<std::string, double>>& rows) {
    if (rows.empty()) throw DataError("wins table needs at least one row");
    const auto& first = rows.begin()->second;
    if (first.empty()) throw DataError("wins table rows must be non-empty");
    std::map<std::string, int> wins;
    for (const auto& [column, _] : first) wins[column] = 0;
    for (const auto& [row_name, row] : rows) {
        if (row.size() != first.size() ||
            !std::equal(row.begin(), row.end(), first.begin(),
                        [](const auto& a, const auto& b) { return a.first == b.first; })) {
            throw DataError("wins table is not rectangular at row '" + row_name + "'");
        }
        const auto best = std::min_element(
            row.begin(), row.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
        const auto ties = std::count_if(row.begin(), row.end(), [&](const auto& cell) {
            return cell.second == best->second;
        });
        if (ties == 1) ++wins[best->first];
    }
    return wins;
}

// ---------------------------------------------------------------------------
// Confidence distributions

enum class CurveKind { histogram, kde };

inline std::string to_string(CurveKind k) { return k == CurveKind::kde ? "kde" : "histogram"; }

struct CurvePoint {
    double x = 0.0;
    double density = 0.0;
};

struct DistributionCurve {
    std::vector<CurvePoint> points;
    double bandwidth = 0.0;  // bin width for histograms
    CurveKind kind = CurveKind::histogram;
    bool fallback_bandwidth = false;  // single distinct value: fixed 0.05
    double mass_outside_unit = 0.0;   // kde mass lying outside [0,1]
    std::size_t samples = 0;
};

inline constexpr double kFallbackBandwidth = 0.05;

namespace detail {

// Linear-interpolation quantile of sorted data (the common "type 7").
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double gaussian_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace detail

/// Silverman's rule of thumb: 0.9 * min(sigma, IQR/1.34) * n^(-1/5).
/// Falls back to sigma when the IQR is zero. Returns nullopt when the sample
/// has a single distinct value.
inline std::optional<double> silverman_bandwidth(std::span<const double> samples) {
    if (samples.size() < 2) return std::nullopt;
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    if (sorted.front() == sorted.back()) return std::nullopt;
    const double n = static_cast<double>(sorted.size());
    double mean = 0.0;
    for (double v : sorted) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : sorted) var += (v - mean) * (v - mean);
    const double sigma = std::sqrt(var / (n - 1.0));
    const double iqr = detail::quantile_sorted(sorted, 0.75) - detail::quantile_sorted(sorted, 0.25);
    double spread = std::min(sigma, iqr / 1.34);
    if (spread <= 0.0) spread = sigma;
    return 0.9 * spread * std::pow(n, -0.2);
}

/// histogram: grid_size equal-width bins over [0,1], density = count / (n * width),
/// x = bin centre. kde: Gaussian kernel with Silverman bandwidth evaluated on an
/// even grid spanning [0,1] padded by 5 bandwidths beyond the extreme samples;
/// the grid is refined when too coarse for the bandwidth.
inline DistributionCurve distribution_curve(std::span<const double> confidences, CurveKind kind,
                                            int grid_size) {
    if (confidences.empty()) throw DataError("distribution of an empty sample");
    if (grid_size < (kind == CurveKind::kde ? 2 : 1)) {
        throw ConfigError("grid_size too small for a " + to_string(kind) + " curve");
    }
    DistributionCurve curve;
    curve.kind = kind;
    curve.samples = confidences.size();
    const double n = static_cast<double>(confidences.size());

    if (kind == CurveKind::histogram) {
        std::vector<ScoredPrediction> preds;
        preds.reserve(confidences.size());
        for (double c : confidences) preds.push_back({"", c, false});
        const auto buckets = bucketize(preds, grid_size, /*clamp=*/true);
        const double width = 1.0 / grid_size;
        curve.bandwidth = width;
        for (const auto& b : buckets) {
            curve.points.push_back(
                {(b.lower + b.upper) / 2.0, static_cast<double>(b.member_ids.size()) / (n * width)});
        }
        return curve;
    }

    const auto h = silverman_bandwidth(confidences);
    curve.bandwidth = h.value_or(kFallbackBandwidth);
    curve.fallback_bandwidth = !h.has_value();
    const double bw = curve.bandwidth;
    const auto [min_it, max_it] = std::minmax_element(confidences.begin(), confidences.end());
    const double lo = std::min(0.0, *min_it - 5.0 * bw);
    const double hi = std::max(1.0, *max_it + 5.0 * bw);

    // At least four grid steps per bandwidth keeps the trapezoid rule well
    // inside 1e-3 of the true integral.
    const double needed = std::ceil((hi - lo) / (bw / 4.0)) + 1.0;
    const auto points = static_cast<std::size_t>(
        std::max<double>(grid_size, std::min(needed, 1'000'000.0)));
    const double step = (hi - lo) / static_cast<double>(points - 1);
    const double norm = 1.0 / (n * bw * std::sqrt(2.0 * std::numbers::pi));
    curve.points.reserve(points);
    for (std::size_t i = 0; i < points; ++i) {
        const double x = lo + step * static_cast<double>(i);
        double sum = 0.0;
        for (double c : confidences) {
            const double z = (x - c) / bw;
            sum += std::exp(-0.5 * z * z);
        }
        curve.points.push_back({x, sum * norm});
    }
    double inside = 0.0;
    for (double c : confidences) {
        inside += detail::gaussian_cdf((1.0 - c) / bw) - detail::gaussian_cdf((0.0 - c) / bw);
    }
    curve.mass_outside_unit = 1.0 - inside / n;
    return curve;
}

/// Trapezoid-rule integral of a curve over its own grid.
inline double trapezoid_integral(const DistributionCurve& curve) {
    double total = 0.0;
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const auto& a = curve.points[i - 1];
        const auto& b = curve.points[i];
        total += 0.5 * (a.density + b.density) * (b.x - a.x);
    }
    return total;
}

}  // namespace calibra
