#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bll/error.hpp"

namespace bll {

namespace detail {

inline void check_scores(std::span<const double> scores, std::span<const std::uint8_t> labels, const char* who) {
    if (scores.size() != labels.size()) throw ValidationError(std::string(who) + ": scores/labels size mismatch");
    if (scores.empty()) throw ValidationError(std::string(who) + ": empty input");
    for (double s : scores)
        if (!std::isfinite(s)) throw ValidationError(std::string(who) + ": non-finite score");
}

} // namespace detail

// P(score of a random positive > score of a random negative), ties count 1/2.
// Computed from mid-ranks; the numerator is an exact half-integer count so
// the result is the correctly rounded rational.
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    detail::check_scores(scores, labels, "auroc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // twice the rank sum of positives, with 1-based mid-ranks
    double twice_rank_sum = 0.0;
    double n_pos = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double twice_mid = static_cast<double>(i + 1 + j);  // 2 * (i+1 + j)/2
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]]) {
                twice_rank_sum += twice_mid;
                n_pos += 1.0;
            }
        i = j;
    }
    const double n_neg = static_cast<double>(n) - n_pos;
    if (n_pos == 0.0 || n_neg == 0.0) throw ValidationError("auroc: both classes must be present");
    return (twice_rank_sum - n_pos * (n_pos + 1.0)) / (2.0 * n_pos * n_neg);
}

// Equal-width bins on [0,1], right-closed, score 0 in the first bin. Empty
// bins contribute nothing.
inline double ece(std::span<const double> scores, std::span<const std::uint8_t> labels, std::size_t bins = 10) {
    detail::check_scores(scores, labels, "ece");
    if (bins == 0) throw ValidationError("ece: bins must be >= 1");
    std::vector<double> edges(bins + 1);
    for (std::size_t b = 0; b <= bins; ++b) edges[b] = static_cast<double>(b) / static_cast<double>(bins);
    std::vector<double> count(bins, 0.0), conf(bins, 0.0), acc(bins, 0.0);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double s = scores[i];
        if (s < 0.0 || s > 1.0) throw ValidationError("ece: score outside [0, 1]");
        // first upper edge >= s
        auto it = std::lower_bound(edges.begin() + 1, edges.end(), s);
        const auto b = static_cast<std::size_t>(it - edges.begin() - 1);
        count[b] += 1.0;
        conf[b] += s;
        acc[b] += labels[i] ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(scores.size());
    double total = 0.0;
    for (std::size_t b = 0; b < bins; ++b)
        if (count[b] > 0.0) total += (count[b] / n) * std::abs(acc[b] / count[b] - conf[b] / count[b]);
    return total;
}

struct FoldSummary {
    double mean = 0.0;
    double std = 0.0;  // n-1 normalizer
};

inline FoldSummary fold_summary(std::span<const double> values) {
    if (values.size() < 2) throw ValidationError("fold_summary: need at least 2 values");
    const double k = static_cast<double>(values.size());
    // sort first so the summary is independent of fold order
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    FoldSummary s;
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / k;
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / (k - 1.0));
    return s;
}

// Critical value of Student's t with 4 degrees of freedom, one-sided 5%.
inline constexpr double kTCritical4 = 2.132;

// One-sided one-sample t-test of the fold values against a fixed baseline.
inline bool significance_star(std::span<const double> fold_values, double baseline) {
    if (fold_values.size() < 2) return false;
    const FoldSummary s = fold_summary(fold_values);
    if (s.mean <= baseline) return false;
    if (s.std == 0.0) return true;
    const double t = (s.mean - baseline) / (s.std / std::sqrt(static_cast<double>(fold_values.size())));
    return t > kTCritical4;
}

// Pearson correlation.
inline double score_correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ValidationError("score_correlation: size mismatch");
    if (a.size() < 2) throw ValidationError("score_correlation: need n >= 2");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) throw ValidationError("score_correlation: constant input");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

} // namespace bll
