#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fm/common.hpp"

namespace fm {

// ---------------------------------------------------------------------------
// Rank helpers
// ---------------------------------------------------------------------------

namespace detail {

// Average ranks 1..n over the supplied values (all present).
inline std::vector<double> average_ranks(const std::vector<double>& x) {
    std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        double r = (i + j + 2) * 0.5;  // average of ranks i+1 .. j+1
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double saa = 0, sbb = 0, sab = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return kMissing;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace detail

// Cross-sectional Spearman rank correlation of two rows over the jointly
// present assets; average ranks for ties. Missing when fewer than 3 pairs
// or either side is constant.
inline double spearman_row(const double* a, const double* b, std::size_t M) {
    std::vector<double> xa, xb;
    xa.reserve(M);
    xb.reserve(M);
    for (std::size_t m = 0; m < M; ++m) {
        if (is_missing(a[m]) || is_missing(b[m])) continue;
        xa.push_back(a[m]);
        xb.push_back(b[m]);
    }
    if (xa.size() < 3) return kMissing;
    return detail::pearson(detail::average_ranks(xa), detail::average_ranks(xb));
}

// ---------------------------------------------------------------------------
// IC and factor correlation
// ---------------------------------------------------------------------------

struct ICSeries {
    std::vector<std::int64_t> timestamps;
    std::vector<double> values;  // NaN where < 3 present pairs
};

inline ICSeries ic_series(const Mat& signal, const Mat& target,
                          const std::vector<std::int64_t>& timestamps) {
    if (!signal.same_shape(target)) throw MetricError("ic_series: shape mismatch");
    ICSeries out;
    out.timestamps = timestamps;
    out.values.resize(signal.rows);
    for (std::size_t t = 0; t < signal.rows; ++t)
        out.values[t] = spearman_row(signal.row(t), target.row(t), signal.cols);
    return out;
}

inline double ic_mean(const ICSeries& s) {
    double sum = 0;
    std::size_t n = 0;
    for (double v : s.values)
        if (!is_missing(v)) {
            sum += v;
            ++n;
        }
    if (n == 0) throw MetricError("ic_mean: no present values");
    return sum / n;
}

// mean(IC) / std(IC), sample std over present values.
inline double icir(const ICSeries& s) {
    std::vector<double> xs;
    for (double v : s.values)
        if (!is_missing(v)) xs.push_back(v);
    if (xs.size() < 2) throw MetricError("icir: needs >= 2 present values");
    double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    double ss = 0;
    for (double v : xs) ss += (v - mean) * (v - mean);
    double sd = std::sqrt(ss / (xs.size() - 1));
    if (sd == 0.0) throw MetricError("icir: zero dispersion");
    return mean / sd;
}

// Time-average cross-sectional Spearman correlation of two realized signals.
inline double factor_corr(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw MetricError("factor_corr: shape mismatch");
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < a.rows; ++t) {
        double r = spearman_row(a.row(t), b.row(t), a.cols);
        if (!is_missing(r)) {
            sum += r;
            ++n;
        }
    }
    if (n == 0) throw MetricError("factor_corr: no evaluable timestamp");
    return sum / n;
}

// ---------------------------------------------------------------------------
// Tear-sheet statistics
// ---------------------------------------------------------------------------

struct QuantileReport {
    std::vector<double> quantile_returns;  // time-averaged, Q1..Qq
    double long_short_mean = 0;            // mean of Qq - Q1 per bar
    std::vector<double> long_short_cum;    // cumulative sum of per-bar L-S
    std::vector<double> long_short_series; // per-bar L-S (NaN where unavailable)
    double monotonicity = 0;
};

namespace detail {

// Buckets the present (signal, target) pairs of one bar into q quantiles,
// ties broken by asset index. Returns per-quantile mean target; empty when
// fewer present assets than q.
inline std::vector<double> bucket_means(const double* sig, const double* tgt,
                                        std::size_t M, int q) {
    std::vector<std::size_t> idx;
    for (std::size_t m = 0; m < M; ++m)
        if (!is_missing(sig[m]) && !is_missing(tgt[m])) idx.push_back(m);
    std::size_t n = idx.size();
    if (n < static_cast<std::size_t>(q)) return {};
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return sig[a] < sig[b]; });
    std::vector<double> means(q, 0.0);
    for (int k = 0; k < q; ++k) {
        std::size_t lo = k * n / q, hi = (k + 1) * n / q;
        double s = 0;
        for (std::size_t i = lo; i < hi; ++i) s += tgt[idx[i]];
        means[k] = s / (hi - lo);
    }
    return means;
}

// Extreme-quantile membership labels per asset for one bar:
// 0 = middle, 1 = bottom quantile, 2 = top quantile, -1 = not ranked.
inline std::vector<int> extreme_labels(const double* sig, std::size_t M, int q) {
    std::vector<std::size_t> idx;
    for (std::size_t m = 0; m < M; ++m)
        if (!is_missing(sig[m])) idx.push_back(m);
    std::vector<int> label(M, -1);
    std::size_t n = idx.size();
    if (n < static_cast<std::size_t>(q)) return label;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return sig[a] < sig[b]; });
    std::size_t bot_hi = n / q;
    std::size_t top_lo = static_cast<std::size_t>(q - 1) * n / q;
    for (std::size_t i = 0; i < n; ++i)
        label[idx[i]] = i < bot_hi ? 1 : (i >= top_lo ? 2 : 0);
    return label;
}

}  // namespace detail

inline QuantileReport quantile_analysis(const Mat& signal, const Mat& target, int q) {
    if (q < 2) throw MetricError("quantile_analysis: q must be >= 2");
    if (!signal.same_shape(target)) throw MetricError("quantile_analysis: shape mismatch");
    std::vector<double> sums(q, 0.0);
    std::size_t bars = 0;
    QuantileReport rep;
    rep.long_short_series.assign(signal.rows, kMissing);
    double ls_sum = 0, cum = 0;
    rep.long_short_cum.resize(signal.rows, 0.0);
    for (std::size_t t = 0; t < signal.rows; ++t) {
        auto means = detail::bucket_means(signal.row(t), target.row(t), signal.cols, q);
        if (!means.empty()) {
            for (int k = 0; k < q; ++k) sums[k] += means[k];
            double ls = means[q - 1] - means[0];
            rep.long_short_series[t] = ls;
            ls_sum += ls;
            cum += ls;
            ++bars;
        }
        rep.long_short_cum[t] = cum;
    }
    if (bars == 0)
        throw MetricError("quantile_analysis: fewer present assets than q at every bar");
    rep.quantile_returns.resize(q);
    for (int k = 0; k < q; ++k) rep.quantile_returns[k] = sums[k] / bars;
    rep.long_short_mean = ls_sum / bars;
    int increasing = 0;
    for (int k = 0; k + 1 < q; ++k)
        if (rep.quantile_returns[k + 1] > rep.quantile_returns[k]) ++increasing;
    rep.monotonicity = increasing == q - 1 ? 1.0
                                           : static_cast<double>(increasing) / (q - 1);
    return rep;
}

// Per-bar extreme-quantile membership turnover between consecutive bars.
inline std::vector<double> turnover_series(const Mat& signal, int q) {
    if (q < 2) throw MetricError("turnover: q must be >= 2");
    if (signal.rows < 2) throw MetricError("turnover: needs >= 2 bars");
    std::vector<double> out(signal.rows, kMissing);
    auto prev = detail::extreme_labels(signal.row(0), signal.cols, q);
    for (std::size_t t = 1; t < signal.rows; ++t) {
        auto cur = detail::extreme_labels(signal.row(t), signal.cols, q);
        std::size_t total = 0, changed = 0;
        for (std::size_t m = 0; m < signal.cols; ++m) {
            if (prev[m] < 0 && cur[m] < 0) continue;
            ++total;
            if (prev[m] != cur[m]) ++changed;
        }
        if (total > 0) out[t] = static_cast<double>(changed) / total;
        prev = std::move(cur);
    }
    return out;
}

inline double turnover(const Mat& signal, int q) {
    auto series = turnover_series(signal, q);
    double sum = 0;
    std::size_t n = 0;
    for (double v : series)
        if (!is_missing(v)) {
            sum += v;
            ++n;
        }
    if (n == 0) throw MetricError("turnover: no evaluable pair of bars");
    return sum / n;
}

// Fraction of UTC calendar days whose mean IC is positive. A day with mean
// exactly zero counts as a loss.
inline double daily_win_rate(const ICSeries& s) {
    if (s.timestamps.size() != s.values.size())
        throw MetricError("daily_win_rate: timestamps unavailable");
    std::size_t wins = 0, days = 0;
    std::size_t i = 0;
    while (i < s.values.size()) {
        std::int64_t day = s.timestamps[i] / 86400;
        double sum = 0;
        std::size_t n = 0;
        while (i < s.values.size() && s.timestamps[i] / 86400 == day) {
            if (!is_missing(s.values[i])) {
                sum += s.values[i];
                ++n;
            }
            ++i;
        }
        if (n > 0) {
            ++days;
            if (sum / n > 0.0) ++wins;
        }
    }
    if (days == 0) throw MetricError("daily_win_rate: no complete day");
    return static_cast<double>(wins) / days;
}

// ---------------------------------------------------------------------------
// Cost stress (net of per-bar extreme-quantile turnover charges)
// ---------------------------------------------------------------------------

struct CostStressReport {
    std::vector<double> costs_bps;
    // one cumulative net long-short series per cost, aligned to bars
    std::vector<std::vector<double>> cumulative;
};

inline CostStressReport cost_stress(const Mat& signal, const Mat& target, int q,
                                    const std::vector<double>& costs_bps) {
    if (costs_bps.empty()) throw MetricError("cost_stress: empty cost grid");
    for (double c : costs_bps)
        if (c < 0) throw MetricError("cost_stress: negative cost");
    QuantileReport gross = quantile_analysis(signal, target, q);
    auto tno = turnover_series(signal, q);
    CostStressReport rep;
    rep.costs_bps = costs_bps;
    for (double c : costs_bps) {
        std::vector<double> cum(signal.rows, 0.0);
        double acc = 0;
        for (std::size_t t = 0; t < signal.rows; ++t) {
            double g = gross.long_short_series[t];
            if (!is_missing(g)) {
                double charge = is_missing(tno[t]) ? 0.0 : (c / 10000.0) * tno[t];
                acc += g - charge;
            }
            cum[t] = acc;
        }
        rep.cumulative.push_back(std::move(cum));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Per-factor summary stats
// ---------------------------------------------------------------------------

struct FactorStats {
    double ic_mean = 0;
    double ic_abs_mean = 0;  // |E[IC_t]|, the reported summary
    double icir = 0;
    double daily_win_rate = 0;
    double fitness = 0;  // == ic_abs_mean
    double max_library_corr = 0;
};

inline FactorStats compute_stats(const Mat& signal, const Mat& target,
                                 const std::vector<std::int64_t>& timestamps) {
    FactorStats st;
    ICSeries s = ic_series(signal, target, timestamps);
    st.ic_mean = ic_mean(s);
    st.ic_abs_mean = std::abs(st.ic_mean);
    st.fitness = st.ic_abs_mean;
    try {
        st.icir = icir(s);
    } catch (const MetricError&) {
        st.icir = 0;  // degenerate series
    }
    try {
        st.daily_win_rate = daily_win_rate(s);
    } catch (const MetricError&) {
        st.daily_win_rate = 0;
    }
    return st;
}

}  // namespace fm
