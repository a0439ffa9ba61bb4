#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

#include "fm/common.hpp"
#include "fm/expr.hpp"
#include "fm/panel.hpp"

namespace fm {

enum class Backend { Naive, Optimized };

namespace kern {

// All rolling windows are trailing and include the current bar. Strict
// mode: any missing value in the window yields missing. Every op below
// takes one asset's time series as a contiguous column.

inline double finite_or_missing(double x) { return std::isfinite(x) ? x : kMissing; }

// --- shared helpers --------------------------------------------------------

inline bool window_clean(const double* col, std::size_t t, int n) {
    for (int i = 0; i < n; ++i)
        if (is_missing(col[t - i])) return false;
    return true;
}

// Sample skewness (adjusted Fisher-Pearson) from central moments.
inline double skew_from_moments(double m2c, double m3c, int n) {
    if (n < 3 || m2c <= 0.0) return kMissing;
    double g1 = m3c / std::pow(m2c, 1.5);
    return finite_or_missing(g1 * std::sqrt(static_cast<double>(n) * (n - 1)) / (n - 2));
}

// Sample excess kurtosis from central moments.
inline double kurt_from_moments(double m2c, double m4c, int n) {
    if (n < 4 || m2c <= 0.0) return kMissing;
    double nn = n;
    double g2 = m4c / (m2c * m2c);
    double G2 = ((nn + 1) * g2 - 3 * (nn - 1)) * (nn - 1) / ((nn - 2) * (nn - 3));
    return finite_or_missing(G2);
}

struct OlsFit {
    double slope, rsquare, resi;
};

// OLS of window values against time index 0..n-1 (oldest = 0).
inline OlsFit ols_window(const double* w, int n) {
    double sy = 0, syy = 0, sxy = 0;
    double base = w[0];
    for (int i = 0; i < n; ++i) {
        double y = w[i] - base;
        sy += y;
        syy += y * y;
        sxy += i * y;
    }
    double nn = n;
    double sx = nn * (nn - 1) / 2.0;
    double sxx = (nn - 1) * nn * (2 * nn - 1) / 6.0;
    double sxx_c = sxx - sx * sx / nn;
    double syy_c = syy - sy * sy / nn;
    double sxy_c = sxy - sx * sy / nn;
    OlsFit f;
    f.slope = sxy_c / sxx_c;
    f.rsquare = syy_c <= 0.0 ? 0.0 : (sxy_c * sxy_c) / (sxx_c * syy_c);
    double intercept = (sy - f.slope * sx) / nn;
    f.resi = (w[n - 1] - base) - (intercept + f.slope * (nn - 1));
    return f;
}

// --- naive rolling backend (direct from the definitions) -------------------

enum class RollOp {
    Mean, Sum, Product, Std, Var, Skew, Kurt, Med, TsRank,
    TsMax, TsMin, TsArgMax, TsArgMin, Wma, Sma, Slope, Rsquare, Resi,
};

inline double naive_window_value(RollOp op, const double* w, int n,
                                 std::vector<double>& scratch) {
    switch (op) {
        case RollOp::Mean:
        case RollOp::Sma: {
            double s = 0;
            for (int i = 0; i < n; ++i) s += w[i];
            return s / n;
        }
        case RollOp::Sum: {
            double s = 0;
            for (int i = 0; i < n; ++i) s += w[i];
            return s;
        }
        case RollOp::Product: {
            double s = 1;
            for (int i = 0; i < n; ++i) s *= w[i];
            return finite_or_missing(s);
        }
        // Central moments are shift-invariant, so the moment family works on
        // w[i] - w[0]: an exactly constant window then yields exactly zero
        // variance (the two-pass mean would round and report a spurious tiny
        // dispersion, e.g. Std of a flat rank series).
        case RollOp::Std:
        case RollOp::Var: {
            double mean = 0;
            for (int i = 0; i < n; ++i) mean += w[i] - w[0];
            mean /= n;
            double ss = 0;
            for (int i = 0; i < n; ++i) {
                double d = (w[i] - w[0]) - mean;
                ss += d * d;
            }
            double var = ss / (n - 1);
            return op == RollOp::Var ? var : std::sqrt(var);
        }
        case RollOp::Skew: {
            double mean = 0;
            for (int i = 0; i < n; ++i) mean += w[i] - w[0];
            mean /= n;
            double m2 = 0, m3 = 0;
            for (int i = 0; i < n; ++i) {
                double d = (w[i] - w[0]) - mean;
                m2 += d * d;
                m3 += d * d * d;
            }
            return skew_from_moments(m2 / n, m3 / n, n);
        }
        case RollOp::Kurt: {
            double mean = 0;
            for (int i = 0; i < n; ++i) mean += w[i] - w[0];
            mean /= n;
            double m2 = 0, m4 = 0;
            for (int i = 0; i < n; ++i) {
                double d = (w[i] - w[0]) - mean;
                m2 += d * d;
                m4 += d * d * d * d;
            }
            return kurt_from_moments(m2 / n, m4 / n, n);
        }
        case RollOp::Med: {
            scratch.assign(w, w + n);
            std::sort(scratch.begin(), scratch.end());
            return n % 2 ? scratch[n / 2]
                         : 0.5 * (scratch[n / 2 - 1] + scratch[n / 2]);
        }
        case RollOp::TsRank: {
            // fractional rank of the current bar: sort the window, average
            // the 1-based positions of the tied block containing it
            double x = w[n - 1];
            scratch.assign(w, w + n);
            std::sort(scratch.begin(), scratch.end());
            double rank_sum = 0;
            int ties = 0;
            for (int i = 0; i < n; ++i) {
                if (scratch[i] == x) {
                    rank_sum += i + 1;
                    ++ties;
                }
            }
            return rank_sum / ties / n;
        }
        case RollOp::TsMax: {
            double best = w[0];
            for (int i = 1; i < n; ++i) best = std::max(best, w[i]);
            return best;
        }
        case RollOp::TsMin: {
            double best = w[0];
            for (int i = 1; i < n; ++i) best = std::min(best, w[i]);
            return best;
        }
        case RollOp::TsArgMax: {
            // Offset back from the current bar (0 = current); ties take the
            // most recent occurrence.
            int best = n - 1;
            for (int i = n - 2; i >= 0; --i)
                if (w[i] > w[best]) best = i;
            return static_cast<double>(n - 1 - best);
        }
        case RollOp::TsArgMin: {
            int best = n - 1;
            for (int i = n - 2; i >= 0; --i)
                if (w[i] < w[best]) best = i;
            return static_cast<double>(n - 1 - best);
        }
        case RollOp::Wma: {
            // Weights n..1, most recent heaviest; TsDecay is the same kernel.
            double s = 0, ws = 0;
            for (int i = 0; i < n; ++i) {
                double weight = i + 1;  // oldest = 1
                s += weight * w[i];
                ws += weight;
            }
            return s / ws;
        }
        case RollOp::Slope: return finite_or_missing(ols_window(w, n).slope);
        case RollOp::Rsquare: return finite_or_missing(ols_window(w, n).rsquare);
        case RollOp::Resi: return finite_or_missing(ols_window(w, n).resi);
    }
    return kMissing;
}

inline void naive_rolling(RollOp op, const double* col, std::size_t T, int n, double* out) {
    std::vector<double> scratch;
    for (std::size_t t = 0; t < T; ++t) {
        if (t + 1 < static_cast<std::size_t>(n) || !window_clean(col, t, n)) {
            out[t] = kMissing;
            continue;
        }
        out[t] = naive_window_value(op, col + t + 1 - n, n, scratch);
    }
}

// --- optimized rolling backend ---------------------------------------------
//
// Monotonic deques for extrema, shifted one-pass moment accumulators for
// the statistical family, and an order-statistic sorted window for
// median/rank. Sums are re-accumulated periodically to bound float drift.

inline constexpr std::size_t kRefreshEvery = 1024;

inline void opt_rolling_moments(RollOp op, const double* col, std::size_t T, int n,
                                double* out) {
    int nan_count = 0;
    double shift = 0;
    double s1 = 0, s2 = 0, s3 = 0, s4 = 0;
    std::size_t since_refresh = 0;
    std::size_t last_diff = 0;  // most recent t where col[t] != col[t-1]
    bool need_high = (op == RollOp::Skew || op == RollOp::Kurt);

    auto recompute = [&](std::size_t t) {
        // window is [t-n+1, t], known clean
        shift = col[t - n + 1];
        s1 = s2 = s3 = s4 = 0;
        for (int i = 0; i < n; ++i) {
            double x = col[t - n + 1 + i] - shift;
            s1 += x;
            double x2 = x * x;
            s2 += x2;
            if (need_high) {
                s3 += x2 * x;
                s4 += x2 * x2;
            }
        }
        since_refresh = 0;
    };

    auto emit = [&](std::size_t t) {
        double nn = n;
        double mean = s1 / nn;
        switch (op) {
            case RollOp::Mean:
            case RollOp::Sma: out[t] = mean + shift; break;
            case RollOp::Sum: out[t] = s1 + nn * shift; break;
            case RollOp::Std:
            case RollOp::Var: {
                double m2 = s2 - s1 * s1 / nn;
                if (m2 < 0) m2 = 0;
                double var = m2 / (nn - 1);
                out[t] = op == RollOp::Var ? var : std::sqrt(var);
                break;
            }
            case RollOp::Skew: {
                double m2c = s2 / nn - mean * mean;
                double m3c = s3 / nn - 3 * mean * s2 / nn + 2 * mean * mean * mean;
                out[t] = skew_from_moments(std::max(m2c, 0.0), m3c, n);
                break;
            }
            case RollOp::Kurt: {
                double m2c = s2 / nn - mean * mean;
                double m4c = s4 / nn - 4 * mean * s3 / nn + 6 * mean * mean * s2 / nn -
                             3 * mean * mean * mean * mean;
                out[t] = kurt_from_moments(std::max(m2c, 0.0), m4c, n);
                break;
            }
            default: out[t] = kMissing; break;
        }
    };

    bool valid = false;  // accumulators match the current window
    for (std::size_t t = 0; t < T; ++t) {
        bool nan_in = is_missing(col[t]);
        if (nan_in) ++nan_count;
        if (t >= static_cast<std::size_t>(n) && is_missing(col[t - n])) --nan_count;
        if (t > 0 && (is_missing(col[t - 1]) || col[t] != col[t - 1])) last_diff = t;

        if (t + 1 < static_cast<std::size_t>(n)) {
            out[t] = kMissing;
            continue;
        }
        if (nan_count > 0) {
            out[t] = kMissing;
            valid = false;
            continue;
        }
        // a window with no value change is exactly constant: the slid
        // accumulators may carry rounding drift from earlier content, so the
        // degenerate moments are emitted directly instead
        if (last_diff + n <= t + 1 &&
            (op == RollOp::Std || op == RollOp::Var || op == RollOp::Skew ||
             op == RollOp::Kurt)) {
            out[t] = (op == RollOp::Std || op == RollOp::Var) ? 0.0 : kMissing;
            valid = false;  // accumulators are stale for the next window
            continue;
        }
        if (!valid || ++since_refresh >= kRefreshEvery) {
            recompute(t);
            valid = true;
        } else {
            double add = col[t] - shift;
            double rem = col[t - n] - shift;
            s1 += add - rem;
            double a2 = add * add, r2 = rem * rem;
            s2 += a2 - r2;
            if (need_high) {
                s3 += a2 * add - r2 * rem;
                s4 += a2 * a2 - r2 * r2;
            }
        }
        emit(t);
    }
}

inline void opt_rolling_extreme(RollOp op, const double* col, std::size_t T, int n,
                                double* out) {
    const bool want_max = (op == RollOp::TsMax || op == RollOp::TsArgMax);
    const bool want_arg = (op == RollOp::TsArgMax || op == RollOp::TsArgMin);
    std::deque<std::size_t> dq;  // indices, values strictly mono from front
    int nan_count = 0;
    for (std::size_t t = 0; t < T; ++t) {
        double x = col[t];
        if (is_missing(x)) {
            ++nan_count;
        } else {
            // pop <= so the most recent index wins ties
            while (!dq.empty() &&
                   (want_max ? col[dq.back()] <= x : col[dq.back()] >= x))
                dq.pop_back();
            dq.push_back(t);
        }
        if (t >= static_cast<std::size_t>(n)) {
            if (is_missing(col[t - n])) --nan_count;
            while (!dq.empty() && dq.front() + n <= t) dq.pop_front();
        }
        if (t + 1 < static_cast<std::size_t>(n) || nan_count > 0) {
            out[t] = kMissing;
            continue;
        }
        out[t] = want_arg ? static_cast<double>(t - dq.front()) : col[dq.front()];
    }
}

// TsRank needs no window structure: the window is a contiguous column
// slice, so a branchless comparison count vectorizes.
inline void opt_rolling_tsrank(const double* col, std::size_t T, int n, double* out) {
    int nan_count = 0;
    for (std::size_t t = 0; t < T; ++t) {
        if (is_missing(col[t])) ++nan_count;
        if (t >= static_cast<std::size_t>(n) && is_missing(col[t - n])) --nan_count;
        if (t + 1 < static_cast<std::size_t>(n) || nan_count > 0) {
            out[t] = kMissing;
            continue;
        }
        const double v = col[t];
        const double* w = col + t + 1 - n;
        int less = 0, eq = 0;
        for (int i = 0; i < n; ++i) {
            less += w[i] < v;
            eq += w[i] == v;
        }
        out[t] = (less + (eq + 1) * 0.5) / n;
    }
}

inline void opt_rolling_order(RollOp op, const double* col, std::size_t T, int n,
                              double* out) {
    if (op == RollOp::TsRank) {
        opt_rolling_tsrank(col, T, n, out);
        return;
    }
    std::vector<double> win;  // sorted window contents
    win.reserve(static_cast<std::size_t>(n) + 1);
    int nan_count = 0;
    for (std::size_t t = 0; t < T; ++t) {
        double x = col[t];
        if (is_missing(x)) {
            ++nan_count;
        } else {
            win.insert(std::upper_bound(win.begin(), win.end(), x), x);
        }
        if (t >= static_cast<std::size_t>(n)) {
            double old = col[t - n];
            if (is_missing(old)) {
                --nan_count;
            } else {
                win.erase(std::lower_bound(win.begin(), win.end(), old));
            }
        }
        if (t + 1 < static_cast<std::size_t>(n) || nan_count > 0) {
            out[t] = kMissing;
            continue;
        }
        out[t] = n % 2 ? win[n / 2] : 0.5 * (win[n / 2 - 1] + win[n / 2]);
    }
}

inline void opt_rolling_wma(const double* col, std::size_t T, int n, double* out) {
    int nan_count = 0;
    double s = 0, wsum = 0;
    double shift = 0;
    const double denom = static_cast<double>(n) * (n + 1) / 2.0;
    std::size_t since_refresh = 0;
    bool valid = false;
    auto recompute = [&](std::size_t t) {
        shift = col[t - n + 1];
        s = wsum = 0;
        for (int i = 0; i < n; ++i) {
            double y = col[t - n + 1 + i] - shift;
            s += y;
            wsum += (i + 1) * y;
        }
        since_refresh = 0;
    };
    for (std::size_t t = 0; t < T; ++t) {
        if (is_missing(col[t])) ++nan_count;
        if (t >= static_cast<std::size_t>(n) && is_missing(col[t - n])) --nan_count;
        if (t + 1 < static_cast<std::size_t>(n)) {
            out[t] = kMissing;
            continue;
        }
        if (nan_count > 0) {
            out[t] = kMissing;
            valid = false;
            continue;
        }
        if (!valid || ++since_refresh >= kRefreshEvery) {
            recompute(t);
            valid = true;
        } else {
            double y_out = col[t - n] - shift;
            double y_new = col[t] - shift;
            wsum = wsum - s + n * y_new;
            s = s - y_out + y_new;
        }
        out[t] = wsum / denom + shift;
    }
}

inline void opt_rolling_ols(RollOp op, const double* col, std::size_t T, int n,
                            double* out) {
    double sy = 0, syy = 0, sxy = 0, shift = 0;
    const double nn = n;
    const double sx = nn * (nn - 1) / 2.0;
    const double sxx = (nn - 1) * nn * (2 * nn - 1) / 6.0;
    const double sxx_c = sxx - sx * sx / nn;
    int nan_count = 0;
    std::size_t since_refresh = 0;
    bool valid = false;
    auto recompute = [&](std::size_t t) {
        shift = col[t - n + 1];
        sy = syy = sxy = 0;
        for (int i = 0; i < n; ++i) {
            double y = col[t - n + 1 + i] - shift;
            sy += y;
            syy += y * y;
            sxy += i * y;
        }
        since_refresh = 0;
    };
    for (std::size_t t = 0; t < T; ++t) {
        if (is_missing(col[t])) ++nan_count;
        if (t >= static_cast<std::size_t>(n) && is_missing(col[t - n])) --nan_count;
        if (t + 1 < static_cast<std::size_t>(n)) {
            out[t] = kMissing;
            continue;
        }
        if (nan_count > 0) {
            out[t] = kMissing;
            valid = false;
            continue;
        }
        if (!valid || ++since_refresh >= kRefreshEvery) {
            recompute(t);
            valid = true;
        } else {
            // all positions shift left by one, then the new bar enters at n-1
            double y_out = col[t - n] - shift;
            double y_new = col[t] - shift;
            sxy = sxy - (sy - y_out) + (nn - 1) * y_new;
            sy = sy - y_out + y_new;
            syy = syy - y_out * y_out + y_new * y_new;
        }
        double syy_c = syy - sy * sy / nn;
        double sxy_c = sxy - sx * sy / nn;
        double slope = sxy_c / sxx_c;
        switch (op) {
            case RollOp::Slope: out[t] = finite_or_missing(slope); break;
            case RollOp::Rsquare:
                out[t] = syy_c <= 0.0
                             ? 0.0
                             : finite_or_missing((sxy_c * sxy_c) / (sxx_c * syy_c));
                break;
            case RollOp::Resi: {
                double intercept = (sy - slope * sx) / nn;
                out[t] = finite_or_missing((col[t] - shift) -
                                           (intercept + slope * (nn - 1)));
                break;
            }
            default: out[t] = kMissing; break;
        }
    }
}

// Rolling Pearson correlation of two columns; missing when either window
// standard deviation is zero or any window cell is missing on either side.
inline void rolling_corr(const double* a, const double* b, std::size_t T, int n,
                         double* out, bool optimized) {
    if (!optimized) {
        for (std::size_t t = 0; t < T; ++t) {
            if (t + 1 < static_cast<std::size_t>(n) || !window_clean(a, t, n) ||
                !window_clean(b, t, n)) {
                out[t] = kMissing;
                continue;
            }
            // an exactly constant window has zero standard deviation by
            // definition; detect it before the mean rounds away from the
            // common value and produces a spurious tiny variance
            bool const_a = true, const_b = true;
            for (int i = 1; i < n; ++i) {
                const_a = const_a && a[t - n + 1 + i] == a[t - n + 1];
                const_b = const_b && b[t - n + 1 + i] == b[t - n + 1];
            }
            if (const_a || const_b) {
                out[t] = kMissing;
                continue;
            }
            double ma = 0, mb = 0;
            for (int i = 0; i < n; ++i) {
                ma += a[t - n + 1 + i];
                mb += b[t - n + 1 + i];
            }
            ma /= n;
            mb /= n;
            double saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < n; ++i) {
                double da = a[t - n + 1 + i] - ma;
                double db = b[t - n + 1 + i] - mb;
                saa += da * da;
                sbb += db * db;
                sab += da * db;
            }
            out[t] = (saa <= 0.0 || sbb <= 0.0)
                         ? kMissing
                         : finite_or_missing(sab / std::sqrt(saa * sbb));
        }
        return;
    }
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0, sha = 0, shb = 0;
    int nan_count = 0;
    std::size_t since_refresh = 0;
    std::size_t last_diff_a = 0, last_diff_b = 0;
    bool valid = false;
    auto recompute = [&](std::size_t t) {
        sha = a[t - n + 1];
        shb = b[t - n + 1];
        sa = sb = saa = sbb = sab = 0;
        for (int i = 0; i < n; ++i) {
            double x = a[t - n + 1 + i] - sha;
            double y = b[t - n + 1 + i] - shb;
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        since_refresh = 0;
    };
    for (std::size_t t = 0; t < T; ++t) {
        bool nan_in = is_missing(a[t]) || is_missing(b[t]);
        if (nan_in) ++nan_count;
        if (t >= static_cast<std::size_t>(n) &&
            (is_missing(a[t - n]) || is_missing(b[t - n])))
            --nan_count;
        if (t > 0 && (is_missing(a[t - 1]) || a[t] != a[t - 1])) last_diff_a = t;
        if (t > 0 && (is_missing(b[t - 1]) || b[t] != b[t - 1])) last_diff_b = t;
        if (t + 1 < static_cast<std::size_t>(n)) {
            out[t] = kMissing;
            continue;
        }
        if (nan_count > 0) {
            out[t] = kMissing;
            valid = false;
            continue;
        }
        // either side exactly constant in the window: zero standard
        // deviation by definition, regardless of accumulator drift
        if (last_diff_a + n <= t + 1 || last_diff_b + n <= t + 1) {
            out[t] = kMissing;
            valid = false;
            continue;
        }
        if (!valid || ++since_refresh >= kRefreshEvery) {
            recompute(t);
            valid = true;
        } else {
            double xo = a[t - n] - sha, yo = b[t - n] - shb;
            double xn = a[t] - sha, yn = b[t] - shb;
            sa += xn - xo;
            sb += yn - yo;
            saa += xn * xn - xo * xo;
            sbb += yn * yn - yo * yo;
            sab += xn * yn - xo * yo;
        }
        double nn = n;
        double caa = saa - sa * sa / nn;
        double cbb = sbb - sb * sb / nn;
        double cab = sab - sa * sb / nn;
        out[t] = (caa <= 0.0 || cbb <= 0.0)
                     ? kMissing
                     : finite_or_missing(cab / std::sqrt(caa * cbb));
    }
}

// --- cross-sectional --------------------------------------------------------

// CsRank: average rank over present assets, normalized by the present
// count, range (0, 1].
inline void cs_rank_row(const double* row, std::size_t M, double* out, bool optimized,
                        std::vector<std::size_t>& idx_scratch) {
    if (!optimized) {
        // direct transcription: pairwise counting
        std::size_t present = 0;
        for (std::size_t m = 0; m < M; ++m)
            if (!is_missing(row[m])) ++present;
        for (std::size_t m = 0; m < M; ++m) {
            if (is_missing(row[m]) || present == 0) {
                out[m] = kMissing;
                continue;
            }
            std::size_t less = 0, eq = 0;
            for (std::size_t k = 0; k < M; ++k) {
                if (is_missing(row[k])) continue;
                if (row[k] < row[m]) ++less;
                else if (row[k] == row[m]) ++eq;
            }
            out[m] = (less + (eq + 1) * 0.5) / present;
        }
        return;
    }
    idx_scratch.clear();
    for (std::size_t m = 0; m < M; ++m) {
        out[m] = kMissing;
        if (!is_missing(row[m])) idx_scratch.push_back(m);
    }
    std::size_t present = idx_scratch.size();
    if (present == 0) return;
    std::sort(idx_scratch.begin(), idx_scratch.end(),
              [&](std::size_t x, std::size_t y) { return row[x] < row[y]; });
    std::size_t i = 0;
    while (i < present) {
        std::size_t j = i;
        while (j + 1 < present && row[idx_scratch[j + 1]] == row[idx_scratch[i]]) ++j;
        double rank = (static_cast<double>(i) + (j - i + 2) * 0.5) / present;
        for (std::size_t k = i; k <= j; ++k) out[idx_scratch[k]] = rank;
        i = j + 1;
    }
}

// Scale: divide by the cross-sectional sum of absolute values.
inline void scale_row(const double* row, std::size_t M, double* out) {
    double s = 0;
    for (std::size_t m = 0; m < M; ++m)
        if (!is_missing(row[m])) s += std::abs(row[m]);
    for (std::size_t m = 0; m < M; ++m)
        out[m] = (is_missing(row[m]) || s == 0.0) ? kMissing
                                                  : finite_or_missing(row[m] / s);
}

}  // namespace kern

// ---------------------------------------------------------------------------
// Evaluator
// ---------------------------------------------------------------------------

namespace detail {

inline kern::RollOp roll_op_for(const std::string& name) {
    using R = kern::RollOp;
    if (name == "Mean") return R::Mean;
    if (name == "SMA") return R::Sma;
    if (name == "Sum") return R::Sum;
    if (name == "Product") return R::Product;
    if (name == "Std") return R::Std;
    if (name == "Var") return R::Var;
    if (name == "Skew") return R::Skew;
    if (name == "Kurt") return R::Kurt;
    if (name == "Med") return R::Med;
    if (name == "TsRank") return R::TsRank;
    if (name == "TsMax") return R::TsMax;
    if (name == "TsMin") return R::TsMin;
    if (name == "TsArgMax") return R::TsArgMax;
    if (name == "TsArgMin") return R::TsArgMin;
    if (name == "WMA" || name == "TsDecay") return R::Wma;
    if (name == "Slope") return R::Slope;
    if (name == "Rsquare") return R::Rsquare;
    if (name == "Resi") return R::Resi;
    throw EvalError("not a rolling operator: " + name);
}

inline bool is_rolling(const std::string& name) {
    static const std::set<std::string> names = {
        "Mean", "SMA", "Sum", "Product", "Std", "Var", "Skew", "Kurt", "Med",
        "TsRank", "TsMax", "TsMin", "TsArgMax", "TsArgMin", "WMA", "TsDecay",
        "Slope", "Rsquare", "Resi"};
    return names.count(name) > 0;
}

inline void dispatch_rolling(kern::RollOp op, const double* col, std::size_t T, int n,
                             double* out, Backend backend) {
    using R = kern::RollOp;
    if (backend == Backend::Naive || op == R::Product) {
        // Product stays on the direct path in both backends: a sliding
        // product cannot hold the equivalence tolerance near zeros.
        kern::naive_rolling(op, col, T, n, out);
        return;
    }
    switch (op) {
        case R::Mean: case R::Sma: case R::Sum: case R::Std: case R::Var:
        case R::Skew: case R::Kurt:
            kern::opt_rolling_moments(op, col, T, n, out);
            break;
        case R::TsMax: case R::TsMin: case R::TsArgMax: case R::TsArgMin:
            kern::opt_rolling_extreme(op, col, T, n, out);
            break;
        case R::Med: case R::TsRank:
            kern::opt_rolling_order(op, col, T, n, out);
            break;
        case R::Wma:
            kern::opt_rolling_wma(col, T, n, out);
            break;
        case R::Slope: case R::Rsquare: case R::Resi:
            kern::opt_rolling_ols(op, col, T, n, out);
            break;
        default:
            kern::naive_rolling(op, col, T, n, out);
    }
}

template <class F>
inline Mat elementwise1(const Mat& a, F f) {
    Mat out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.v.size(); ++i)
        out.v[i] = is_missing(a.v[i]) ? kMissing : kern::finite_or_missing(f(a.v[i]));
    return out;
}

template <class F>
inline Mat elementwise2(const Mat& a, const Mat& b, F f) {
    Mat out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.v.size(); ++i)
        out.v[i] = (is_missing(a.v[i]) || is_missing(b.v[i]))
                       ? kMissing
                       : kern::finite_or_missing(f(a.v[i], b.v[i]));
    return out;
}

struct Evaluator {
    const Panel& panel;
    Backend backend;

    Mat eval(const Expr& e) {
        switch (e.kind) {
            case Expr::Kind::Field: return panel.field(e.field);
            case Expr::Kind::Const: return Mat(panel.n_bars(), panel.n_assets(), e.value);
            case Expr::Kind::Call: return eval_call(e);
        }
        throw EvalError("bad expression node");
    }

    Mat rolling_unary(const Expr& e) {
        Mat in = eval(*e.args[0]);
        int n = e.iparams[0];
        Mat out(in.rows, in.cols);
        std::vector<double> col(in.rows), res(in.rows);
        kern::RollOp op = roll_op_for(e.op);
        for (std::size_t m = 0; m < in.cols; ++m) {
            for (std::size_t t = 0; t < in.rows; ++t) col[t] = in.at(t, m);
            dispatch_rolling(op, col.data(), in.rows, n, res.data(), backend);
            for (std::size_t t = 0; t < in.rows; ++t) out.at(t, m) = res[t];
        }
        return out;
    }

    Mat eval_call(const Expr& e) {
        const std::string& op = e.op;
        if (is_rolling(op)) return rolling_unary(e);

        if (op == "Delay" || op == "Delta") {
            Mat in = eval(*e.args[0]);
            int d = e.iparams[0];
            Mat out(in.rows, in.cols);
            for (std::size_t t = 0; t < in.rows; ++t)
                for (std::size_t m = 0; m < in.cols; ++m) {
                    if (t < static_cast<std::size_t>(d)) continue;
                    double now = in.at(t, m), past = in.at(t - d, m);
                    if (is_missing(now) || is_missing(past)) continue;
                    out.at(t, m) = op == "Delay"
                                       ? past
                                       : kern::finite_or_missing(now - past);
                }
            return out;
        }
        if (op == "EMA") {
            // recursive smoothing 2/(n+1), seeded with the first present
            // value; missing inputs leave the state untouched
            Mat in = eval(*e.args[0]);
            double alpha = 2.0 / (e.iparams[0] + 1.0);
            Mat out(in.rows, in.cols);
            for (std::size_t m = 0; m < in.cols; ++m) {
                double state = kMissing;
                for (std::size_t t = 0; t < in.rows; ++t) {
                    double x = in.at(t, m);
                    if (is_missing(x)) continue;
                    state = is_missing(state) ? x : alpha * x + (1 - alpha) * state;
                    out.at(t, m) = kern::finite_or_missing(state);
                }
            }
            return out;
        }
        if (op == "Corr") {
            Mat a = eval(*e.args[0]);
            Mat b = eval(*e.args[1]);
            int n = e.iparams[0];
            Mat out(a.rows, a.cols);
            std::vector<double> ca(a.rows), cb(a.rows), res(a.rows);
            for (std::size_t m = 0; m < a.cols; ++m) {
                for (std::size_t t = 0; t < a.rows; ++t) {
                    ca[t] = a.at(t, m);
                    cb[t] = b.at(t, m);
                }
                kern::rolling_corr(ca.data(), cb.data(), a.rows, n, res.data(),
                                   backend == Backend::Optimized);
                for (std::size_t t = 0; t < a.rows; ++t) out.at(t, m) = res[t];
            }
            return out;
        }
        if (op == "CsRank" || op == "Scale") {
            Mat in = eval(*e.args[0]);
            Mat out(in.rows, in.cols);
            std::vector<std::size_t> scratch;
            for (std::size_t t = 0; t < in.rows; ++t) {
                if (op == "CsRank")
                    kern::cs_rank_row(in.row(t), in.cols, out.row(t),
                                      backend == Backend::Optimized, scratch);
                else
                    kern::scale_row(in.row(t), in.cols, out.row(t));
            }
            return out;
        }

        // elementwise arithmetic
        if (op == "Add") return elementwise2(eval(*e.args[0]), eval(*e.args[1]),
                                             [](double a, double b) { return a + b; });
        if (op == "Sub") return elementwise2(eval(*e.args[0]), eval(*e.args[1]),
                                             [](double a, double b) { return a - b; });
        if (op == "Mul") return elementwise2(eval(*e.args[0]), eval(*e.args[1]),
                                             [](double a, double b) { return a * b; });
        if (op == "Div")
            return elementwise2(eval(*e.args[0]), eval(*e.args[1]), [](double a, double b) {
                return b == 0.0 ? kMissing : a / b;
            });
        if (op == "Power")
            return elementwise2(eval(*e.args[0]), eval(*e.args[1]),
                                [](double a, double b) { return std::pow(a, b); });
        if (op == "SignedPower")
            return elementwise2(eval(*e.args[0]), eval(*e.args[1]), [](double a, double b) {
                double s = a < 0 ? -1.0 : (a > 0 ? 1.0 : 0.0);
                return s * std::pow(std::abs(a), b);
            });
        if (op == "Neg") return elementwise1(eval(*e.args[0]), [](double a) { return -a; });
        if (op == "Abs")
            return elementwise1(eval(*e.args[0]), [](double a) { return std::abs(a); });
        if (op == "Log")
            return elementwise1(eval(*e.args[0]),
                                [](double a) { return a <= 0.0 ? kMissing : std::log(a); });
        if (op == "Inv")
            return elementwise1(eval(*e.args[0]),
                                [](double a) { return a == 0.0 ? kMissing : 1.0 / a; });
        if (op == "Sqrt")
            return elementwise1(eval(*e.args[0]),
                                [](double a) { return a < 0.0 ? kMissing : std::sqrt(a); });
        if (op == "Square")
            return elementwise1(eval(*e.args[0]), [](double a) { return a * a; });
        if (op == "Exp")
            return elementwise1(eval(*e.args[0]), [](double a) { return std::exp(a); });
        if (op == "Tanh")
            return elementwise1(eval(*e.args[0]), [](double a) { return std::tanh(a); });

        // logical family: {0, 1} valued signals with missing propagation
        auto cmp = [&](auto f) {
            return elementwise2(eval(*e.args[0]), eval(*e.args[1]),
                                [f](double a, double b) { return f(a, b) ? 1.0 : 0.0; });
        };
        if (op == "Greater") return cmp([](double a, double b) { return a > b; });
        if (op == "Less") return cmp([](double a, double b) { return a < b; });
        if (op == "GreaterEqual") return cmp([](double a, double b) { return a >= b; });
        if (op == "LessEqual") return cmp([](double a, double b) { return a <= b; });
        if (op == "Eq") return cmp([](double a, double b) { return a == b; });
        if (op == "Ne") return cmp([](double a, double b) { return a != b; });
        if (op == "And") return cmp([](double a, double b) { return a != 0.0 && b != 0.0; });
        if (op == "Or") return cmp([](double a, double b) { return a != 0.0 || b != 0.0; });
        if (op == "IfElse") {
            Mat c = eval(*e.args[0]);
            Mat a = eval(*e.args[1]);
            Mat b = eval(*e.args[2]);
            Mat out(c.rows, c.cols);
            for (std::size_t i = 0; i < c.v.size(); ++i)
                out.v[i] = is_missing(c.v[i]) ? kMissing
                                              : (c.v[i] != 0.0 ? a.v[i] : b.v[i]);
            return out;
        }
        throw EvalError("unknown operator: " + op);
    }
};

}  // namespace detail

// Causal evaluation of a factor expression over a panel: the value at
// time t depends only on data at times <= t.
inline Mat evaluate(const Expr& e, const Panel& panel,
                    Backend backend = Backend::Optimized) {
    validate(e);
    detail::Evaluator ev{panel, backend};
    return ev.eval(e);
}

inline Mat evaluate(const ExprPtr& e, const Panel& panel,
                    Backend backend = Backend::Optimized) {
    return evaluate(*e, panel, backend);
}

}  // namespace fm
