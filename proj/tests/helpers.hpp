#pragma once

// Shared fixtures and independent oracles for the test suites. Oracles are
// deliberately written with different algorithms than the library code.

#include <cmath>
#include <random>
#include <vector>

#include "fm/kernels.hpp"
#include "fm/panel.hpp"

namespace testutil {

// Rank by pairwise counting (library uses sort-based average ranks).
inline std::vector<double> counting_ranks(const std::vector<double>& x) {
    std::size_t n = x.size();
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
        int less = 0, eq = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (x[j] < x[i]) ++less;
            if (x[j] == x[i]) ++eq;
        }
        r[i] = less + (eq + 1) * 0.5;
    }
    return r;
}

inline double oracle_pearson(const std::vector<double>& a, const std::vector<double>& b) {
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
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
        sab += (a[i] - ma) * (b[i] - mb);
    }
    if (saa <= 0 || sbb <= 0) return fm::kMissing;
    return sab / std::sqrt(saa * sbb);
}

inline double oracle_spearman(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> xa, xb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (fm::is_missing(a[i]) || fm::is_missing(b[i])) continue;
        xa.push_back(a[i]);
        xb.push_back(b[i]);
    }
    if (xa.size() < 3) return fm::kMissing;
    return oracle_pearson(counting_ranks(xa), counting_ranks(xb));
}

// Random signal matrix with a controllable missing fraction.
inline fm::Mat random_signal(std::size_t T, std::size_t M, std::uint64_t seed,
                             double missing_frac = 0.1, double tie_frac = 0.2) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    fm::Mat out(T, M);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t m = 0; m < M; ++m) {
            if (u(rng) < missing_frac) continue;  // stays missing
            double v = u(rng);
            if (u(rng) < tie_frac) v = std::round(v * 5) / 5;  // force ties
            out.at(t, m) = v;
        }
    return out;
}

inline fm::Panel small_panel(std::size_t assets = 20, std::size_t bars = 200,
                             std::uint64_t seed = 7) {
    fm::SynthConfig cfg;
    cfg.n_assets = assets;
    cfg.n_bars = bars;
    cfg.seed = seed;
    return fm::synth_panel(cfg);
}

// A panel with a planted cross-sectional momentum structure: each asset has
// a persistent drift, so trailing mean returns predict the next bar.
inline fm::Panel planted_panel(std::size_t assets, std::size_t bars, std::uint64_t seed,
                               double drift_spread = 0.004, double noise = 0.001) {
    fm::Panel p = small_panel(assets, bars, seed);
    std::mt19937_64 rng(seed * 31 + 1);
    std::normal_distribution<double> g(0, 1);
    std::vector<double> mu(assets);
    for (std::size_t m = 0; m < assets; ++m)
        mu[m] = drift_spread * (2.0 * m / (assets - 1) - 1.0);
    for (std::size_t m = 0; m < assets; ++m) {
        double close = 100.0;
        for (std::size_t t = 0; t < bars; ++t) {
            double open = close;
            close = open * (1.0 + mu[m] + noise * g(rng));
            double hi = std::max(open, close) * 1.0005;
            double lo = std::min(open, close) * 0.9995;
            p.at(t, m, fm::FieldId::Open) = open;
            p.at(t, m, fm::FieldId::Close) = close;
            p.at(t, m, fm::FieldId::High) = hi;
            p.at(t, m, fm::FieldId::Low) = lo;
            p.at(t, m, fm::FieldId::Vwap) = 0.5 * (hi + lo);
            p.at(t, m, fm::FieldId::Amount) =
                p.at(t, m, fm::FieldId::Vwap) * p.at(t, m, fm::FieldId::Volume);
        }
    }
    p.derive_returns();
    return p;
}

}  // namespace testutil
