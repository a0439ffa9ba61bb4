#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fm/common.hpp"

namespace fm {

// Raw field registry. `returns` is derived (close-to-close), never ingested.
enum class FieldId : int {
    Open = 0, High, Low, Close, Volume, Amount, Vwap, Returns,
};
inline constexpr int kNumFields = 8;

inline const char* field_name(FieldId f) {
    static const char* names[] = {"open", "high", "low", "close",
                                  "volume", "amount", "vwap", "returns"};
    return names[static_cast<int>(f)];
}

inline bool field_from_name(std::string_view s, FieldId& out) {
    for (int i = 0; i < kNumFields; ++i) {
        if (s == field_name(static_cast<FieldId>(i))) {
            out = static_cast<FieldId>(i);
            return true;
        }
    }
    return false;
}

// The market tensor: (time, asset, field), immutable after construction.
// Assets with no data at a timestamp stay in the universe as missing cells.
class Panel {
public:
    std::vector<std::int64_t> timestamps;  // epoch seconds UTC, strictly increasing
    std::vector<std::string> assets;
    std::vector<double> values;  // (T * M * F) dense, NaN = missing

    std::size_t n_bars() const { return timestamps.size(); }
    std::size_t n_assets() const { return assets.size(); }

    double& at(std::size_t t, std::size_t m, FieldId f) {
        return values[(t * n_assets() + m) * kNumFields + static_cast<int>(f)];
    }
    double at(std::size_t t, std::size_t m, FieldId f) const {
        return values[(t * n_assets() + m) * kNumFields + static_cast<int>(f)];
    }

    // Copies one field as a (T, M) matrix.
    Mat field(FieldId f) const {
        Mat out(n_bars(), n_assets());
        for (std::size_t t = 0; t < n_bars(); ++t)
            for (std::size_t m = 0; m < n_assets(); ++m)
                out.at(t, m) = at(t, m, f);
        return out;
    }

    // First `m_count` assets by index; used for the fast screening universe.
    Panel head_assets(std::size_t m_count) const {
        m_count = std::min(m_count, n_assets());
        Panel p;
        p.timestamps = timestamps;
        p.assets.assign(assets.begin(), assets.begin() + m_count);
        p.values.resize(n_bars() * m_count * kNumFields);
        for (std::size_t t = 0; t < n_bars(); ++t)
            for (std::size_t m = 0; m < m_count; ++m)
                for (int f = 0; f < kNumFields; ++f)
                    p.values[(t * m_count + m) * kNumFields + f] =
                        at(t, m, static_cast<FieldId>(f));
        return p;
    }

    void derive_returns() {
        for (std::size_t m = 0; m < n_assets(); ++m) {
            at(0, m, FieldId::Returns) = kMissing;
            for (std::size_t t = 1; t < n_bars(); ++t) {
                double c1 = at(t, m, FieldId::Close);
                double c0 = at(t - 1, m, FieldId::Close);
                at(t, m, FieldId::Returns) =
                    (is_missing(c1) || is_missing(c0) || c0 == 0.0)
                        ? kMissing
                        : c1 / c0 - 1.0;
            }
        }
    }

    void check_invariants() const {
        for (std::size_t t = 1; t < n_bars(); ++t)
            if (timestamps[t] <= timestamps[t - 1])
                throw DataError("timestamps not strictly increasing");
        for (std::size_t i = 0; i < assets.size(); ++i)
            for (std::size_t j = i + 1; j < assets.size(); ++j)
                if (assets[i] == assets[j])
                    throw DataError("duplicate asset identifier: " + assets[i]);
        for (std::size_t t = 0; t < n_bars(); ++t)
            for (std::size_t m = 0; m < n_assets(); ++m) {
                for (FieldId f : {FieldId::Open, FieldId::High, FieldId::Low,
                                  FieldId::Close, FieldId::Vwap}) {
                    double x = at(t, m, f);
                    if (!is_missing(x) && x <= 0.0)
                        throw DataError("non-positive price value");
                }
                for (FieldId f : {FieldId::Volume, FieldId::Amount}) {
                    double x = at(t, m, f);
                    if (!is_missing(x) && x < 0.0)
                        throw DataError("negative volume/amount");
                }
            }
    }
};

struct SynthConfig {
    std::size_t n_assets = 50;
    std::size_t n_bars = 2000;
    std::uint64_t seed = 42;
    double base_price = 100.0;
    double vol_scale = 0.01;
    double volume_scale = 1e5;

    void validate() const {
        if (n_assets < 2) throw ConfigError("synth: n_assets must be >= 2");
        if (n_bars < 2) throw ConfigError("synth: n_bars must be >= 2");
        if (vol_scale <= 0.0) throw ConfigError("synth: vol_scale must be > 0");
    }
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

inline bool parse_double(std::string_view s, double& out) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    auto res = std::from_chars(b, e, out);
    return res.ec == std::errc() && res.ptr == e;
}

inline bool parse_i64(std::string_view s, std::int64_t& out) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    auto res = std::from_chars(b, e, out);
    return res.ec == std::errc() && res.ptr == e;
}

}  // namespace detail

// CSV schema: timestamp,asset,open,high,low,close,volume,amount,vwap
// Integer epoch-second timestamps, dot decimals, no thousands separators.
inline Panel load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty file: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "timestamp,asset,open,high,low,close,volume,amount,vwap")
        throw ParseError("bad CSV header", 0);

    struct Row {
        std::int64_t ts;
        std::string asset;
        double f[7];
        std::size_t lineno;
    };
    std::vector<Row> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto parts = detail::split_csv_line(line);
        if (parts.size() != 9)
            throw ParseError("line " + std::to_string(lineno) + ": expected 9 columns", 0);
        Row r;
        r.lineno = lineno;
        if (!detail::parse_i64(parts[0], r.ts))
            throw ParseError("line " + std::to_string(lineno) + ": bad timestamp", 0);
        r.asset = std::string(parts[1]);
        for (int i = 0; i < 7; ++i) {
            if (parts[2 + i].empty()) {
                r.f[i] = kMissing;
            } else if (!detail::parse_double(parts[2 + i], r.f[i])) {
                throw ParseError("line " + std::to_string(lineno) + ": bad number in column " +
                                     std::to_string(3 + i), 0);
            }
        }
        // columns: open high low close volume amount vwap
        for (int i : {0, 1, 2, 3, 6})
            if (!is_missing(r.f[i]) && r.f[i] <= 0.0)
                throw DataError("line " + std::to_string(lineno) + ": non-positive price");
        for (int i : {4, 5})
            if (!is_missing(r.f[i]) && r.f[i] < 0.0)
                throw DataError("line " + std::to_string(lineno) + ": negative volume/amount");
        rows.push_back(std::move(r));
    }

    std::vector<std::int64_t> ts;
    std::vector<std::string> assets;
    for (const auto& r : rows) {
        ts.push_back(r.ts);
        assets.push_back(r.asset);
    }
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    std::sort(assets.begin(), assets.end());
    assets.erase(std::unique(assets.begin(), assets.end()), assets.end());

    std::map<std::int64_t, std::size_t> ts_idx;
    for (std::size_t i = 0; i < ts.size(); ++i) ts_idx[ts[i]] = i;
    std::map<std::string, std::size_t> as_idx;
    for (std::size_t i = 0; i < assets.size(); ++i) as_idx[assets[i]] = i;

    Panel p;
    p.timestamps = ts;
    p.assets = assets;
    p.values.assign(ts.size() * assets.size() * kNumFields, kMissing);
    std::vector<bool> seen(ts.size() * assets.size(), false);
    for (const auto& r : rows) {
        std::size_t t = ts_idx[r.ts];
        std::size_t m = as_idx[r.asset];
        if (seen[t * assets.size() + m])
            throw DataError("line " + std::to_string(r.lineno) +
                            ": duplicate (timestamp, asset) pair: " + std::to_string(r.ts) +
                            ", " + r.asset);
        seen[t * assets.size() + m] = true;
        for (int i = 0; i < 7; ++i)
            p.at(t, m, static_cast<FieldId>(i)) = r.f[i];
    }
    p.derive_returns();
    p.check_invariants();
    return p;
}

inline void save_csv(const Panel& p, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "timestamp,asset,open,high,low,close,volume,amount,vwap\n";
    char buf[64];
    auto fmt = [&](double x) -> std::string {
        if (is_missing(x)) return "";
        auto res = std::to_chars(buf, buf + sizeof(buf), x);
        return std::string(buf, res.ptr);
    };
    for (std::size_t t = 0; t < p.n_bars(); ++t)
        for (std::size_t m = 0; m < p.n_assets(); ++m) {
            bool any = false;
            for (int f = 0; f < 7; ++f)
                if (!is_missing(p.at(t, m, static_cast<FieldId>(f)))) any = true;
            if (!any) continue;
            out << p.timestamps[t] << ',' << p.assets[m];
            for (int f = 0; f < 7; ++f)
                out << ',' << fmt(p.at(t, m, static_cast<FieldId>(f)));
            out << '\n';
        }
}

// Deterministic synthetic market: per-asset geometric random walk for close,
// open = previous close, high/low bracket both with positive spread,
// log-normal volume, vwap = amount / volume by construction.
inline Panel synth_panel(const SynthConfig& cfg) {
    cfg.validate();
    Panel p;
    p.timestamps.resize(cfg.n_bars);
    const std::int64_t t0 = 1704067200;  // 2024-01-01T00:00:00Z
    for (std::size_t t = 0; t < cfg.n_bars; ++t)
        p.timestamps[t] = t0 + static_cast<std::int64_t>(t) * 600;
    p.assets.resize(cfg.n_assets);
    for (std::size_t m = 0; m < cfg.n_assets; ++m) {
        char name[16];
        std::snprintf(name, sizeof(name), "A%04zu", m);
        p.assets[m] = name;
    }
    p.values.assign(cfg.n_bars * cfg.n_assets * kNumFields, kMissing);

    for (std::size_t m = 0; m < cfg.n_assets; ++m) {
        std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + m + 1);
        std::normal_distribution<double> z(0.0, 1.0);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double close = cfg.base_price * std::exp(0.5 * (u(rng) - 0.5));
        for (std::size_t t = 0; t < cfg.n_bars; ++t) {
            double open = close;
            close = open * std::exp(cfg.vol_scale * z(rng));
            double hi = std::max(open, close);
            double lo = std::min(open, close);
            double spread = (hi - lo + 1e-4 * hi);
            double high = hi + 0.3 * spread * u(rng);
            double low = lo - 0.3 * spread * u(rng);
            if (low <= 0.0) low = 0.5 * lo;
            double volume = cfg.volume_scale * std::exp(0.5 * z(rng));
            double vwap = low + u(rng) * (high - low);
            double amount = vwap * volume;
            p.at(t, m, FieldId::Open) = open;
            p.at(t, m, FieldId::High) = high;
            p.at(t, m, FieldId::Low) = low;
            p.at(t, m, FieldId::Close) = close;
            p.at(t, m, FieldId::Volume) = volume;
            p.at(t, m, FieldId::Amount) = amount;
            p.at(t, m, FieldId::Vwap) = vwap;
        }
    }
    p.derive_returns();
    return p;
}

// Prediction target: next-bar open-to-close change ratio, per asset.
// Distinct from the `returns` raw field (close-to-close).
inline Mat forward_return(const Panel& p) {
    Mat out(p.n_bars(), p.n_assets());
    for (std::size_t t = 0; t + 1 < p.n_bars(); ++t)
        for (std::size_t m = 0; m < p.n_assets(); ++m) {
            double o = p.at(t + 1, m, FieldId::Open);
            double c = p.at(t + 1, m, FieldId::Close);
            out.at(t, m) = (is_missing(o) || is_missing(c) || o == 0.0)
                               ? kMissing
                               : (c - o) / o;
        }
    return out;
}

}  // namespace fm
