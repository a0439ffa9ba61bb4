#pragma once

#include <atomic>
#include <chrono>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fm/kernels.hpp"

namespace fm {

struct EvalResult {
    std::optional<Mat> signal;
    std::string error;  // non-empty on failure
    bool ok() const { return signal.has_value(); }
};

// Evaluates a batch of expressions across a worker pool. Results come back
// in input order; per-expression failures are isolated, never aborting the
// batch. Output is identical for any worker count.
inline std::vector<EvalResult> evaluate_batch(const std::vector<ExprPtr>& exprs,
                                              const Panel& panel, Backend backend,
                                              unsigned workers = 1) {
    std::vector<EvalResult> results(exprs.size());
    if (exprs.empty()) return results;
    if (workers < 1) workers = 1;
    workers = std::min<unsigned>(workers, static_cast<unsigned>(exprs.size()));

    std::atomic<std::size_t> next{0};
    auto run = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= exprs.size()) break;
            try {
                results[i].signal = evaluate(*exprs[i], panel, backend);
            } catch (const std::exception& e) {
                results[i].error = std::string("expression ") + std::to_string(i) +
                                   ": " + e.what();
            }
        }
    };
    if (workers == 1) {
        run();
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run);
        for (auto& t : pool) t.join();
    }
    return results;
}

// ---------------------------------------------------------------------------
// Benchmark harness: per-operator and per-factor median wall times for both
// backends. CSV schema: name,kind,backend,median_ms,speedup_vs_naive
// ---------------------------------------------------------------------------

struct BenchRow {
    std::string name;
    std::string kind;  // "operator" | "factor"
    std::string backend;
    double median_ms;
    double speedup_vs_naive;
};

struct BenchReport {
    std::vector<BenchRow> rows;

    std::string to_csv() const {
        std::string out = "name,kind,backend,median_ms,speedup_vs_naive\n";
        char buf[128];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.3f,%.3f\n", r.name.c_str(),
                          r.kind.c_str(), r.backend.c_str(), r.median_ms,
                          r.speedup_vs_naive);
            out += buf;
        }
        return out;
    }
};

namespace detail {

inline double median_time_ms(const Expr& e, const Panel& panel, Backend backend,
                             int repeats) {
    std::vector<double> times;
    for (int r = 0; r < repeats; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        volatile double sink = evaluate(e, panel, backend).v.back();
        (void)sink;
        auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

}  // namespace detail

// Pure computation time, no I/O. Operator-level rows use a fixed probe
// expression per rolling/cross-sectional operator; factor-level rows time
// the supplied expressions end to end.
inline BenchReport bench_kernels(const Panel& panel, const std::vector<ExprPtr>& exprs,
                                 int repeats, int window = 48) {
    if (repeats < 3) throw ConfigError("bench: repeats must be >= 3");
    BenchReport report;

    auto bench_one = [&](const std::string& name, const std::string& kind,
                         const Expr& e) {
        double naive = detail::median_time_ms(e, panel, Backend::Naive, repeats);
        double opt = detail::median_time_ms(e, panel, Backend::Optimized, repeats);
        report.rows.push_back({name, kind, "naive", naive, 1.0});
        report.rows.push_back({name, kind, "optimized", opt, naive / opt});
    };

    const std::string w = std::to_string(window);
    static const std::vector<std::pair<const char*, const char*>> probes = {
        {"Mean", "Mean($close, W)"},     {"Std", "Std($close, W)"},
        {"Var", "Var($close, W)"},       {"Skew", "Skew($close, W)"},
        {"Kurt", "Kurt($close, W)"},     {"Med", "Med($close, W)"},
        {"Sum", "Sum($close, W)"},       {"TsRank", "TsRank($close, W)"},
        {"TsMax", "TsMax($close, W)"},   {"TsMin", "TsMin($close, W)"},
        {"TsArgMax", "TsArgMax($close, W)"},
        {"TsDecay", "TsDecay($close, W)"},
        {"WMA", "WMA($close, W)"},       {"Slope", "Slope($close, W)"},
        {"Rsquare", "Rsquare($close, W)"},
        {"Resi", "Resi($close, W)"},
        {"Corr", "Corr($close, $volume, W)"},
        {"CsRank", "CsRank($close)"},
    };
    for (const auto& [name, tmpl] : probes) {
        std::string text = tmpl;
        auto pos = text.find(", W)");
        if (pos != std::string::npos) text.replace(pos + 2, 1, w);
        bench_one(name, "operator", *parse(text));
    }
    for (std::size_t i = 0; i < exprs.size(); ++i)
        bench_one("factor_" + std::to_string(i), "factor", *exprs[i]);
    return report;
}

}  // namespace fm
