#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fm/expr.hpp"
#include "fm/kernels.hpp"
#include "fm/metrics.hpp"
#include "fm/panel.hpp"

namespace fm {

struct AdmissionThresholds {
    double tau_ic = 0.04;        // minimum fitness |E[IC_t]|
    double theta = 0.5;          // pairwise |rho| budget
    double repl_ic_floor = 0.10; // replacement absolute floor
    double repl_ratio = 1.3;     // replacement multiplicative margin

    void validate() const {
        if (!(theta > 0 && theta < 1)) throw ConfigError("thresholds: theta in (0,1)");
        if (!(tau_ic > 0)) throw ConfigError("thresholds: tau_ic > 0");
        if (!(repl_ratio > 1)) throw ConfigError("thresholds: repl_ratio > 1");
    }
};

struct LibraryEntry {
    int id = 0;
    std::string name;
    ExprPtr expr;
    FactorStats stats;
    Mat signal;  // cached realized signal; keeps the invariant re-checkable
};

struct Candidate {
    std::string name;
    ExprPtr expr;
    FactorStats stats;
    Mat signal;
};

struct Decision {
    enum class Kind { Admit, Replace, RejectLowIc, RejectCorr };
    Kind kind = Kind::RejectLowIc;
    int replace_id = -1;             // Replace target
    std::vector<int> blocking_ids;   // RejectCorr
    double max_corr = 0;
    int max_corr_id = -1;
    std::uint64_t lib_version = 0;   // staleness stamp
};

// The factor library L: ordered entries, ids never reused, all pairwise
// |rho| < theta re-checkable from cached signals. Single-writer.
class FactorLibrary {
public:
    const std::vector<LibraryEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::uint64_t version() const { return version_; }

    const LibraryEntry* find(int id) const {
        for (const auto& e : entries_)
            if (e.id == id) return &e;
        return nullptr;
    }

    double cached_corr(int a, int b) const {
        auto it = corr_cache_.find(a < b ? std::make_pair(a, b) : std::make_pair(b, a));
        return it == corr_cache_.end() ? kMissing : it->second;
    }

    // Correlation for redundancy decisions. Two signals with no jointly
    // evaluable bar (disjoint support, or one side cross-sectionally constant
    // wherever they overlap) provide no evidence of redundancy and count as 0.
    static double redundancy_corr(const Mat& a, const Mat& b) {
        try {
            return factor_corr(a, b);
        } catch (const MetricError&) {
            return 0.0;
        }
    }

    // Entry maximizing |rho(candidate, entry)|; (-1, 0) when empty.
    std::pair<int, double> max_corr(const Mat& candidate_signal) const {
        int best_id = -1;
        double best = 0;
        for (const auto& e : entries_) {
            if (!candidate_signal.same_shape(e.signal))
                throw MetricError("max_corr: shape mismatch with cached signals");
            double r = std::abs(redundancy_corr(candidate_signal, e.signal));
            if (best_id < 0 || r > best) {
                best = r;
                best_id = e.id;
            }
        }
        return {best_id, best_id < 0 ? 0.0 : best};
    }

    // Pure decision function over a library snapshot.
    Decision check_admission(const Candidate& cand, const AdmissionThresholds& th) const {
        Decision d;
        d.lib_version = version_;
        if (cand.stats.fitness < th.tau_ic) {
            d.kind = Decision::Kind::RejectLowIc;
            return d;
        }
        std::vector<std::pair<int, double>> violators;
        for (const auto& e : entries_) {
            double r = std::abs(redundancy_corr(cand.signal, e.signal));
            if (d.max_corr_id < 0 || r > d.max_corr) {
                d.max_corr = r;
                d.max_corr_id = e.id;
            }
            if (r >= th.theta) violators.emplace_back(e.id, r);
        }
        if (violators.empty()) {
            d.kind = Decision::Kind::Admit;
            return d;
        }
        if (violators.size() == 1 && cand.stats.fitness >= th.repl_ic_floor) {
            const LibraryEntry* g = find(violators[0].first);
            if (cand.stats.fitness >= th.repl_ratio * g->stats.fitness) {
                d.kind = Decision::Kind::Replace;
                d.replace_id = g->id;
                return d;
            }
        }
        d.kind = Decision::Kind::RejectCorr;
        for (const auto& [id, r] : violators) d.blocking_ids.push_back(id);
        return d;
    }

    // Applies a decision taken against this exact library state.
    void apply(const Decision& d, Candidate cand) {
        if (d.lib_version != version_)
            throw DataError("stale decision: library mutated since check");
        switch (d.kind) {
            case Decision::Kind::RejectLowIc:
            case Decision::Kind::RejectCorr:
                return;  // no-op, version unchanged
            case Decision::Kind::Replace: {
                auto it = std::find_if(entries_.begin(), entries_.end(),
                                       [&](const LibraryEntry& e) { return e.id == d.replace_id; });
                if (it == entries_.end()) throw DataError("replace target missing");
                int gone = it->id;
                entries_.erase(it);
                for (auto c = corr_cache_.begin(); c != corr_cache_.end();)
                    c = (c->first.first == gone || c->first.second == gone)
                            ? corr_cache_.erase(c)
                            : std::next(c);
                append(std::move(cand));
                return;
            }
            case Decision::Kind::Admit:
                append(std::move(cand));
                return;
        }
    }

    double total_fitness() const {
        double s = 0;
        for (const auto& e : entries_) s += e.stats.fitness;
        return s;
    }

    // Recomputes every pairwise |rho| from cached signals.
    double recomputed_max_pairwise_corr() const {
        double worst = 0;
        for (std::size_t i = 0; i < entries_.size(); ++i)
            for (std::size_t j = i + 1; j < entries_.size(); ++j)
                worst = std::max(worst, std::abs(redundancy_corr(entries_[i].signal,
                                                                 entries_[j].signal)));
        return worst;
    }

    void assert_invariant(double theta) const {
        for (const auto& [pair, r] : corr_cache_)
            if (std::abs(r) >= theta)
                throw DataError("library invariant violated: |rho(" +
                                std::to_string(pair.first) + "," +
                                std::to_string(pair.second) + ")| = " + std::to_string(r));
    }

    void set_next_id(int id) { next_id_ = id; }

private:
    std::vector<LibraryEntry> entries_;
    std::map<std::pair<int, int>, double> corr_cache_;
    int next_id_ = 1;
    std::uint64_t version_ = 0;

    void append(Candidate cand) {
        LibraryEntry e;
        e.id = next_id_++;
        e.name = cand.name.empty() ? ("factor_" + std::to_string(e.id)) : cand.name;
        e.expr = std::move(cand.expr);
        e.stats = cand.stats;
        e.signal = std::move(cand.signal);
        for (const auto& other : entries_) {
            double r = redundancy_corr(e.signal, other.signal);
            corr_cache_[{std::min(other.id, e.id), std::max(other.id, e.id)}] = r;
        }
        entries_.push_back(std::move(e));
        ++version_;
    }
};

// TSV persistence: id<TAB>name<TAB>formula, UTF-8, LF.
inline void save_library(const FactorLibrary& lib, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& e : lib.entries())
        out << e.id << '\t' << e.name << '\t' << format(*e.expr) << '\n';
}

// Re-evaluates each formula against the panel, recomputes stats, and
// re-verifies the pairwise constraint.
inline FactorLibrary load_library(const std::string& path, const Panel& panel,
                                  const AdmissionThresholds& th,
                                  Backend backend = Backend::Optimized) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    Mat target = forward_return(panel);
    FactorLibrary lib;
    std::string line;
    std::size_t lineno = 0;
    int max_id = 0;
    struct Row {
        int id;
        std::string name;
        ExprPtr expr;
    };
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto tab1 = line.find('\t');
        auto tab2 = line.find('\t', tab1 == std::string::npos ? 0 : tab1 + 1);
        if (tab1 == std::string::npos || tab2 == std::string::npos)
            throw ParseError("library line " + std::to_string(lineno) + ": expected 3 columns", 0);
        Row r;
        try {
            r.id = std::stoi(line.substr(0, tab1));
            r.name = line.substr(tab1 + 1, tab2 - tab1 - 1);
            r.expr = parse(line.substr(tab2 + 1));
        } catch (const std::exception& e) {
            throw ParseError("library line " + std::to_string(lineno) + ": " + e.what(), 0);
        }
        max_id = std::max(max_id, r.id);
        rows.push_back(std::move(r));
    }
    // ids must survive the round trip: replay entries in file order
    std::vector<Candidate> cands;
    for (auto& r : rows) {
        Candidate c;
        c.name = r.name;
        c.expr = r.expr;
        c.signal = evaluate(*r.expr, panel, backend);
        c.stats = compute_stats(c.signal, target, panel.timestamps);
        lib.set_next_id(r.id);
        Decision d;
        d.kind = Decision::Kind::Admit;
        d.lib_version = lib.version();
        lib.apply(d, std::move(c));
    }
    lib.set_next_id(max_id + 1);
    for (const auto& a : lib.entries())
        for (const auto& b : lib.entries()) {
            if (a.id >= b.id) continue;
            double r = std::abs(lib.cached_corr(a.id, b.id));
            if (r >= th.theta)
                throw DataError("library integrity error: |rho(" + std::to_string(a.id) +
                                "," + std::to_string(b.id) + ")| = " + std::to_string(r) +
                                " >= theta");
        }
    return lib;
}

}  // namespace fm
