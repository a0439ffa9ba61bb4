#pragma once

#include <algorithm>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fm/batch.hpp"
#include "fm/generator.hpp"
#include "fm/library.hpp"
#include "fm/memory.hpp"
#include "fm/metrics.hpp"

namespace fm {

enum class GeneratorChoice { Random, Guided, External };

inline const char* generator_name(GeneratorChoice g) {
    static const char* names[] = {"random", "guided", "external"};
    return names[static_cast<int>(g)];
}

struct MiningConfig {
    std::size_t target_size = 10;   // K
    std::size_t max_batches = 50;
    std::size_t batch_size = 16;    // B
    AdmissionThresholds thresholds;
    std::size_t fast_assets = 10;   // Stage-1 screen: first M_fast assets
    std::size_t full_assets = 0;    // 0 = whole panel
    GeneratorChoice generator = GeneratorChoice::Guided;
    ExternalGenerator external;
    GenConfig gen;
    MemoryConfig memory_cfg;
    unsigned workers = 1;
    std::uint64_t seed = 42;
    Backend backend = Backend::Optimized;

    void validate(const Panel& panel) const {
        thresholds.validate();
        gen.validate();
        if (target_size < 1) throw ConfigError("mining: target_size >= 1");
        if (batch_size < 1) throw ConfigError("mining: batch_size >= 1");
        std::size_t full = full_assets == 0 ? panel.n_assets() : full_assets;
        if (fast_assets < 1 || fast_assets > full || full > panel.n_assets())
            throw ConfigError("mining: need 1 <= fast_assets <= full_assets <= panel assets");
    }
};

struct BatchSummary {
    int batch_id = 0;
    std::size_t generated = 0;
    std::size_t stage1_pass = 0;
    std::size_t rejected_ic_stage1 = 0;
    std::size_t rejected_corr = 0;      // stages 2 and 4
    std::size_t rejected_dup = 0;       // stage 3
    std::size_t rejected_ic_stage4 = 0; // fast/full disagreement
    std::size_t admitted = 0;
    std::size_t replaced = 0;
    std::size_t eval_errors = 0;
    std::size_t signal_recommended = 0;
    std::size_t signal_forbidden = 0;
    std::size_t library_size_after = 0;
    std::vector<std::string> lessons;
};

inline std::string format_batch_summary(const BatchSummary& s) {
    std::ostringstream os;
    os << "=== Batch " << s.batch_id << " ===\n"
       << "Generated: " << s.generated << " candidates\n"
       << "Stage 1 (fast IC screen): " << s.stage1_pass << " passed, "
       << s.rejected_ic_stage1 << " rejected\n"
       << "Stage 2/3 (correlation): " << s.rejected_corr << " blocked, "
       << s.rejected_dup << " intra-batch duplicates\n"
       << "Stage 4 (full validation): " << s.admitted << " admitted, " << s.replaced
       << " replaced, " << s.rejected_ic_stage4 << " failed full-universe IC\n"
       << "Library size: " << s.library_size_after << "\n";
    if (!s.lessons.empty()) {
        os << "Lessons:\n";
        for (const auto& l : s.lessons) os << "  - " << l << "\n";
    }
    return os.str();
}

inline nlohmann::json trajectory_to_json(const TrajectoryRecord& r) {
    nlohmann::json j;
    j["batch"] = r.batch_id;
    j["formula"] = r.formula;
    j["signature"] = r.sig.key();
    j["fitness"] = r.fitness;
    j["icir"] = r.icir;
    j["max_corr"] = r.max_corr;
    j["blocking_ids"] = r.blocking_ids;
    j["outcome"] = outcome_name(r.outcome);
    j["stage"] = r.stage;
    return j;
}

struct MiningResult {
    FactorLibrary library;
    ExperienceMemory memory;
    std::vector<BatchSummary> batches;
    std::vector<TrajectoryRecord> trajectory;
};

namespace detail {

struct StagedCandidate {
    ExprPtr expr;
    std::string text;
    Mat signal;         // full-universe realized signal
    FactorStats stats;  // full-universe stats
    double max_corr = 0;
};

inline std::uint64_t batch_seed(std::uint64_t run_seed, int batch) {
    return run_seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(batch) + 1;
}

// One full pass of the loop body over a fixed candidate set: stages 1-4
// plus application. Separated from the driver so tests can feed hand-built
// batches. Mutates lib, appends to trajectory, returns the summary.
inline BatchSummary run_batch(std::vector<ExprPtr> candidates, int batch_id,
                              const Panel& fast_panel, const Mat& fast_target,
                              const Panel& full_panel, const Mat& full_target,
                              FactorLibrary& lib, const MiningConfig& cfg,
                              std::vector<TrajectoryRecord>& trajectory) {
    BatchSummary summary;
    summary.batch_id = batch_id;
    summary.generated = candidates.size();

    auto log = [&](const Expr& e, const FactorStats& st, Outcome outcome, int stage,
                   double max_corr = 0, std::vector<int> blocking = {}) {
        TrajectoryRecord r;
        r.formula = format(e);
        r.sig = signature(e);
        r.fitness = st.fitness;
        r.icir = st.icir;
        r.max_corr = max_corr;
        r.blocking_ids = std::move(blocking);
        r.outcome = outcome;
        r.batch_id = batch_id;
        r.stage = stage;
        trajectory.push_back(std::move(r));
    };

    // Stage 1: fast IC screen on the reduced universe
    auto fast_results = evaluate_batch(candidates, fast_panel, cfg.backend, cfg.workers);
    std::vector<std::size_t> stage1;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (!fast_results[i].ok()) {
            ++summary.eval_errors;
            ++summary.rejected_ic_stage1;
            log(*candidates[i], {}, Outcome::RejectedIc, 1);
            summary.lessons.push_back("eval error: " + fast_results[i].error);
            continue;
        }
        FactorStats st;
        try {
            st = compute_stats(*fast_results[i].signal, fast_target,
                               fast_panel.timestamps);
        } catch (const MetricError&) {
            // degenerate signal (constant or all-missing): no measurable IC
            ++summary.rejected_ic_stage1;
            log(*candidates[i], {}, Outcome::RejectedIc, 1);
            continue;
        }
        if (st.fitness >= cfg.thresholds.tau_ic) {
            stage1.push_back(i);
        } else {
            ++summary.rejected_ic_stage1;
            log(*candidates[i], st, Outcome::RejectedIc, 1);
        }
    }
    summary.stage1_pass = stage1.size();

    // Full-universe evaluation for every Stage-1 survivor
    std::vector<ExprPtr> survivors;
    for (std::size_t i : stage1) survivors.push_back(candidates[i]);
    auto full_results = evaluate_batch(survivors, full_panel, cfg.backend, cfg.workers);

    // Stage 2 correlation check + Stage 2.5 replacement routing, against the
    // library snapshot at batch start
    std::vector<StagedCandidate> admits, replacements;
    for (std::size_t k = 0; k < survivors.size(); ++k) {
        if (!full_results[k].ok()) {
            ++summary.eval_errors;
            ++summary.rejected_ic_stage4;
            log(*survivors[k], {}, Outcome::RejectedIc, 4);
            summary.lessons.push_back("eval error: " + full_results[k].error);
            continue;
        }
        StagedCandidate sc;
        sc.expr = survivors[k];
        sc.text = format(*survivors[k]);
        sc.signal = std::move(*full_results[k].signal);
        try {
            sc.stats = compute_stats(sc.signal, full_target, full_panel.timestamps);
        } catch (const MetricError&) {
            ++summary.rejected_ic_stage4;
            log(*survivors[k], {}, Outcome::RejectedIc, 4);
            continue;
        }
        Candidate cand{"", sc.expr, sc.stats, sc.signal};
        Decision d = lib.check_admission(cand, cfg.thresholds);
        sc.stats.max_library_corr = d.max_corr;
        sc.max_corr = d.max_corr;
        switch (d.kind) {
            case Decision::Kind::RejectLowIc:
                // passed the fast screen, failed the full universe
                ++summary.rejected_ic_stage4;
                log(*sc.expr, sc.stats, Outcome::RejectedIc, 4, d.max_corr);
                break;
            case Decision::Kind::RejectCorr:
                ++summary.rejected_corr;
                log(*sc.expr, sc.stats, Outcome::RejectedCorr, 2, d.max_corr,
                    d.blocking_ids);
                break;
            case Decision::Kind::Replace:
                replacements.push_back(std::move(sc));
                break;
            case Decision::Kind::Admit:
                admits.push_back(std::move(sc));
                break;
        }
    }

    auto by_fitness_desc = [](const StagedCandidate& a, const StagedCandidate& b) {
        if (a.stats.fitness != b.stats.fitness) return a.stats.fitness > b.stats.fitness;
        return a.text < b.text;
    };
    std::sort(admits.begin(), admits.end(), by_fitness_desc);
    std::sort(replacements.begin(), replacements.end(), by_fitness_desc);

    // Stage 3: intra-batch dedup, greedy by descending fitness; replacement
    // candidates bypass it (they target a specific library slot)
    std::vector<StagedCandidate> kept;
    for (auto& sc : admits) {
        bool dup = false;
        for (const auto& k : kept) {
            if (std::abs(FactorLibrary::redundancy_corr(sc.signal, k.signal)) >=
                cfg.thresholds.theta) {
                dup = true;
                break;
            }
        }
        if (dup) {
            ++summary.rejected_dup;
            log(*sc.expr, sc.stats, Outcome::RejectedDup, 3, sc.max_corr);
        } else {
            kept.push_back(std::move(sc));
        }
    }

    // Stage 4: re-run the admission check against the live library and apply;
    // replacements first, then admissions, each in descending fitness
    auto apply_one = [&](StagedCandidate& sc) {
        Candidate cand{"", sc.expr, sc.stats, sc.signal};
        Decision d = lib.check_admission(cand, cfg.thresholds);
        sc.stats.max_library_corr = d.max_corr;
        cand.stats = sc.stats;
        switch (d.kind) {
            case Decision::Kind::Admit:
                lib.apply(d, std::move(cand));
                ++summary.admitted;
                log(*sc.expr, sc.stats, Outcome::Admitted, 4, d.max_corr);
                break;
            case Decision::Kind::Replace:
                lib.apply(d, std::move(cand));
                ++summary.replaced;
                log(*sc.expr, sc.stats, Outcome::ReplacedIn, 4, d.max_corr);
                break;
            case Decision::Kind::RejectCorr:
                ++summary.rejected_corr;
                log(*sc.expr, sc.stats, Outcome::RejectedCorr, 4, d.max_corr,
                    d.blocking_ids);
                break;
            case Decision::Kind::RejectLowIc:
                ++summary.rejected_ic_stage4;
                log(*sc.expr, sc.stats, Outcome::RejectedIc, 4, d.max_corr);
                break;
        }
    };
    for (auto& sc : replacements) apply_one(sc);
    for (auto& sc : kept) apply_one(sc);

    summary.library_size_after = lib.size();
    return summary;
}

}  // namespace detail

// The mining loop. `use_memory = false` disables formation, evolution, and
// retrieval (the generators see an empty signal).
inline MiningResult ralph_loop(const Panel& panel, const MiningConfig& cfg,
                               ExperienceMemory memory = {}, bool use_memory = true,
                               std::ostream* run_log = nullptr) {
    cfg.validate(panel);
    Panel fast_panel = panel.head_assets(cfg.fast_assets);
    Panel full_panel =
        cfg.full_assets == 0 || cfg.full_assets == panel.n_assets()
            ? panel
            : panel.head_assets(cfg.full_assets);
    Mat fast_target = forward_return(fast_panel);
    Mat full_target = forward_return(full_panel);

    MiningResult res;
    res.memory = std::move(memory);

    for (std::size_t b = 0; b < cfg.max_batches && res.library.size() < cfg.target_size;
         ++b) {
        int batch_id = static_cast<int>(b);
        MemorySignal signal;
        if (use_memory) signal = retrieve(res.memory, res.library);

        GenConfig gcfg = cfg.gen;
        gcfg.seed = detail::batch_seed(cfg.seed, batch_id);
        std::vector<ExprPtr> candidates;
        try {
            switch (cfg.generator) {
                case GeneratorChoice::Random:
                    candidates = random_candidates(cfg.batch_size, OperatorRegistry::instance(), gcfg);
                    break;
                case GeneratorChoice::Guided:
                    candidates = guided_candidates(cfg.batch_size, signal,
                                                   OperatorRegistry::instance(), gcfg);
                    break;
                case GeneratorChoice::External:
                    candidates = external_candidates(cfg.batch_size, signal, cfg.external,
                                                     OperatorRegistry::instance());
                    break;
            }
        } catch (const GenerationError& e) {
            BatchSummary skipped;
            skipped.batch_id = batch_id;
            skipped.library_size_after = res.library.size();
            skipped.signal_recommended = signal.recommended.size();
            skipped.signal_forbidden = signal.forbidden.size();
            skipped.lessons.push_back(std::string("batch skipped: ") + e.what());
            if (run_log) *run_log << format_batch_summary(skipped);
            res.batches.push_back(std::move(skipped));
            continue;
        }

        std::size_t log_start = res.trajectory.size();
        BatchSummary summary =
            detail::run_batch(std::move(candidates), batch_id, fast_panel, fast_target,
                              full_panel, full_target, res.library, cfg, res.trajectory);
        summary.signal_recommended = signal.recommended.size();
        summary.signal_forbidden = signal.forbidden.size();

        res.library.assert_invariant(cfg.thresholds.theta);

        if (use_memory) {
            std::vector<TrajectoryRecord> batch_traj(res.trajectory.begin() + log_start,
                                                     res.trajectory.end());
            res.memory = evolve(res.memory, form(batch_traj), cfg.memory_cfg);
            res.memory.state.library_size = static_cast<long>(res.library.size());
        }

        if (run_log) {
            for (std::size_t i = log_start; i < res.trajectory.size(); ++i)
                *run_log << trajectory_to_json(res.trajectory[i]).dump() << "\n";
            *run_log << format_batch_summary(summary);
        }
        res.batches.push_back(std::move(summary));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Memory ablation: with_memory vs no_memory under relaxed screening
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string mode;
    std::size_t generated = 0;
    std::size_t high_quality = 0;  // Stage-1 passes
    double yield_pct = 0;
    std::size_t rejected_redundant = 0;  // correlation blocks + intra-batch dups
    double rejection_pct = 0;
    std::size_t admitted = 0;  // admissions + replacements
};

struct AblationReport {
    AdmissionThresholds thresholds;
    std::vector<AblationRow> rows;  // with_memory, no_memory
    MiningResult with_memory;
    MiningResult no_memory;

    std::string to_csv() const {
        std::ostringstream os;
        os << "mode,generated,high_quality,yield_pct,rejected_redundant,rejection_pct,admitted\n";
        for (const auto& r : rows)
            os << r.mode << ',' << r.generated << ',' << r.high_quality << ','
               << r.yield_pct << ',' << r.rejected_redundant << ',' << r.rejection_pct
               << ',' << r.admitted << "\n";
        return os.str();
    }
};

inline AblationRow summarize_ablation(const std::string& mode, const MiningResult& res) {
    AblationRow row;
    row.mode = mode;
    for (const auto& b : res.batches) {
        row.generated += b.generated;
        row.high_quality += b.stage1_pass;
        row.rejected_redundant += b.rejected_corr + b.rejected_dup;
        row.admitted += b.admitted + b.replaced;
    }
    if (row.generated > 0) row.yield_pct = 100.0 * row.high_quality / row.generated;
    if (row.high_quality > 0)
        row.rejection_pct = 100.0 * row.rejected_redundant / row.high_quality;
    return row;
}

inline AblationReport ablation_run(const Panel& panel, const MiningConfig& cfg,
                                   ExperienceMemory seed_memory = {},
                                   std::ostream* run_log = nullptr) {
    AblationReport rep;
    rep.thresholds = cfg.thresholds;
    rep.with_memory = ralph_loop(panel, cfg, seed_memory, true, run_log);
    rep.no_memory = ralph_loop(panel, cfg, {}, false, run_log);
    rep.rows.push_back(summarize_ablation("with_memory", rep.with_memory));
    rep.rows.push_back(summarize_ablation("no_memory", rep.no_memory));
    return rep;
}

}  // namespace fm
