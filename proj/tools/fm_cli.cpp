// Command-line surface: data synthesis, evaluation, mining, ablation,
// combination, selection, cost stress, and kernel benchmarks. Thin adapters
// only; all numerics live in the headers.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fm/batch.hpp"
#include "fm/miner.hpp"
#include "fm/portfolio.hpp"

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& where,
                    std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw fm::ConfigError("config: " + where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw fm::ConfigError("config: unknown key '" + where + "." + it.key() + "'");
    }
}

fm::Backend backend_from(const std::string& s) {
    if (s == "naive") return fm::Backend::Naive;
    if (s == "optimized") return fm::Backend::Optimized;
    throw fm::ConfigError("backend must be 'naive' or 'optimized'");
}

fm::GeneratorChoice generator_from(const std::string& s) {
    if (s == "random") return fm::GeneratorChoice::Random;
    if (s == "guided") return fm::GeneratorChoice::Guided;
    if (s == "external") return fm::GeneratorChoice::External;
    throw fm::ConfigError("generator must be 'random', 'guided', or 'external'");
}

struct RunConfig {
    fm::SynthConfig synth;
    fm::MiningConfig mining;
    std::string panel_path;
    std::string library_path = "library.tsv";
    std::string memory_in;
    std::string memory_out = "memory.json";
    std::string run_log = "run_log.txt";
    int quantiles = 5;
    std::vector<double> costs_bps = {1, 4, 7, 10, 11};
};

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw fm::DataError("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw fm::ConfigError("config parse error in " + path + ": " + e.what());
    }
    reject_unknown(j, "", {"synth", "gen", "thresholds", "mining", "memory", "paths", "report"});
    RunConfig cfg;
    if (j.contains("synth")) {
        const json& s = j["synth"];
        reject_unknown(s, "synth",
                       {"assets", "bars", "seed", "base_price", "vol_scale", "volume_scale"});
        cfg.synth.n_assets = s.value("assets", cfg.synth.n_assets);
        cfg.synth.n_bars = s.value("bars", cfg.synth.n_bars);
        cfg.synth.seed = s.value("seed", cfg.synth.seed);
        cfg.synth.base_price = s.value("base_price", cfg.synth.base_price);
        cfg.synth.vol_scale = s.value("vol_scale", cfg.synth.vol_scale);
        cfg.synth.volume_scale = s.value("volume_scale", cfg.synth.volume_scale);
    }
    if (j.contains("gen")) {
        const json& g = j["gen"];
        reject_unknown(g, "gen",
                       {"max_depth", "max_nodes", "leaf_probability_ramp", "window_choices",
                        "const_min", "const_max"});
        auto& gc = cfg.mining.gen;
        gc.max_depth = g.value("max_depth", gc.max_depth);
        gc.max_nodes = g.value("max_nodes", gc.max_nodes);
        gc.leaf_probability_ramp = g.value("leaf_probability_ramp", gc.leaf_probability_ramp);
        if (g.contains("window_choices"))
            gc.window_choices = g["window_choices"].get<std::vector<int>>();
        gc.const_min = g.value("const_min", gc.const_min);
        gc.const_max = g.value("const_max", gc.const_max);
    }
    if (j.contains("thresholds")) {
        const json& t = j["thresholds"];
        reject_unknown(t, "thresholds", {"tau_ic", "theta", "repl_ic_floor", "repl_ratio"});
        auto& th = cfg.mining.thresholds;
        th.tau_ic = t.value("tau_ic", th.tau_ic);
        th.theta = t.value("theta", th.theta);
        th.repl_ic_floor = t.value("repl_ic_floor", th.repl_ic_floor);
        th.repl_ratio = t.value("repl_ratio", th.repl_ratio);
    }
    if (j.contains("mining")) {
        const json& m = j["mining"];
        reject_unknown(m, "mining",
                       {"target_size", "max_batches", "batch_size", "fast_assets",
                        "full_assets", "generator", "workers", "seed", "backend",
                        "external_command", "external_timeout_ms"});
        auto& mc = cfg.mining;
        mc.target_size = m.value("target_size", mc.target_size);
        mc.max_batches = m.value("max_batches", mc.max_batches);
        mc.batch_size = m.value("batch_size", mc.batch_size);
        mc.fast_assets = m.value("fast_assets", mc.fast_assets);
        mc.full_assets = m.value("full_assets", mc.full_assets);
        if (m.contains("generator")) mc.generator = generator_from(m["generator"]);
        mc.workers = m.value("workers", mc.workers);
        mc.seed = m.value("seed", mc.seed);
        if (m.contains("backend")) mc.backend = backend_from(m["backend"]);
        mc.external.command = m.value("external_command", mc.external.command);
        mc.external.timeout_ms = m.value("external_timeout_ms", mc.external.timeout_ms);
    }
    if (j.contains("memory")) {
        const json& m = j["memory"];
        reject_unknown(m, "memory",
                       {"forbid_min_rejections", "forbid_max_admit_rate", "prune_min_attempts",
                        "prune_max_success_rate"});
        auto& mm = cfg.mining.memory_cfg;
        mm.forbid_min_rejections = m.value("forbid_min_rejections", mm.forbid_min_rejections);
        mm.forbid_max_admit_rate = m.value("forbid_max_admit_rate", mm.forbid_max_admit_rate);
        mm.prune_min_attempts = m.value("prune_min_attempts", mm.prune_min_attempts);
        mm.prune_max_success_rate = m.value("prune_max_success_rate", mm.prune_max_success_rate);
    }
    if (j.contains("paths")) {
        const json& p = j["paths"];
        reject_unknown(p, "paths", {"panel", "library", "memory_in", "memory_out", "run_log"});
        cfg.panel_path = p.value("panel", cfg.panel_path);
        cfg.library_path = p.value("library", cfg.library_path);
        cfg.memory_in = p.value("memory_in", cfg.memory_in);
        cfg.memory_out = p.value("memory_out", cfg.memory_out);
        cfg.run_log = p.value("run_log", cfg.run_log);
    }
    if (j.contains("report")) {
        const json& r = j["report"];
        reject_unknown(r, "report", {"quantiles", "costs_bps"});
        cfg.quantiles = r.value("quantiles", cfg.quantiles);
        if (r.contains("costs_bps")) cfg.costs_bps = r["costs_bps"].get<std::vector<double>>();
    }
    return cfg;
}

fm::Panel load_or_synth(const std::string& panel_path, const fm::SynthConfig& synth) {
    if (!panel_path.empty()) return fm::load_csv(panel_path);
    return fm::synth_panel(synth);
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw fm::DataError("cannot write " + path);
    out << content;
}

std::string num(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

// Library entries as aligned signal matrices plus train ICs.
struct LoadedFactors {
    std::vector<int> ids;
    std::vector<fm::Mat> signals;
    std::vector<double> train_ics;
};

LoadedFactors realize_library(const fm::FactorLibrary& lib, const fm::Panel& panel,
                              const fm::Mat& target, std::size_t train_bars,
                              fm::Backend backend) {
    LoadedFactors out;
    for (const auto& e : lib.entries()) {
        out.ids.push_back(e.id);
        fm::Mat sig = fm::evaluate(*e.expr, panel, backend);
        fm::Mat train(train_bars, sig.cols);
        for (std::size_t t = 0; t < train_bars; ++t)
            for (std::size_t m = 0; m < sig.cols; ++m) train.at(t, m) = sig.at(t, m);
        fm::Mat train_tgt(train_bars, sig.cols);
        for (std::size_t t = 0; t < train_bars; ++t)
            for (std::size_t m = 0; m < sig.cols; ++m) train_tgt.at(t, m) = target.at(t, m);
        std::vector<std::int64_t> ts(panel.timestamps.begin(),
                                     panel.timestamps.begin() + train_bars);
        double ic = 0;
        try {
            ic = fm::ic_mean(fm::ic_series(train, train_tgt, ts));
        } catch (const fm::MetricError&) {
        }
        out.train_ics.push_back(ic);
        out.signals.push_back(std::move(sig));
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"formulaic alpha mining toolkit"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "emit a synthetic panel CSV");
    fm::SynthConfig scfg;
    std::string out_path = "panel.csv";
    synth->add_option("--assets", scfg.n_assets);
    synth->add_option("--bars", scfg.n_bars);
    synth->add_option("--seed", scfg.seed);
    synth->add_option("-o,--out", out_path);
    synth->callback([&] { fm::save_csv(fm::synth_panel(scfg), out_path); });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate one formula into a tear-sheet");
    std::string ev_panel, ev_formula, ev_out = "out", ev_backend = "optimized";
    int ev_q = 5;
    ev->add_option("--panel", ev_panel)->required();
    ev->add_option("--formula", ev_formula)->required();
    ev->add_option("--backend", ev_backend);
    ev->add_option("--quantiles", ev_q);
    ev->add_option("-o,--out", ev_out);
    ev->callback([&] {
        std::filesystem::create_directories(ev_out);
        fm::Panel panel = fm::load_csv(ev_panel);
        fm::ExprPtr e = fm::parse(ev_formula);
        fm::Mat sig = fm::evaluate(*e, panel, backend_from(ev_backend));
        fm::Mat target = fm::forward_return(panel);
        fm::FactorStats st = fm::compute_stats(sig, target, panel.timestamps);
        fm::QuantileReport qr = fm::quantile_analysis(sig, target, ev_q);
        double tno = fm::turnover(sig, ev_q);

        std::ostringstream ts;
        ts << "metric,value\n"
           << "formula," << fm::format(*e) << "\n"
           << "ic_mean," << num(st.ic_mean) << "\n"
           << "icir," << num(st.icir) << "\n"
           << "ic_win_rate_daily," << num(st.daily_win_rate) << "\n";
        for (std::size_t k = 0; k < qr.quantile_returns.size(); ++k)
            ts << "q" << (k + 1) << "_return," << num(qr.quantile_returns[k]) << "\n";
        ts << "long_short_return," << num(qr.long_short_mean) << "\n"
           << "long_short_cumulative," << num(qr.long_short_cum.back()) << "\n"
           << "monotonicity," << num(qr.monotonicity) << "\n"
           << "avg_turnover," << num(tno) << "\n";
        write_file(ev_out + "/tearsheet.csv", ts.str());

        fm::ICSeries ics = fm::ic_series(sig, target, panel.timestamps);
        std::ostringstream is;
        is << "timestamp,ic\n";
        for (std::size_t t = 0; t < ics.values.size(); ++t)
            if (!fm::is_missing(ics.values[t]))
                is << ics.timestamps[t] << ',' << num(ics.values[t]) << "\n";
        write_file(ev_out + "/ic_series.csv", is.str());
    });

    // ---- mine / ablate ----
    auto add_mine_like = [&](const char* name, const char* desc, bool ablate) {
        auto* cmd = app.add_subcommand(name, desc);
        auto config_path = std::make_shared<std::string>();
        auto panel_override = std::make_shared<std::string>();
        auto seed_override = std::make_shared<std::int64_t>(-1);
        auto workers_override = std::make_shared<int>(-1);
        auto out_report = std::make_shared<std::string>("ablation.csv");
        cmd->add_option("--config", *config_path)->required();
        cmd->add_option("--panel", *panel_override);
        cmd->add_option("--seed", *seed_override);
        cmd->add_option("--workers", *workers_override);
        if (ablate) cmd->add_option("-o,--out", *out_report);
        cmd->callback([=] {
            RunConfig cfg = load_run_config(*config_path);
            if (!panel_override->empty()) cfg.panel_path = *panel_override;
            if (*seed_override >= 0)
                cfg.mining.seed = static_cast<std::uint64_t>(*seed_override);
            if (*workers_override > 0)
                cfg.mining.workers = static_cast<unsigned>(*workers_override);
            fm::Panel panel = load_or_synth(cfg.panel_path, cfg.synth);
            fm::ExperienceMemory mem;
            if (!cfg.memory_in.empty()) mem = fm::load_memory(cfg.memory_in);
            std::ofstream log(cfg.run_log, std::ios::binary);
            if (!log) throw fm::DataError("cannot write " + cfg.run_log);
            if (ablate) {
                fm::AblationReport rep = fm::ablation_run(panel, cfg.mining, mem, &log);
                write_file(*out_report, rep.to_csv());
            } else {
                fm::MiningResult res = fm::ralph_loop(panel, cfg.mining, mem, true, &log);
                fm::save_library(res.library, cfg.library_path);
                fm::save_memory(res.memory, cfg.memory_out);
            }
        });
    };
    add_mine_like("mine", "run the mining loop from a config", false);
    add_mine_like("ablate", "with_memory vs no_memory comparison", true);

    // ---- combine ----
    auto* comb = app.add_subcommand("combine", "combine library factors into one signal");
    std::string cb_panel, cb_lib, cb_method = "equal", cb_out = "combined.csv";
    std::size_t cb_train = 0;
    comb->add_option("--panel", cb_panel)->required();
    comb->add_option("--library", cb_lib)->required();
    comb->add_option("--method", cb_method);
    comb->add_option("--train-bars", cb_train);
    comb->add_option("-o,--out", cb_out);
    comb->callback([&] {
        fm::Panel panel = fm::load_csv(cb_panel);
        fm::AdmissionThresholds th;
        fm::FactorLibrary lib = fm::load_library(cb_lib, panel, th);
        if (lib.size() == 0) throw fm::DataError("empty library");
        fm::Mat target = fm::forward_return(panel);
        std::size_t train = cb_train == 0 ? panel.n_bars() / 2 : cb_train;
        LoadedFactors f = realize_library(lib, panel, target, train, fm::Backend::Optimized);
        fm::CombinedSignal c;
        if (cb_method == "equal")
            c = fm::combine_equal(f.signals, f.train_ics);
        else if (cb_method == "ic_weighted")
            c = fm::combine_ic_weighted(f.signals, f.train_ics);
        else if (cb_method == "orthogonal")
            c = fm::combine_orthogonal(f.signals, f.train_ics);
        else
            throw fm::ConfigError("method must be equal, ic_weighted, or orthogonal");
        fm::FactorStats st = fm::compute_stats(c.signal, target, panel.timestamps);
        std::ostringstream os;
        os << "method,factor_id,weight,sign,combined_ic,combined_icir\n";
        for (std::size_t i = 0; i < f.ids.size(); ++i)
            os << c.method << ',' << f.ids[i] << ',' << num(c.weights[i]) << ','
               << c.signs[i] << ',' << num(st.ic_mean) << ',' << num(st.icir) << "\n";
        write_file(cb_out, os.str());
    });

    // ---- select ----
    auto* sel = app.add_subcommand("select", "sparse factor selection over a library");
    std::string sl_panel, sl_lib, sl_method = "lasso", sl_out = "selection.csv";
    std::string sl_design;
    std::vector<double> sl_grid = {0.0, 1e-4, 1e-3, 1e-2, 0.1};
    std::size_t sl_train = 0, sl_steps = 10;
    sel->add_option("--panel", sl_panel)->required();
    sel->add_option("--library", sl_lib)->required();
    sel->add_option("--method", sl_method);
    sel->add_option("--lambda-grid", sl_grid);
    sel->add_option("--train-bars", sl_train);
    sel->add_option("--max-steps", sl_steps);
    sel->add_option("--export-design", sl_design);
    sel->add_option("-o,--out", sl_out);
    sel->callback([&] {
        fm::Panel panel = fm::load_csv(sl_panel);
        fm::AdmissionThresholds th;
        fm::FactorLibrary lib = fm::load_library(sl_lib, panel, th);
        if (lib.size() == 0) throw fm::DataError("empty library");
        fm::Mat target = fm::forward_return(panel);
        std::size_t train = sl_train == 0 ? panel.n_bars() / 2 : sl_train;
        LoadedFactors f = realize_library(lib, panel, target, train, fm::Backend::Optimized);
        if (!sl_design.empty()) {
            std::ofstream d(sl_design, std::ios::binary);
            if (!d) throw fm::DataError("cannot write " + sl_design);
            fm::export_design_matrix(f.signals, f.ids, target, panel.timestamps,
                                     panel.assets, d);
        }
        if (sl_method == "lasso") {
            fm::LassoResult r =
                fm::select_lasso(f.signals, target, panel.timestamps, sl_grid, train);
            write_file(sl_out, r.report.to_csv(f.ids));
        } else if (sl_method == "stepwise") {
            fm::StepwiseResult r =
                fm::select_stepwise(f.signals, target, panel.timestamps, sl_steps);
            write_file(sl_out, r.to_csv(f.ids));
        } else {
            throw fm::ConfigError("method must be lasso or stepwise");
        }
    });

    // ---- stress ----
    auto* stress = app.add_subcommand("stress", "cost stress for one formula");
    std::string st_panel, st_formula, st_out = "stress.csv";
    std::vector<double> st_costs = {1, 4, 7, 10, 11};
    int st_q = 5;
    stress->add_option("--panel", st_panel)->required();
    stress->add_option("--formula", st_formula)->required();
    stress->add_option("--costs", st_costs);
    stress->add_option("--quantiles", st_q);
    stress->add_option("-o,--out", st_out);
    stress->callback([&] {
        fm::Panel panel = fm::load_csv(st_panel);
        fm::Mat sig = fm::evaluate(*fm::parse(st_formula), panel, fm::Backend::Optimized);
        fm::CostStressReport rep =
            fm::cost_stress(sig, fm::forward_return(panel), st_q, st_costs);
        std::ostringstream os;
        os << "timestamp";
        for (double c : rep.costs_bps) os << ",net_cum_" << num(c) << "bps";
        os << "\n";
        for (std::size_t t = 0; t < panel.n_bars(); ++t) {
            os << panel.timestamps[t];
            for (const auto& series : rep.cumulative) os << ',' << num(series[t]);
            os << "\n";
        }
        write_file(st_out, os.str());
    });

    // ---- bench ----
    auto* bench = app.add_subcommand("bench", "naive vs optimized kernel timings");
    std::string bn_panel, bn_out = "bench.csv";
    int bn_repeats = 3, bn_window = 48;
    std::vector<std::string> bn_factors;
    bench->add_option("--panel", bn_panel)->required();
    bench->add_option("--repeats", bn_repeats);
    bench->add_option("--window", bn_window);
    bench->add_option("--factor", bn_factors);
    bench->add_option("-o,--out", bn_out);
    bench->callback([&] {
        fm::Panel panel = fm::load_csv(bn_panel);
        std::vector<fm::ExprPtr> exprs;
        for (const auto& f : bn_factors) exprs.push_back(fm::parse(f));
        write_file(bn_out, fm::bench_kernels(panel, exprs, bn_repeats, bn_window).to_csv());
    });

    CLI11_PARSE(app, argc, argv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
