#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fm/expr.hpp"
#include "fm/memory.hpp"

namespace fm {

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GenConfig {
    int max_depth = 5;   // levels; root is level 1
    int max_nodes = 25;
    double leaf_probability_ramp = 0.25;  // p_leaf(level) = ramp * (level - 1)
    std::vector<int> window_choices = {3, 6, 12, 24, 48};
    double const_min = -2.0;
    double const_max = 2.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (max_depth < 1) throw ConfigError("gen: max_depth must be >= 1");
        if (window_choices.empty()) throw ConfigError("gen: window_choices empty");
        for (int w : window_choices)
            if (w < 2) throw ConfigError("gen: window choices must be >= 2");
    }
};

namespace gen {

// Numeric-output operators grouped by child arity; the sampling
// distribution is: leaf w.p. min(1, ramp*(level-1)), otherwise an operator
// drawn uniformly from the numeric-output inventory, windows uniform over
// window_choices, 90/10 field/constant leaves. IfElse conditions are
// logical subtrees: comparison w.p. 0.8, And/Or of two comparisons w.p. 0.2.
inline const std::vector<std::string>& numeric_ops(const OperatorRegistry& reg) {
    static const std::vector<std::string> ops = [&] {
        std::vector<std::string> out;
        for (const auto& [name, info] : reg.entries())
            if (info.out_kind == ValueKind::Numeric) out.push_back(name);
        return out;  // std::map iteration: already sorted
    }();
    return ops;
}

inline const std::vector<std::string>& comparison_ops() {
    static const std::vector<std::string> ops = {"Eq", "Greater", "GreaterEqual",
                                                 "Less", "LessEqual", "Ne"};
    return ops;
}

// Minimum node count to finish a subtree rooted at this operator.
inline int min_cost(const OpInfo& info) {
    int c = 1;
    for (ValueKind k : info.arg_kinds)
        c += k == ValueKind::Logical ? 3 : 1;  // logical child needs cmp + 2 leaves
    return c;
}

class Sampler {
public:
    Sampler(const OperatorRegistry& reg, const GenConfig& cfg, std::mt19937_64& rng)
        : reg_(reg), cfg_(cfg), rng_(rng) {}

    ExprPtr sample() {
        budget_ = cfg_.max_nodes;
        return numeric(1, 0);
    }

private:
    const OperatorRegistry& reg_;
    const GenConfig& cfg_;
    std::mt19937_64& rng_;
    int budget_ = 0;

    double u01() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
    std::size_t pick(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_);
    }

    ExprPtr leaf() {
        --budget_;
        if (u01() < 0.9)
            return Expr::make_field(static_cast<FieldId>(pick(kNumFields)));
        double v = cfg_.const_min + u01() * (cfg_.const_max - cfg_.const_min);
        return Expr::make_const(v);
    }

    int window(int min_w) {
        std::vector<int> ok;
        for (int w : cfg_.window_choices)
            if (w >= min_w) ok.push_back(w);
        if (ok.empty()) throw GenerationError("no admissible window choice");
        return ok[pick(ok.size())];
    }

    ExprPtr numeric(int level, int reserved) {
        double p_leaf = std::min(1.0, cfg_.leaf_probability_ramp * (level - 1));
        bool must_leaf = level >= cfg_.max_depth || budget_ - reserved < 2;
        if (must_leaf || u01() < p_leaf) return leaf();

        const auto& ops = numeric_ops(reg_);
        std::vector<const OpInfo*> affordable;
        for (const auto& name : ops) {
            const OpInfo* info = reg_.find(name);
            // IfElse conditions need depth headroom for the comparison level
            if (!info->arg_kinds.empty() && info->arg_kinds[0] == ValueKind::Logical &&
                level + 2 >= cfg_.max_depth + 1)
                continue;
            if (min_cost(*info) <= budget_ - reserved) affordable.push_back(info);
        }
        if (affordable.empty()) return leaf();
        const OpInfo& info = *affordable[pick(affordable.size())];
        --budget_;

        std::vector<ExprPtr> args;
        for (std::size_t i = 0; i < info.arg_kinds.size(); ++i) {
            int later = 0;
            for (std::size_t j = i + 1; j < info.arg_kinds.size(); ++j)
                later += info.arg_kinds[j] == ValueKind::Logical ? 3 : 1;
            args.push_back(info.arg_kinds[i] == ValueKind::Logical
                               ? logical(level + 1, reserved + later)
                               : numeric(level + 1, reserved + later));
        }
        std::vector<int> iparams;
        for (int k = 0; k < info.n_iparams; ++k)
            iparams.push_back(window(info.min_iparam));
        return Expr::make_call(info.name, std::move(args), std::move(iparams));
    }

    ExprPtr logical(int level, int reserved) {
        bool allow_junction = level + 2 < cfg_.max_depth && budget_ - reserved >= 7;
        if (allow_junction && u01() < 0.2) {
            --budget_;
            const char* name = u01() < 0.5 ? "And" : "Or";
            ExprPtr a = logical(level + 1, reserved + 3);
            ExprPtr b = logical(level + 1, reserved);
            return Expr::make_call(name, {a, b});
        }
        const auto& cmps = comparison_ops();
        const std::string& name = cmps[pick(cmps.size())];
        --budget_;
        ExprPtr a = numeric(level + 1, reserved + 1);
        ExprPtr b = numeric(level + 1, reserved);
        return Expr::make_call(name, {a, b});
    }
};

// Window/constant jitter that leaves the pattern signature untouched.
inline ExprPtr mutate_params(const Expr& e, const GenConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (e.kind == Expr::Kind::Const) {
        if (u(rng) < 0.5)
            return Expr::make_const(cfg.const_min + u(rng) * (cfg.const_max - cfg.const_min));
        return Expr::make_const(e.value);
    }
    if (e.kind == Expr::Kind::Field) return Expr::make_field(e.field);
    std::vector<ExprPtr> args;
    for (const auto& a : e.args)
        args.push_back(mutate_params(*a, cfg, rng));
    std::vector<int> iparams = e.iparams;
    const OpInfo* info = OperatorRegistry::instance().find(e.op);
    for (auto& w : iparams) {
        if (u(rng) >= 0.5) continue;
        std::vector<int> ok;
        for (int c : cfg.window_choices)
            if (c >= info->min_iparam) ok.push_back(c);
        if (!ok.empty())
            w = ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)];
    }
    return Expr::make_call(e.op, std::move(args), std::move(iparams));
}

}  // namespace gen

namespace detail {

// Shared candidate loop. A null/empty signal consumes randomness exactly
// like the unguided path, so random and guided coincide bit-for-bit then.
inline std::vector<ExprPtr> sample_candidates(std::size_t n, const OperatorRegistry& reg,
                                              const GenConfig& cfg,
                                              const MemorySignal* signal) {
    cfg.validate();
    if (n < 1) throw GenerationError("candidate count must be >= 1");
    std::mt19937_64 rng(cfg.seed);
    gen::Sampler sampler(reg, cfg, rng);
    const bool guided = signal && !signal->recommended.empty();
    double total_w = 0;
    if (guided)
        for (const auto& r : signal->recommended) total_w += r.weight;

    std::vector<ExprPtr> out;
    std::set<std::string> seen;
    std::size_t attempts = 0;
    const std::size_t max_attempts = 200 * n + 1000;
    std::size_t forbidden_hits = 0;
    while (out.size() < n) {
        if (++attempts > max_attempts) {
            if (signal && forbidden_hits > attempts / 2) {
                std::string names;
                for (const auto& f : signal->forbidden) names += f.sig_key + "; ";
                throw GenerationError("all probability mass forbidden by filters: " + names);
            }
            throw GenerationError("generation bounds too tight: could not sample " +
                                  std::to_string(n) + " unique valid candidates");
        }
        ExprPtr e;
        if (guided && std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= 0.25) {
            // 75% of the mass spread over recommended signatures by weight
            double u = std::uniform_real_distribution<double>(0.0, total_w)(rng);
            const MemorySignal::Rec* chosen = &signal->recommended.back();
            for (const auto& r : signal->recommended) {
                if (u < r.weight) {
                    chosen = &r;
                    break;
                }
                u -= r.weight;
            }
            if (!chosen->exemplar.empty()) {
                try {
                    e = gen::mutate_params(*parse(chosen->exemplar, reg), cfg, rng);
                } catch (const std::exception&) {
                    e = sampler.sample();
                }
            } else {
                e = sampler.sample();
            }
        } else {
            e = sampler.sample();
        }
        if (signal && signal->is_forbidden(signature_key(*e))) {
            ++forbidden_hits;
            continue;
        }
        std::string text = format(*e);
        if (!seen.insert(text).second) continue;
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace detail

// Typed random expression sampling (the RF baseline).
inline std::vector<ExprPtr> random_candidates(std::size_t n, const OperatorRegistry& reg,
                                              const GenConfig& cfg) {
    return detail::sample_candidates(n, reg, cfg, nullptr);
}

// Memory-conditioned sampling: recommended signatures seed exemplar-based
// draws, forbidden signatures are hard filters.
inline std::vector<ExprPtr> guided_candidates(std::size_t n, const MemorySignal& signal,
                                              const OperatorRegistry& reg,
                                              const GenConfig& cfg) {
    return detail::sample_candidates(n, reg, cfg, &signal);
}

// ---------------------------------------------------------------------------
// External generator protocol: one subprocess per batch, line-delimited
// JSON. Request on stdin, `{"formula":"..."}` lines back, `{"type":"done"}`
// terminator, hard timeout.
// ---------------------------------------------------------------------------

struct ExternalGenerator {
    std::string command;           // run via /bin/sh -c
    int timeout_ms = 120000;
};

inline nlohmann::json signal_to_json(const MemorySignal& signal) {
    nlohmann::json js;
    js["recommended"] = nlohmann::json::array();
    for (const auto& r : signal.recommended)
        js["recommended"].push_back({{"signature", r.sig_key},
                                     {"weight", r.weight},
                                     {"description", r.description}});
    js["forbidden"] = nlohmann::json::array();
    for (const auto& f : signal.forbidden)
        js["forbidden"].push_back({{"signature", f.sig_key}, {"reason", f.reason}});
    js["library"]["size"] = signal.library_size;
    js["library"]["saturation"] = signal.saturation;
    return js;
}

inline std::vector<ExprPtr> external_candidates(std::size_t n, const MemorySignal& signal,
                                                const ExternalGenerator& endpoint,
                                                const OperatorRegistry& reg,
                                                std::vector<std::string>* rejection_log = nullptr) {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0)
        throw GenerationError("external generator: pipe failed");
    pid_t pid = fork();
    if (pid < 0) throw GenerationError("external generator: fork failed");
    if (pid == 0) {
        setpgid(0, 0);  // own process group, so a timeout kill reaps grandchildren
        dup2(to_child[0], STDIN_FILENO);
        dup2(from_child[1], STDOUT_FILENO);
        close(to_child[0]);
        close(to_child[1]);
        close(from_child[0]);
        close(from_child[1]);
        execl("/bin/sh", "sh", "-c", endpoint.command.c_str(), (char*)nullptr);
        _exit(127);
    }
    setpgid(pid, pid);  // mirror the child's call to close the race
    close(to_child[0]);
    close(from_child[1]);

    nlohmann::json req;
    req["type"] = "generate";
    req["count"] = n;
    req["signal"] = signal_to_json(signal);
    std::string line = req.dump() + "\n";
    ssize_t written = write(to_child[1], line.data(), line.size());
    close(to_child[1]);
    if (written != static_cast<ssize_t>(line.size())) {
        close(from_child[0]);
        kill(-pid, SIGKILL);
        waitpid(pid, nullptr, 0);
        throw GenerationError("external generator: request write failed");
    }

    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::milliseconds(endpoint.timeout_ms);
    std::string buffer;
    bool done = false;
    std::vector<ExprPtr> out;
    auto handle_line = [&](const std::string& l) {
        if (l.empty()) return;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(l);
        } catch (const nlohmann::json::exception&) {
            if (rejection_log) rejection_log->push_back("unparsable line: " + l);
            return;
        }
        if (j.value("type", "") == "done") {
            done = true;
            return;
        }
        if (!j.contains("formula")) {
            if (rejection_log) rejection_log->push_back("missing formula key: " + l);
            return;
        }
        std::string formula = j["formula"].get<std::string>();
        try {
            ExprPtr e = parse(formula, reg);
            if (signal.is_forbidden(signature_key(*e))) {
                if (rejection_log)
                    rejection_log->push_back("forbidden signature: " + formula);
                return;
            }
            out.push_back(std::move(e));
        } catch (const std::exception& ex) {
            if (rejection_log)
                rejection_log->push_back("invalid formula '" + formula + "': " + ex.what());
        }
    };

    bool timed_out = false;
    char chunk[4096];
    while (!done) {
        auto now = std::chrono::steady_clock::now();
        if (now >= deadline) {
            timed_out = true;
            break;
        }
        int ms = static_cast<int>(
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count());
        pollfd pfd{from_child[0], POLLIN, 0};
        int pr = poll(&pfd, 1, std::max(ms, 1));
        if (pr <= 0) {
            timed_out = pr == 0;
            break;
        }
        ssize_t got = read(from_child[0], chunk, sizeof(chunk));
        if (got <= 0) break;  // EOF or error
        buffer.append(chunk, static_cast<std::size_t>(got));
        std::size_t pos;
        while (!done && (pos = buffer.find('\n')) != std::string::npos) {
            handle_line(buffer.substr(0, pos));
            buffer.erase(0, pos + 1);
        }
    }
    close(from_child[0]);
    if (timed_out) kill(-pid, SIGKILL);
    int status = 0;
    waitpid(pid, &status, 0);

    if (timed_out) throw GenerationError("external generator: timeout");
    if (out.empty()) throw GenerationError("external generator: zero valid formulas");
    return out;
}

}  // namespace fm
