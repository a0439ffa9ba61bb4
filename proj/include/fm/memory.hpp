#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fm/expr.hpp"
#include "fm/library.hpp"

namespace fm {

enum class Outcome { Admitted, ReplacedIn, RejectedIc, RejectedCorr, RejectedDup };

inline const char* outcome_name(Outcome o) {
    static const char* names[] = {"admitted", "replaced_in", "rejected_ic",
                                  "rejected_corr", "rejected_dup"};
    return names[static_cast<int>(o)];
}

struct TrajectoryRecord {
    std::string formula;
    PatternSignature sig;
    double fitness = 0;
    double icir = 0;
    double max_corr = 0;
    std::vector<int> blocking_ids;
    Outcome outcome = Outcome::RejectedIc;
    int batch_id = 0;
    int stage = 0;  // rejection stage (1..4); 4 for admissions
};

struct RecommendedEntry {
    std::string sig_key;
    std::string description;
    std::string exemplar;  // canonical formula example, used by guided sampling
    long successes = 0;
    long attempts = 0;
};

struct ForbiddenEntry {
    std::string sig_key;
    std::string description;
    std::vector<int> correlated_ids;
    double rho_level = 0;  // max |rho| observed
    long rejections = 0;
};

struct MiningState {
    long library_size = 0;
    long batches_run = 0;
    std::map<std::string, long> admissions_by_signature;
    std::map<std::string, long> attempts_by_signature;
    std::map<std::string, long> corr_rejections_by_signature;
};

struct ExperienceMemory {
    MiningState state;
    std::vector<RecommendedEntry> recommended;
    std::vector<ForbiddenEntry> forbidden;
    std::vector<std::string> insights;

    void check_invariants() const {
        std::set<std::string> rec;
        for (const auto& r : recommended) {
            rec.insert(r.sig_key);
            if (r.successes < 0 || r.attempts < 0 || r.successes > r.attempts)
                throw DataError("memory: bad counts for " + r.sig_key);
        }
        for (const auto& f : forbidden)
            if (rec.count(f.sig_key))
                throw DataError("memory: signature both recommended and forbidden: " +
                                f.sig_key);
    }
};

struct MemoryConfig {
    long forbid_min_rejections = 3;     // F_min
    double forbid_max_admit_rate = 0.10;
    long prune_min_attempts = 10;
    double prune_max_success_rate = 0.05;
};

// The deltas produced by memory formation; a value object, never a mutation.
struct MemoryDelta {
    struct PerSignature {
        long attempts = 0;
        long successes = 0;
        long corr_rejections = 0;
        std::set<int> blocking_ids;
        double max_rho = 0;
        std::string exemplar;  // last admitted formula
    };
    std::map<std::string, PerSignature> by_signature;
    long admitted = 0;
    bool empty() const { return by_signature.empty(); }
};

// Memory formation F: distill a batch trajectory into countable evidence.
inline MemoryDelta form(const std::vector<TrajectoryRecord>& trajectory) {
    MemoryDelta delta;
    for (const auto& rec : trajectory) {
        auto& s = delta.by_signature[rec.sig.key()];
        ++s.attempts;
        switch (rec.outcome) {
            case Outcome::Admitted:
            case Outcome::ReplacedIn:
                ++s.successes;
                ++delta.admitted;
                s.exemplar = rec.formula;
                break;
            case Outcome::RejectedCorr:
                ++s.corr_rejections;
                for (int id : rec.blocking_ids) s.blocking_ids.insert(id);
                s.max_rho = std::max(s.max_rho, rec.max_corr);
                break;
            case Outcome::RejectedIc:
            case Outcome::RejectedDup:
                break;  // attempt only
        }
    }
    return delta;
}

// Memory evolution E: merge counts, promote persistent correlation failures
// to forbidden, reclassify forbidden signatures that later admit, prune
// chronically unproductive recommended entries.
inline ExperienceMemory evolve(const ExperienceMemory& memory, const MemoryDelta& delta,
                               const MemoryConfig& cfg = {}) {
    ExperienceMemory out = memory;
    out.state.batches_run += 1;

    auto find_rec = [&](const std::string& key) -> RecommendedEntry* {
        for (auto& r : out.recommended)
            if (r.sig_key == key) return &r;
        return nullptr;
    };
    auto find_forb = [&](const std::string& key) -> ForbiddenEntry* {
        for (auto& f : out.forbidden)
            if (f.sig_key == key) return &f;
        return nullptr;
    };

    // merge cumulative per-signature evidence into the mining state
    for (const auto& [key, d] : delta.by_signature) {
        out.state.attempts_by_signature[key] += d.attempts;
        if (d.successes > 0) out.state.admissions_by_signature[key] += d.successes;
        if (d.corr_rejections > 0)
            out.state.corr_rejections_by_signature[key] += d.corr_rejections;
    }

    for (const auto& [key, d] : delta.by_signature) {
        if (d.successes > 0) {
            // an admission removes the signature from forbidden
            out.forbidden.erase(
                std::remove_if(out.forbidden.begin(), out.forbidden.end(),
                               [&](const ForbiddenEntry& e) { return e.sig_key == key; }),
                out.forbidden.end());
            RecommendedEntry* r = find_rec(key);
            if (!r) {
                out.recommended.push_back({key, "", "", 0, 0});
                r = &out.recommended.back();
            }
            r->successes += d.successes;
            r->attempts += d.attempts;
            if (!d.exemplar.empty()) r->exemplar = d.exemplar;
        } else if (RecommendedEntry* r = find_rec(key)) {
            r->attempts += d.attempts;
        }
    }

    // forbidden promotion on accumulated correlation-rejection evidence
    for (const auto& [key, d] : delta.by_signature) {
        if (d.corr_rejections == 0) continue;
        if (d.successes > 0) continue;  // fresh admission overrides this batch
        ForbiddenEntry* f = find_forb(key);
        long total_rejections = out.state.corr_rejections_by_signature[key];
        long admits = 0, attempts = 0;
        if (auto it = out.state.admissions_by_signature.find(key);
            it != out.state.admissions_by_signature.end())
            admits = it->second;
        if (auto it = out.state.attempts_by_signature.find(key);
            it != out.state.attempts_by_signature.end())
            attempts = it->second;
        double admit_rate =
            attempts > 0 ? static_cast<double>(admits) / attempts : 0.0;
        bool promote = total_rejections >= cfg.forbid_min_rejections &&
                       admit_rate < cfg.forbid_max_admit_rate;
        if (f) {
            f->rejections = total_rejections;
            f->rho_level = std::max(f->rho_level, d.max_rho);
            for (int id : d.blocking_ids)
                if (std::find(f->correlated_ids.begin(), f->correlated_ids.end(), id) ==
                    f->correlated_ids.end())
                    f->correlated_ids.push_back(id);
        } else if (promote) {
            RecommendedEntry* r = find_rec(key);
            ForbiddenEntry nf;
            nf.sig_key = key;
            nf.rejections = total_rejections;
            nf.rho_level = d.max_rho;
            nf.correlated_ids.assign(d.blocking_ids.begin(), d.blocking_ids.end());
            if (r) nf.description = r->description;
            out.forbidden.push_back(std::move(nf));
            out.recommended.erase(
                std::remove_if(out.recommended.begin(), out.recommended.end(),
                               [&](const RecommendedEntry& e) { return e.sig_key == key; }),
                out.recommended.end());
        }
    }

    // prune recommended entries that keep failing IC screening
    out.recommended.erase(
        std::remove_if(out.recommended.begin(), out.recommended.end(),
                       [&](const RecommendedEntry& r) {
                           return r.attempts >= cfg.prune_min_attempts &&
                                  static_cast<double>(r.successes) / r.attempts <
                                      cfg.prune_max_success_rate;
                       }),
        out.recommended.end());

    out.check_invariants();
    return out;
}

// The context-dependent signal handed to the generators.
struct MemorySignal {
    struct Rec {
        std::string sig_key;
        double weight = 0;
        std::string description;
        std::string exemplar;
    };
    struct Forb {
        std::string sig_key;
        std::string reason;
    };
    std::vector<Rec> recommended;
    std::vector<Forb> forbidden;
    long library_size = 0;
    std::map<std::string, long> saturation;  // library entries per signature
    std::vector<std::string> insights;

    bool empty() const { return recommended.empty() && forbidden.empty(); }
    bool is_forbidden(const std::string& sig_key) const {
        for (const auto& f : forbidden)
            if (f.sig_key == sig_key) return true;
        return false;
    }
};

// Memory retrieval R: weights by smoothed success rate, forbidden entries
// exported as hard filters, saturation from the current library.
inline MemorySignal retrieve(const ExperienceMemory& memory, const FactorLibrary& lib) {
    MemorySignal sig;
    sig.library_size = static_cast<long>(lib.size());
    for (const auto& r : memory.recommended) {
        double w = static_cast<double>(r.successes + 1) / (r.attempts + 2);
        sig.recommended.push_back({r.sig_key, w, r.description, r.exemplar});
    }
    for (const auto& f : memory.forbidden) {
        std::string reason = "rejected " + std::to_string(f.rejections) +
                             "x, |rho| up to " + std::to_string(f.rho_level);
        if (!f.description.empty()) reason = f.description + "; " + reason;
        sig.forbidden.push_back({f.sig_key, reason});
    }
    for (const auto& e : lib.entries()) ++sig.saturation[signature_key(*e.expr)];
    sig.insights = memory.insights;
    return sig;
}

// ---------------------------------------------------------------------------
// Persistence (human-readable JSON, lossless round trip)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ExperienceMemory& m) {
    nlohmann::json j;
    j["state"]["library_size"] = m.state.library_size;
    j["state"]["batches_run"] = m.state.batches_run;
    j["state"]["admissions_by_signature"] = m.state.admissions_by_signature;
    j["state"]["attempts_by_signature"] = m.state.attempts_by_signature;
    j["state"]["corr_rejections_by_signature"] = m.state.corr_rejections_by_signature;
    j["recommended"] = nlohmann::json::array();
    for (const auto& r : m.recommended)
        j["recommended"].push_back({{"signature", r.sig_key},
                                    {"description", r.description},
                                    {"exemplar", r.exemplar},
                                    {"successes", r.successes},
                                    {"attempts", r.attempts}});
    j["forbidden"] = nlohmann::json::array();
    for (const auto& f : m.forbidden)
        j["forbidden"].push_back({{"signature", f.sig_key},
                                  {"description", f.description},
                                  {"correlated_ids", f.correlated_ids},
                                  {"rho_level", f.rho_level},
                                  {"rejections", f.rejections}});
    j["insights"] = m.insights;
    return j;
}

inline ExperienceMemory memory_from_json(const nlohmann::json& j) {
    ExperienceMemory m;
    try {
        if (j.contains("state")) {
            const auto& s = j.at("state");
            m.state.library_size = s.value("library_size", 0L);
            m.state.batches_run = s.value("batches_run", 0L);
            if (s.contains("admissions_by_signature"))
                m.state.admissions_by_signature =
                    s.at("admissions_by_signature")
                        .get<std::map<std::string, long>>();
            if (s.contains("attempts_by_signature"))
                m.state.attempts_by_signature =
                    s.at("attempts_by_signature").get<std::map<std::string, long>>();
            if (s.contains("corr_rejections_by_signature"))
                m.state.corr_rejections_by_signature =
                    s.at("corr_rejections_by_signature")
                        .get<std::map<std::string, long>>();
        }
        for (const auto& r : j.value("recommended", nlohmann::json::array())) {
            RecommendedEntry e;
            e.sig_key = r.at("signature").get<std::string>();
            e.description = r.value("description", "");
            e.exemplar = r.value("exemplar", "");
            e.successes = r.value("successes", 0L);
            e.attempts = r.value("attempts", 0L);
            m.recommended.push_back(std::move(e));
        }
        for (const auto& f : j.value("forbidden", nlohmann::json::array())) {
            ForbiddenEntry e;
            e.sig_key = f.at("signature").get<std::string>();
            e.description = f.value("description", "");
            if (f.contains("correlated_ids"))
                e.correlated_ids = f.at("correlated_ids").get<std::vector<int>>();
            e.rho_level = f.value("rho_level", 0.0);
            e.rejections = f.value("rejections", 0L);
            m.forbidden.push_back(std::move(e));
        }
        // `insights` defaults to empty for forward compatibility
        m.insights = j.value("insights", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("memory schema violation: ") + e.what());
    }
    m.check_invariants();
    return m;
}

inline void save_memory(const ExperienceMemory& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << to_json(m).dump(2) << '\n';
}

inline ExperienceMemory load_memory(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("memory file parse failure: ") + e.what());
    }
    return memory_from_json(j);
}

}  // namespace fm
