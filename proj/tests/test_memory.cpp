#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "fm/memory.hpp"
#include "helpers.hpp"

#include <cstdio>
#include <fstream>

using fm::ExperienceMemory;
using fm::MemoryConfig;
using fm::MemoryDelta;
using fm::Outcome;
using fm::TrajectoryRecord;

namespace {

TrajectoryRecord rec(const std::string& formula, Outcome o, double max_corr = 0.0,
                     std::vector<int> blockers = {}) {
    TrajectoryRecord r;
    r.formula = formula;
    r.sig = fm::signature(*fm::parse(formula));
    r.outcome = o;
    r.max_corr = max_corr;
    r.blocking_ids = std::move(blockers);
    return r;
}

}  // namespace

TEST_CASE("formation counts attempts, successes, and correlation evidence") {
    // Same signature: Mean and Std differ at depth 1, so use one operator.
    std::vector<TrajectoryRecord> traj = {
        rec("Mean($close, 12)", Outcome::Admitted),
        rec("Mean($close, 24)", Outcome::RejectedIc),
        rec("Mean($volume, 6)", Outcome::RejectedCorr, 0.8, {3, 5}),
        rec("Mean($volume, 12)", Outcome::RejectedCorr, 0.6, {5}),
        rec("Std($returns, 6)", Outcome::RejectedDup),
    };
    MemoryDelta d = fm::form(traj);
    REQUIRE(d.by_signature.size() == 3);
    CHECK(d.admitted == 1);

    std::string k_close = fm::signature_key(*fm::parse("Mean($close, 12)"));
    std::string k_vol = fm::signature_key(*fm::parse("Mean($volume, 6)"));
    const auto& sc = d.by_signature.at(k_close);
    CHECK(sc.attempts == 2);
    CHECK(sc.successes == 1);
    CHECK(sc.exemplar == "Mean($close, 12)");
    const auto& sv = d.by_signature.at(k_vol);
    CHECK(sv.attempts == 2);
    CHECK(sv.corr_rejections == 2);
    CHECK(sv.max_rho == 0.8);
    CHECK(sv.blocking_ids == std::set<int>{3, 5});
}

TEST_CASE("evolution promotes to forbidden on cumulative evidence across batches") {
    MemoryConfig cfg;  // 3 rejections, <10% admit rate
    ExperienceMemory mem;
    auto batch = [&](int n_rejects) {
        std::vector<TrajectoryRecord> traj;
        for (int i = 0; i < n_rejects; ++i)
            traj.push_back(rec("Delta($close, " + std::to_string(i + 1) + ")",
                               Outcome::RejectedCorr, 0.7, {1}));
        return fm::form(traj);
    };
    std::string key = fm::signature_key(*fm::parse("Delta($close, 1)"));

    // one rejection per batch: no promotion until the third batch
    mem = fm::evolve(mem, batch(1), cfg);
    CHECK(mem.forbidden.empty());
    mem = fm::evolve(mem, batch(1), cfg);
    CHECK(mem.forbidden.empty());
    mem = fm::evolve(mem, batch(1), cfg);
    REQUIRE(mem.forbidden.size() == 1);
    CHECK(mem.forbidden[0].sig_key == key);
    CHECK(mem.forbidden[0].rejections == 3);
    CHECK(mem.forbidden[0].correlated_ids == std::vector<int>{1});
    CHECK(mem.state.batches_run == 3);
    CHECK(mem.state.corr_rejections_by_signature.at(key) == 3);

    SUBCASE("a later admission reclassifies the signature") {
        auto d = fm::form({rec("Delta($volume, 3)", Outcome::Admitted)});
        // same operator/field depth matters: build an actual matching formula
        d = fm::form({rec("Delta($close, 6)", Outcome::Admitted)});
        mem = fm::evolve(mem, d, cfg);
        CHECK(mem.forbidden.empty());
        REQUIRE(mem.recommended.size() == 1);
        CHECK(mem.recommended[0].sig_key == key);
        CHECK(mem.recommended[0].exemplar == "Delta($close, 6)");
    }
}

TEST_CASE("a healthy admit rate blocks promotion") {
    MemoryConfig cfg;
    ExperienceMemory mem;
    // 2 admissions + 8 attempts history => admit rate 0.2 >= 0.10
    std::vector<TrajectoryRecord> tr;
    tr.push_back(rec("TsMax($high, 12)", Outcome::Admitted));
    tr.push_back(rec("TsMax($high, 24)", Outcome::Admitted));
    for (int i = 0; i < 5; ++i)
        tr.push_back(rec("TsMax($high, 6)", Outcome::RejectedIc));
    mem = fm::evolve(mem, fm::form(tr), cfg);

    std::vector<TrajectoryRecord> tr2;
    for (int i = 0; i < 3; ++i)
        tr2.push_back(rec("TsMax($high, 48)", Outcome::RejectedCorr, 0.9, {2}));
    mem = fm::evolve(mem, fm::form(tr2), cfg);
    CHECK(mem.forbidden.empty());  // rate 2/10 = 0.2, above the 0.10 gate
    CHECK(mem.recommended.size() == 1);
}

TEST_CASE("chronically unproductive recommendations are pruned") {
    MemoryConfig cfg;  // prune at attempts >= 10 and success rate < 5%
    ExperienceMemory mem;
    mem = fm::evolve(mem, fm::form({rec("Skew($returns, 24)", Outcome::Admitted)}), cfg);
    REQUIRE(mem.recommended.size() == 1);

    // pile up failures; 1 success / 21 attempts < 0.05 triggers the prune
    std::vector<TrajectoryRecord> tr;
    for (int i = 0; i < 20; ++i)
        tr.push_back(rec("Skew($returns, 12)", Outcome::RejectedIc));
    mem = fm::evolve(mem, fm::form(tr), cfg);
    CHECK(mem.recommended.empty());
}

TEST_CASE("retrieval weights by smoothed success rate and exports hard filters") {
    ExperienceMemory mem;
    mem.recommended.push_back({"sigA", "descA", "Mean($close, 12)", 6, 10});
    mem.recommended.push_back({"sigB", "", "Sum($volume, 6)", 0, 0});
    mem.forbidden.push_back({"sigC", "too correlated", {1, 2}, 0.83, 5});
    mem.insights.push_back("note");

    fm::FactorLibrary lib;
    auto sig = fm::retrieve(mem, lib);
    REQUIRE(sig.recommended.size() == 2);
    CHECK(std::abs(sig.recommended[0].weight - 7.0 / 12) <= 1e-15);
    CHECK(std::abs(sig.recommended[1].weight - 0.5) <= 1e-15);  // (0+1)/(0+2)
    REQUIRE(sig.forbidden.size() == 1);
    CHECK(sig.is_forbidden("sigC"));
    CHECK(!sig.is_forbidden("sigA"));
    CHECK(sig.forbidden[0].reason.find("0.83") != std::string::npos);
    CHECK(sig.insights.size() == 1);

    SUBCASE("saturation counts library entries per signature") {
        fm::AdmissionThresholds th;
        fm::Candidate c;
        c.expr = fm::parse("Neg($close)");
        c.signal = testutil::random_signal(30, 8, 9, 0.0);
        c.stats.fitness = 0.2;
        auto d = lib.check_admission(c, th);
        fm::Candidate c2 = c;
        c2.expr = fm::parse("Neg($close)");
        lib.apply(d, std::move(c2));
        auto sig2 = fm::retrieve(mem, lib);
        CHECK(sig2.library_size == 1);
        CHECK(sig2.saturation.at(fm::signature_key(*fm::parse("Neg($close)"))) == 1);
    }
}

TEST_CASE("memory invariants reject inconsistent structures") {
    ExperienceMemory mem;
    mem.recommended.push_back({"sigX", "", "", 2, 5});
    mem.forbidden.push_back({"sigX", "", {}, 0.6, 3});
    CHECK_THROWS_AS(mem.check_invariants(), fm::DataError);

    ExperienceMemory bad;
    bad.recommended.push_back({"sigY", "", "", 6, 5});  // successes > attempts
    CHECK_THROWS_AS(bad.check_invariants(), fm::DataError);
}

TEST_CASE("JSON persistence round trips losslessly") {
    ExperienceMemory mem;
    mem.state.library_size = 4;
    mem.state.batches_run = 9;
    mem.state.attempts_by_signature["sigA"] = 12;
    mem.state.admissions_by_signature["sigA"] = 3;
    mem.state.corr_rejections_by_signature["sigB"] = 5;
    mem.recommended.push_back({"sigA", "desc", "Mean($close, 12)", 3, 12});
    mem.forbidden.push_back({"sigB", "why", {1, 7}, 0.77, 5});
    mem.insights = {"one", "two"};

    fm::save_memory(mem, "mem_rt.json");
    ExperienceMemory back = fm::load_memory("mem_rt.json");
    CHECK(fm::to_json(back) == fm::to_json(mem));
    std::remove("mem_rt.json");

    SUBCASE("schema violations are rejected") {
        std::ofstream out("mem_bad.json");
        out << R"({"recommended": [{"description": "missing signature"}]})";
        out.close();
        CHECK_THROWS_AS(fm::load_memory("mem_bad.json"), fm::DataError);
        std::remove("mem_bad.json");

        std::ofstream out2("mem_bad2.json");
        out2 << "not json at all";
        out2.close();
        CHECK_THROWS_AS(fm::load_memory("mem_bad2.json"), fm::DataError);
        std::remove("mem_bad2.json");
    }
}

TEST_CASE("the bundled seed memory loads and is internally consistent") {
    ExperienceMemory seed = fm::load_memory(std::string(FM_DATA_DIR) + "/memory_seed.json");
    CHECK(seed.recommended.size() == 8);
    CHECK(seed.forbidden.size() == 9);
    CHECK(seed.insights.size() == 3);
    CHECK_NOTHROW(seed.check_invariants());
    // every recommended exemplar must parse and match its own signature
    for (const auto& r : seed.recommended) {
        REQUIRE(!r.exemplar.empty());
        auto e = fm::parse(r.exemplar);
        CHECK(fm::signature_key(*e) == r.sig_key);
    }
}
