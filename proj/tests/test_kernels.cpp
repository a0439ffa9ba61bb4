#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
// Rolling, elementwise, and cross-sectional kernels checked against
// hand-computed windows and independent oracles, on both backends.

#include "doctest.h"
#include "fm/expr.hpp"
#include "fm/kernels.hpp"
#include "helpers.hpp"

#include <cmath>
#include <numeric>

using fm::Backend;
using fm::FieldId;
using fm::is_missing;
using fm::kMissing;
using fm::Mat;

namespace {

// One-asset panel with an arbitrary close (and returns) series.
fm::Panel series_panel(const std::vector<double>& close) {
    fm::Panel p;
    p.assets = {"A0"};
    p.timestamps.resize(close.size());
    for (std::size_t t = 0; t < close.size(); ++t)
        p.timestamps[t] = 1600000000 + 86400 * static_cast<std::int64_t>(t);
    p.values.assign(close.size() * fm::kNumFields, kMissing);
    for (std::size_t t = 0; t < close.size(); ++t) {
        double c = close[t];
        p.at(t, 0, FieldId::Close) = c;
        if (!is_missing(c)) {
            p.at(t, 0, FieldId::Open) = c;
            p.at(t, 0, FieldId::High) = c;
            p.at(t, 0, FieldId::Low) = c;
            p.at(t, 0, FieldId::Vwap) = c;
            p.at(t, 0, FieldId::Volume) = 1.0;
            p.at(t, 0, FieldId::Amount) = c;
        }
    }
    return p;
}

std::vector<double> eval_series(const std::string& text, const std::vector<double>& close,
                                Backend backend) {
    fm::Panel p = series_panel(close);
    Mat out = fm::evaluate(fm::parse(text), p, backend);
    std::vector<double> col(out.rows);
    for (std::size_t t = 0; t < out.rows; ++t) col[t] = out.at(t, 0);
    return col;
}

void check_both(const std::string& text, const std::vector<double>& close,
                const std::vector<double>& expected, double tol = 1e-12) {
    for (Backend b : {Backend::Naive, Backend::Optimized}) {
        CAPTURE(text);
        CAPTURE(b == Backend::Naive ? "naive" : "optimized");
        auto got = eval_series(text, close, b);
        REQUIRE(got.size() == expected.size());
        for (std::size_t t = 0; t < got.size(); ++t) {
            CAPTURE(t);
            if (is_missing(expected[t])) {
                CHECK(is_missing(got[t]));
            } else {
                REQUIRE(!is_missing(got[t]));
                CHECK(std::abs(got[t] - expected[t]) <= tol);
            }
        }
    }
}

}  // namespace

TEST_CASE("rolling means, sums, and products match hand windows") {
    std::vector<double> x = {1, 2, 4, 8, 3};
    check_both("Mean($close, 3)", x, {kMissing, kMissing, 7.0 / 3, 14.0 / 3, 5.0});
    check_both("Sum($close, 3)", x, {kMissing, kMissing, 7, 14, 15});
    check_both("SMA($close, 2)", x, {kMissing, 1.5, 3, 6, 5.5});
    check_both("Product($close, 3)", x, {kMissing, kMissing, 8, 64, 96});
    check_both("Mean($close, 1)", x, x);
}

TEST_CASE("rolling dispersion and higher moments match hand windows") {
    std::vector<double> x = {2, 4, 4, 4, 5, 5, 7, 9};
    // Window {2,4,4}: mean 10/3, sample var ((16+4+4)/9)/2 = 4/3.
    check_both("Var($close, 3)", x,
               {kMissing, kMissing, 4.0 / 3, 0.0, 1.0 / 3, 1.0 / 3, 4.0 / 3, 4.0});
    check_both("Std($close, 3)", x,
               {kMissing, kMissing, std::sqrt(4.0 / 3), 0.0, std::sqrt(1.0 / 3),
                std::sqrt(1.0 / 3), std::sqrt(4.0 / 3), 2.0});

    // Skew/Kurt vs scratch formulas on a fixed 5-window.
    std::vector<double> w = {1, 2, 3, 5, 13};
    double mean = std::accumulate(w.begin(), w.end(), 0.0) / 5;
    double m2 = 0, m3 = 0, m4 = 0;
    for (double v : w) {
        double d = v - mean;
        m2 += d * d / 5;
        m3 += d * d * d / 5;
        m4 += d * d * d * d / 5;
    }
    double n = 5;
    double g1 = m3 / std::pow(m2, 1.5);
    double skew = g1 * std::sqrt(n * (n - 1)) / (n - 2);
    double g2 = m4 / (m2 * m2) - 3;
    double kurt = ((n + 1) * g2 + 6) * (n - 1) / ((n - 2) * (n - 3));
    std::vector<double> pre = {kMissing, kMissing, kMissing, kMissing};
    auto sk = pre, ku = pre;
    sk.push_back(skew);
    ku.push_back(kurt);
    check_both("Skew($close, 5)", w, sk, 1e-10);
    check_both("Kurt($close, 5)", w, ku, 1e-10);
}

TEST_CASE("median handles odd, even, and repeated windows") {
    std::vector<double> x = {5, 1, 9, 9, 2};
    check_both("Med($close, 3)", x, {kMissing, kMissing, 5, 9, 9});
    check_both("Med($close, 4)", x, {kMissing, kMissing, kMissing, 7, 5.5});
}

TEST_CASE("time-series rank is the tie-averaged fractional rank of the current bar") {
    std::vector<double> x = {3, 1, 2, 2, 2, 5};
    // windows of 3 ending at t: {3,1,2}->2/3, {1,2,2}->tied top (2.5)/3,
    // {2,2,2}->all tied (2)/3, {2,2,5}->3/3
    check_both("TsRank($close, 3)", x,
               {kMissing, kMissing, 2.0 / 3, 2.5 / 3, 2.0 / 3, 1.0});
}

TEST_CASE("extrema and their offsets prefer the most recent tie") {
    std::vector<double> x = {4, 7, 7, 1, 1, 9};
    check_both("TsMax($close, 3)", x, {kMissing, kMissing, 7, 7, 7, 9});
    check_both("TsMin($close, 3)", x, {kMissing, kMissing, 4, 1, 1, 1});
    // TsArgMax offset: 0 = current bar. Tie at t=2 ({4,7,7}) -> 0.
    check_both("TsArgMax($close, 3)", x, {kMissing, kMissing, 0, 1, 2, 0});
    check_both("TsArgMin($close, 3)", x, {kMissing, kMissing, 2, 0, 0, 1});
}

TEST_CASE("linear-weighted smoothing weights newest bars heaviest") {
    std::vector<double> x = {1, 2, 3, 10};
    // WMA(3) at t=2: (1*1 + 2*2 + 3*3)/6 = 14/6
    std::vector<double> expect = {kMissing, kMissing, 14.0 / 6, (2 + 6 + 30) / 6.0};
    check_both("WMA($close, 3)", x, expect);
    check_both("TsDecay($close, 3)", x, expect);  // same kernel by design
}

TEST_CASE("recursive smoothing seeds at first present value and skips gaps") {
    std::vector<double> x = {kMissing, 10, kMissing, 4, 7};
    double a = 2.0 / 4.0;  // window 3 -> alpha = 2/(3+1)
    double s1 = 10, s2 = a * 4 + (1 - a) * s1, s3 = a * 7 + (1 - a) * s2;
    check_both("EMA($close, 3)", x, {kMissing, s1, kMissing, s2, s3});
}

TEST_CASE("regression family matches closed-form fits on a fixed window") {
    std::vector<double> x = {1, 3, 2, 8};
    // Window {3,2,8} against time 0,1,2: slope 2.5, intercept 11/6.
    double slope = 2.5, intercept = 11.0 / 6;
    double fit2 = intercept + 2 * slope;
    double sst = (3 - 13.0 / 3) * (3 - 13.0 / 3) + (2 - 13.0 / 3) * (2 - 13.0 / 3) +
                 (8 - 13.0 / 3) * (8 - 13.0 / 3);
    double sse = 0;
    for (int i = 0; i < 3; ++i) {
        double y = std::vector<double>{3, 2, 8}[i];
        double e = y - (intercept + i * slope);
        sse += e * e;
    }
    double r2 = 1 - sse / sst;
    check_both("Slope($close, 3)", x, {kMissing, kMissing, 0.5, slope}, 1e-10);
    check_both("Rsquare($close, 3)", x, {kMissing, kMissing, 0.25, r2}, 1e-10);
    check_both("Resi($close, 3)", x, {kMissing, kMissing, -0.5, 8 - fit2}, 1e-10);
}

TEST_CASE("a missing value anywhere in the window yields missing output") {
    std::vector<double> x = {1, 2, kMissing, 4, 5, 6};
    for (const char* op : {"Mean", "Sum", "Std", "Med", "TsRank", "TsMax", "TsArgMin",
                           "WMA", "Slope"}) {
        std::string text = std::string(op) + "($close, 3)";
        for (Backend b : {Backend::Naive, Backend::Optimized}) {
            auto got = eval_series(text, x, b);
            CAPTURE(text);
            CHECK(is_missing(got[0]));  // warm-up
            CHECK(is_missing(got[1]));
            CHECK(is_missing(got[2]));  // window contains the hole
            CHECK(is_missing(got[3]));
            CHECK(is_missing(got[4]));
            CHECK(!is_missing(got[5]));  // first clean window after the hole
        }
    }
}

TEST_CASE("delay and delta shift within each asset") {
    std::vector<double> x = {1, 4, 9, kMissing, 25};
    // A bar that is itself missing yields missing output even if the
    // delayed source is present: the asset is absent at that timestamp.
    check_both("Delay($close, 2)", x, {kMissing, kMissing, 1, kMissing, 9});
    check_both("Delta($close, 1)", x, {kMissing, 3, 5, kMissing, kMissing});
}

TEST_CASE("elementwise domain guards return missing, not garbage") {
    std::vector<double> x = {-4, 0, 9};
    check_both("Div($close, Sub($close, $close))", x, {kMissing, kMissing, kMissing});
    check_both("Log($close)", x, {kMissing, kMissing, std::log(9.0)});
    check_both("Sqrt($close)", x, {kMissing, 0, 3});
    check_both("Inv($close)", x, {-0.25, kMissing, 1.0 / 9});
    check_both("SignedPower($close, 0.5)", x, {-2, 0, 3});
    check_both("Abs($close)", x, {4, 0, 9});
    check_both("Neg($close)", x, {4, 0, -9});
    check_both("Tanh($close)", x, {std::tanh(-4.0), 0, std::tanh(9.0)});
    // Exp overflow collapses to missing rather than inf.
    check_both("Exp(Mul($close, $close))", std::vector<double>{1000.0}, {kMissing});
}

TEST_CASE("logical operators produce {0,1} and propagate missing") {
    std::vector<double> x = {1, 5, kMissing, 2};
    check_both("IfElse(Greater($close, 2), $close, Neg($close))", x,
               {-1, 5, kMissing, -2});
    check_both("IfElse(And(Greater($close, 0), Less($close, 3)), 1, 0)", x,
               {1, 0, kMissing, 1});
    check_both("IfElse(Or(Less($close, 2), Greater($close, 4)), 1, 0)", x,
               {1, 1, kMissing, 0});
    check_both("IfElse(Eq($close, 5), 7, 8)", x, {8, 7, kMissing, 8});
    check_both("IfElse(Ne($close, 5), 7, 8)", x, {7, 8, kMissing, 7});
    check_both("IfElse(GreaterEqual($close, 2), 1, 0)", x, {0, 1, kMissing, 1});
    check_both("IfElse(LessEqual($close, 2), 1, 0)", x, {1, 0, kMissing, 1});
}

TEST_CASE("cross-sectional rank averages ties over present assets") {
    Mat sig(1, 5);
    double row[5] = {3, 1, 3, kMissing, 7};
    for (int m = 0; m < 5; ++m) sig.at(0, m) = row[m];

    for (bool optimized : {false, true}) {
        Mat out(1, 5);
        std::vector<std::size_t> scratch;
        fm::kern::cs_rank_row(sig.row(0), 5, out.row(0), optimized, scratch);
        CHECK(out.at(0, 1) == doctest::Approx(1.0 / 4));
        CHECK(out.at(0, 0) == doctest::Approx(2.5 / 4));
        CHECK(out.at(0, 2) == doctest::Approx(2.5 / 4));
        CHECK(out.at(0, 4) == doctest::Approx(4.0 / 4));
        CHECK(is_missing(out.at(0, 3)));
    }
}

TEST_CASE("scale divides by the cross-sectional absolute sum") {
    double row[4] = {2, -6, kMissing, 0};
    double out[4];
    fm::kern::scale_row(row, 4, out);
    CHECK(out[0] == doctest::Approx(0.25));
    CHECK(out[1] == doctest::Approx(-0.75));
    CHECK(is_missing(out[2]));
    CHECK(out[3] == doctest::Approx(0.0));

    double zeros[2] = {0, 0};
    fm::kern::scale_row(zeros, 2, out);
    CHECK(is_missing(out[0]));
    CHECK(is_missing(out[1]));
}

TEST_CASE("pairwise rolling correlation matches the standalone oracle") {
    std::vector<double> a = {1, 2, 4, 3, 8, 5}, v = {2, 1, 7, 5, 6, 9};
    fm::Panel p = series_panel(a);
    for (std::size_t t = 0; t < a.size(); ++t) p.at(t, 0, FieldId::Volume) = v[t];

    fm::ExprPtr e = fm::parse("Corr($close, $volume, 4)");
    for (Backend b : {Backend::Naive, Backend::Optimized}) {
        Mat out = fm::evaluate(e, p, b);
        for (std::size_t t = 0; t < a.size(); ++t) {
            if (t < 3) {
                CHECK(is_missing(out.at(t, 0)));
                continue;
            }
            std::vector<double> wa(a.begin() + t - 3, a.begin() + t + 1);
            std::vector<double> wv(v.begin() + t - 3, v.begin() + t + 1);
            CHECK(out.at(t, 0) ==
                  doctest::Approx(testutil::oracle_pearson(wa, wv)).epsilon(1e-10));
        }
    }
}

TEST_CASE("backends agree on random deep expressions") {
    fm::Panel p = testutil::small_panel(12, 160, 99);
    const char* exprs[] = {
        "TsRank(Div($close, WMA($close, 12)), 24)",
        "Corr(CsRank(Delta($close, 3)), Std($volume, 6), 12)",
        "IfElse(Greater(Kurt($returns, 12), 1.0), Skew($returns, 12), Slope($vwap, 6))",
        "Resi(Log($amount), 24)",
        "Scale(Sub(EMA($close, 6), Med($close, 12)))",
    };
    for (const char* text : exprs) {
        CAPTURE(text);
        Mat a = fm::evaluate(fm::parse(text), p, Backend::Naive);
        Mat b = fm::evaluate(fm::parse(text), p, Backend::Optimized);
        REQUIRE(a.same_shape(b));
        for (std::size_t i = 0; i < a.v.size(); ++i) {
            CHECK(is_missing(a.v[i]) == is_missing(b.v[i]));
            if (!is_missing(a.v[i])) CHECK(std::abs(a.v[i] - b.v[i]) <= 1e-7);
        }
    }
}

TEST_CASE("evaluation is causal: future edits never change the past") {
    fm::Panel p = testutil::small_panel(8, 120, 5);
    const std::size_t t0 = 60;
    fm::Panel q = p;
    for (std::size_t t = t0 + 1; t < q.n_bars(); ++t)
        for (std::size_t m = 0; m < q.n_assets(); ++m)
            for (int f = 0; f < fm::kNumFields; ++f)
                q.at(t, m, static_cast<FieldId>(f)) *= 1.7;

    const char* exprs[] = {
        "EMA($close, 12)",
        "TsRank(CsRank($returns), 24)",
        "Corr($close, $volume, 12)",
        "IfElse(Greater($close, Delay($close, 3)), Std($returns, 6), Mean($volume, 6))",
    };
    for (const char* text : exprs) {
        for (Backend b : {Backend::Naive, Backend::Optimized}) {
            Mat a = fm::evaluate(fm::parse(text), p, b);
            Mat c = fm::evaluate(fm::parse(text), q, b);
            for (std::size_t t = 0; t <= t0; ++t)
                for (std::size_t m = 0; m < p.n_assets(); ++m) {
                    double x = a.at(t, m), y = c.at(t, m);
                    CHECK((is_missing(x) ? is_missing(y) : x == y));
                }
        }
    }
}
