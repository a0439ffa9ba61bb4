#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fm/metrics.hpp"

namespace fm {

// ---------------------------------------------------------------------------
// Per-bar cross-sectional rank standardization: average ranks over present
// assets, demeaned, scaled to unit L2 norm. Invariant under strictly
// monotone transforms of the input, which matches the Spearman evaluation
// regime.
// ---------------------------------------------------------------------------

inline void rank_standardize_row(const double* in, double* out, std::size_t M) {
    std::vector<std::size_t> idx;
    for (std::size_t m = 0; m < M; ++m) {
        out[m] = kMissing;
        if (!is_missing(in[m])) idx.push_back(m);
    }
    std::size_t n = idx.size();
    if (n == 0) return;
    if (n == 1) {
        out[idx[0]] = 0.0;
        return;
    }
    std::vector<double> vals;
    vals.reserve(n);
    for (std::size_t m : idx) vals.push_back(in[m]);
    std::vector<double> ranks = detail::average_ranks(vals);
    double mean = 0;
    for (double r : ranks) mean += r;
    mean /= n;
    double norm = 0;
    for (double r : ranks) norm += (r - mean) * (r - mean);
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < n; ++k)
        out[idx[k]] = norm > 0 ? (ranks[k] - mean) / norm : 0.0;
}

inline Mat rank_standardize(const Mat& signal) {
    Mat out(signal.rows, signal.cols);
    for (std::size_t t = 0; t < signal.rows; ++t)
        rank_standardize_row(signal.row(t), out.row(t), signal.cols);
    return out;
}

struct CombinedSignal {
    Mat signal;
    std::string method;
    std::vector<double> weights;  // per input, in input order
    std::vector<int> signs;       // per input, in input order
};

namespace detail {

inline void check_combine_inputs(const std::vector<Mat>& signals,
                                 const std::vector<double>& train_ics) {
    if (signals.empty()) throw MetricError("combine: empty signal list");
    if (signals.size() != train_ics.size())
        throw MetricError("combine: signals/train_ics size mismatch");
    for (const auto& s : signals)
        if (!s.same_shape(signals[0])) throw MetricError("combine: shape mismatch");
    for (double ic : train_ics)
        if (!std::isfinite(ic)) throw MetricError("combine: non-finite train IC");
}

// weighted sum of sign-corrected rank-standardized inputs; a cell is
// missing when any input is missing there
inline CombinedSignal weighted_combine(const std::vector<Mat>& signals,
                                       const std::vector<double>& train_ics,
                                       std::vector<double> weights, std::string method) {
    CombinedSignal out;
    out.method = std::move(method);
    out.weights = std::move(weights);
    for (double ic : train_ics) out.signs.push_back(ic < 0 ? -1 : 1);

    std::vector<Mat> stdz;
    for (const auto& s : signals) stdz.push_back(rank_standardize(s));
    const Mat& first = signals[0];
    out.signal = Mat(first.rows, first.cols);
    for (std::size_t t = 0; t < first.rows; ++t) {
        for (std::size_t m = 0; m < first.cols; ++m) {
            double acc = 0;
            bool any_missing = false;
            for (std::size_t i = 0; i < stdz.size(); ++i) {
                double v = stdz[i].at(t, m);
                if (is_missing(v)) {
                    any_missing = true;
                    break;
                }
                acc += out.weights[i] * out.signs[i] * v;
            }
            out.signal.at(t, m) = any_missing ? kMissing : acc;
        }
    }
    return out;
}

}  // namespace detail

inline CombinedSignal combine_equal(const std::vector<Mat>& signals,
                                    const std::vector<double>& train_ics) {
    detail::check_combine_inputs(signals, train_ics);
    std::vector<double> w(signals.size(), 1.0 / signals.size());
    return detail::weighted_combine(signals, train_ics, std::move(w), "equal");
}

inline CombinedSignal combine_ic_weighted(const std::vector<Mat>& signals,
                                          const std::vector<double>& train_ics) {
    detail::check_combine_inputs(signals, train_ics);
    double total = 0;
    for (double ic : train_ics) total += std::abs(ic);
    if (total <= 0) throw MetricError("combine_ic_weighted: all train ICs zero");
    std::vector<double> w;
    for (double ic : train_ics) w.push_back(std::abs(ic) / total);
    return detail::weighted_combine(signals, train_ics, std::move(w), "ic_weighted");
}

// Sequential per-bar Gram-Schmidt over the asset dimension, components
// ordered by descending |train IC|; residuals with norm < 1e-10 dropped for
// that bar; survivors sign-corrected and equally averaged.
inline CombinedSignal combine_orthogonal(const std::vector<Mat>& signals,
                                         const std::vector<double>& train_ics,
                                         double drop_tol = 1e-10) {
    detail::check_combine_inputs(signals, train_ics);
    std::size_t n = signals.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(train_ics[a]) > std::abs(train_ics[b]);
    });

    CombinedSignal out;
    out.method = "orthogonal";
    out.weights.assign(n, 1.0 / n);
    for (double ic : train_ics) out.signs.push_back(ic < 0 ? -1 : 1);
    const Mat& first = signals[0];
    out.signal = Mat(first.rows, first.cols);
    std::size_t M = first.cols;

    for (std::size_t t = 0; t < first.rows; ++t) {
        // common support: assets where every input is present
        std::vector<std::size_t> present;
        for (std::size_t m = 0; m < M; ++m) {
            bool all = true;
            for (const auto& s : signals)
                if (is_missing(s.at(t, m))) {
                    all = false;
                    break;
                }
            if (all) present.push_back(m);
        }
        for (std::size_t m = 0; m < M; ++m) out.signal.at(t, m) = kMissing;
        if (present.size() < 2) continue;
        std::size_t p = present.size();

        std::vector<std::vector<double>> basis;  // unit-norm kept components
        std::vector<int> kept_signs;
        for (std::size_t oi : order) {
            // standardize the restricted row: ranks, demean, unit norm
            std::vector<double> raw(p), z(p);
            for (std::size_t k = 0; k < p; ++k) raw[k] = signals[oi].at(t, present[k]);
            std::vector<double> ranks = detail::average_ranks(raw);
            double mean = 0;
            for (double r : ranks) mean += r;
            mean /= p;
            double norm = 0;
            for (std::size_t k = 0; k < p; ++k) {
                z[k] = ranks[k] - mean;
                norm += z[k] * z[k];
            }
            norm = std::sqrt(norm);
            if (norm < drop_tol) continue;
            for (double& v : z) v /= norm;
            for (const auto& b : basis) {
                double dot = 0;
                for (std::size_t k = 0; k < p; ++k) dot += b[k] * z[k];
                for (std::size_t k = 0; k < p; ++k) z[k] -= dot * b[k];
            }
            double rnorm = 0;
            for (double v : z) rnorm += v * v;
            rnorm = std::sqrt(rnorm);
            if (rnorm < drop_tol) continue;
            for (double& v : z) v /= rnorm;
            basis.push_back(std::move(z));
            kept_signs.push_back(out.signs[oi]);
        }
        if (basis.empty()) continue;
        for (std::size_t k = 0; k < p; ++k) {
            double acc = 0;
            for (std::size_t c = 0; c < basis.size(); ++c)
                acc += kept_signs[c] * basis[c][k];
            out.signal.at(t, present[k]) = acc / basis.size();
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lasso selection: cyclic coordinate descent with soft thresholding on the
// stacked (time, asset) training cells; lambda picked by validation-period
// combined IC.
// ---------------------------------------------------------------------------

struct LassoReport {
    double lambda = 0;
    double validation_ic = 0;
    // (input index, coefficient), nonzero only, descending |coefficient|
    std::vector<std::pair<std::size_t, double>> coefficients;
    std::vector<std::string> notes;

    std::string to_csv(const std::vector<int>& ids) const {
        std::ostringstream os;
        os << "rank,factor_id,coefficient\n";
        for (std::size_t r = 0; r < coefficients.size(); ++r)
            os << (r + 1) << ',' << ids[coefficients[r].first] << ','
               << coefficients[r].second << "\n";
        return os.str();
    }
};

struct LassoResult {
    std::vector<double> weights;       // per input, zeros included
    std::vector<std::size_t> selected; // input indices with nonzero weight
    LassoReport report;
};

namespace detail {

inline double soft_threshold(double z, double lambda) {
    if (z > lambda) return z - lambda;
    if (z < -lambda) return z + lambda;
    return 0.0;
}

// one lasso fit on centered y / standardized columns:
// min (1/2N)||y - Xb||^2 + lambda*||b||_1
inline std::vector<double> lasso_fit(const std::vector<std::vector<double>>& cols,
                                     const std::vector<double>& y, double lambda,
                                     double tol = 1e-8, int max_iter = 100000) {
    std::size_t p = cols.size(), N = y.size();
    std::vector<double> beta(p, 0.0), resid = y;
    for (int it = 0; it < max_iter; ++it) {
        double max_change = 0;
        for (std::size_t j = 0; j < p; ++j) {
            double dot = 0;
            for (std::size_t i = 0; i < N; ++i) dot += cols[j][i] * resid[i];
            // columns have mean square 1, so the 1D problem is closed-form
            double z = dot / N + beta[j];
            double b_new = soft_threshold(z, lambda);
            double diff = b_new - beta[j];
            if (diff != 0) {
                for (std::size_t i = 0; i < N; ++i) resid[i] -= diff * cols[j][i];
                beta[j] = b_new;
                max_change = std::max(max_change, std::abs(diff));
            }
        }
        if (max_change < tol) break;
    }
    return beta;
}

}  // namespace detail

inline LassoResult select_lasso(const std::vector<Mat>& signals, const Mat& target,
                                const std::vector<std::int64_t>& timestamps,
                                const std::vector<double>& lambda_grid,
                                std::size_t train_bars) {
    if (signals.empty()) throw MetricError("select_lasso: empty signal list");
    if (lambda_grid.empty()) throw MetricError("select_lasso: empty lambda grid");
    const Mat& first = signals[0];
    for (const auto& s : signals)
        if (!s.same_shape(target) || !s.same_shape(first))
            throw MetricError("select_lasso: shape mismatch");
    if (train_bars < 1 || train_bars > first.rows)
        throw MetricError("select_lasso: train split out of range");

    std::size_t n = signals.size();
    std::vector<Mat> stdz;
    for (const auto& s : signals) stdz.push_back(rank_standardize(s));

    // stacked training cells where the target and every factor are present
    std::vector<std::vector<double>> cols(n);
    std::vector<double> y;
    for (std::size_t t = 0; t < train_bars; ++t) {
        for (std::size_t m = 0; m < first.cols; ++m) {
            if (is_missing(target.at(t, m))) continue;
            bool all = true;
            for (const auto& z : stdz)
                if (is_missing(z.at(t, m))) {
                    all = false;
                    break;
                }
            if (!all) continue;
            for (std::size_t j = 0; j < n; ++j) cols[j].push_back(stdz[j].at(t, m));
            y.push_back(target.at(t, m));
        }
    }
    std::size_t N = y.size();
    if (N < n + 2) throw MetricError("select_lasso: too few complete training cells");

    LassoResult res;
    res.weights.assign(n, 0.0);

    // center y, standardize columns to mean 0 / mean square 1; degenerate
    // columns are excluded from the fit
    double y_mean = 0;
    for (double v : y) y_mean += v;
    y_mean /= N;
    for (double& v : y) v -= y_mean;
    std::vector<std::size_t> active;
    std::vector<double> col_scale(n, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        double mean = 0;
        for (double v : cols[j]) mean += v;
        mean /= N;
        double ms = 0;
        for (double& v : cols[j]) {
            v -= mean;
            ms += v * v;
        }
        ms = std::sqrt(ms / N);
        if (ms < 1e-12) {
            res.report.notes.push_back("dropped zero-variance column " + std::to_string(j));
            continue;
        }
        for (double& v : cols[j]) v /= ms;
        col_scale[j] = ms;
        active.push_back(j);
    }
    if (active.empty()) throw MetricError("select_lasso: all columns degenerate");
    std::vector<std::vector<double>> acols;
    for (std::size_t j : active) acols.push_back(std::move(cols[j]));

    // fit the grid; score each fit by combined IC on the validation bars
    double best_score = -std::numeric_limits<double>::infinity();
    std::vector<double> best_beta;
    double best_lambda = lambda_grid[0];
    for (double lambda : lambda_grid) {
        if (lambda < 0) throw MetricError("select_lasso: negative lambda");
        std::vector<double> beta = detail::lasso_fit(acols, y, lambda);
        bool any = false;
        for (double b : beta)
            if (b != 0) any = true;

        double score = 0;
        if (any && train_bars < first.rows) {
            Mat combined(first.rows, first.cols);
            for (std::size_t t = train_bars; t < first.rows; ++t)
                for (std::size_t m = 0; m < first.cols; ++m) {
                    double acc = 0;
                    bool miss = false;
                    for (std::size_t k = 0; k < active.size(); ++k) {
                        double v = stdz[active[k]].at(t, m);
                        if (is_missing(v)) {
                            miss = true;
                            break;
                        }
                        acc += beta[k] / col_scale[active[k]] * v;
                    }
                    combined.at(t, m) = miss ? kMissing : acc;
                }
            for (std::size_t t = 0; t < train_bars; ++t)
                for (std::size_t m = 0; m < first.cols; ++m)
                    combined.at(t, m) = kMissing;
            try {
                ICSeries s = ic_series(combined, target, timestamps);
                score = ic_mean(s);
            } catch (const MetricError&) {
                score = 0;
            }
            if (is_missing(score)) score = 0;
        } else if (any) {
            score = 0;  // no validation period: in-grid order decides
        } else {
            score = -std::numeric_limits<double>::infinity();
        }
        if (score > best_score) {
            best_score = score;
            best_beta = beta;
            best_lambda = lambda;
        }
    }
    if (best_beta.empty()) {
        // every lambda shrank everything to zero: report the sparsest fit
        best_beta.assign(active.size(), 0.0);
        best_lambda = *std::max_element(lambda_grid.begin(), lambda_grid.end());
        best_score = 0;
    }

    res.report.lambda = best_lambda;
    res.report.validation_ic = std::isfinite(best_score) ? best_score : 0.0;
    for (std::size_t k = 0; k < active.size(); ++k) {
        double w = best_beta[k] / col_scale[active[k]];
        res.weights[active[k]] = w;
        if (w != 0) {
            res.selected.push_back(active[k]);
            res.report.coefficients.emplace_back(active[k], w);
        }
    }
    std::sort(res.report.coefficients.begin(), res.report.coefficients.end(),
              [](const auto& a, const auto& b) {
                  return std::abs(a.second) > std::abs(b.second);
              });
    return res;
}

// ---------------------------------------------------------------------------
// Stepwise selection: greedy on equal-weight-combined ICIR
// ---------------------------------------------------------------------------

struct StepwiseRow {
    int step = 0;
    std::size_t added = 0;  // input index
    double individual_ic = 0;
    double combined_ic = 0;
    double combined_icir = 0;
    double delta_icir = 0;
};

struct StepwiseResult {
    std::vector<std::size_t> selected;
    std::vector<StepwiseRow> trajectory;

    std::string to_csv(const std::vector<int>& ids) const {
        std::ostringstream os;
        os << "step,factor_id,individual_ic,combined_ic,combined_icir,delta_icir\n";
        for (const auto& r : trajectory)
            os << r.step << ',' << ids[r.added] << ',' << r.individual_ic << ','
               << r.combined_ic << ',' << r.combined_icir << ',' << r.delta_icir << "\n";
        return os.str();
    }
};

inline StepwiseResult select_stepwise(const std::vector<Mat>& signals, const Mat& target,
                                      const std::vector<std::int64_t>& timestamps,
                                      std::size_t max_steps) {
    if (signals.empty()) throw MetricError("select_stepwise: empty candidate list");
    if (max_steps < 1) throw MetricError("select_stepwise: max_steps >= 1");
    std::size_t n = signals.size();
    for (const auto& s : signals)
        if (!s.same_shape(target)) throw MetricError("select_stepwise: shape mismatch");

    std::vector<double> ind_ic(n, 0.0), ind_icir(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        try {
            ICSeries s = ic_series(signals[i], target, timestamps);
            ind_ic[i] = ic_mean(s);
            ind_icir[i] = icir(s);
        } catch (const MetricError&) {
            ind_ic[i] = 0;
            ind_icir[i] = 0;
        }
        if (is_missing(ind_ic[i])) ind_ic[i] = 0;
    }

    auto combined_stats = [&](const std::vector<std::size_t>& members, double& ic_out,
                              double& icir_out) {
        std::vector<Mat> sub;
        std::vector<double> ics;
        for (std::size_t i : members) {
            sub.push_back(signals[i]);
            ics.push_back(ind_ic[i]);  // signs from standalone train IC
        }
        CombinedSignal c = combine_equal(sub, ics);
        try {
            ICSeries s = ic_series(c.signal, target, timestamps);
            ic_out = ic_mean(s);
            icir_out = icir(s);
        } catch (const MetricError&) {
            ic_out = 0;
            icir_out = 0;
        }
        if (is_missing(ic_out)) ic_out = 0;
    };

    StepwiseResult res;
    std::vector<bool> used(n, false);
    double incumbent_icir = 0;
    for (std::size_t step = 1; step <= max_steps && res.selected.size() < n; ++step) {
        double best_icir = -std::numeric_limits<double>::infinity();
        double best_ic = 0;
        std::size_t best = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (used[i]) continue;
            double ic, ir;
            if (res.selected.empty()) {
                ic = ind_ic[i];
                ir = std::abs(ind_icir[i]);  // sign-corrected standalone ICIR
            } else {
                std::vector<std::size_t> trial = res.selected;
                trial.push_back(i);
                combined_stats(trial, ic, ir);
            }
            if (ir > best_icir) {
                best_icir = ir;
                best_ic = ic;
                best = i;
            }
        }
        if (best == n) break;
        if (!res.selected.empty() && best_icir <= incumbent_icir) break;  // no improvement
        used[best] = true;
        res.selected.push_back(best);
        StepwiseRow row;
        row.step = static_cast<int>(step);
        row.added = best;
        row.individual_ic = ind_ic[best];
        row.combined_ic = best_ic;
        row.combined_icir = best_icir;
        row.delta_icir = best_icir - incumbent_icir;
        if (res.selected.size() == 1) row.delta_icir = 0;  // baseline step
        res.trajectory.push_back(row);
        incumbent_icir = best_icir;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Design-matrix export for external learners: time,asset,f_<id>...,target
// ---------------------------------------------------------------------------

inline void export_design_matrix(const std::vector<Mat>& signals,
                                 const std::vector<int>& ids, const Mat& target,
                                 const std::vector<std::int64_t>& timestamps,
                                 const std::vector<std::string>& assets,
                                 std::ostream& out) {
    if (signals.size() != ids.size())
        throw MetricError("design matrix: ids/signals size mismatch");
    std::vector<Mat> stdz;
    for (const auto& s : signals) {
        if (!s.same_shape(target)) throw MetricError("design matrix: shape mismatch");
        stdz.push_back(rank_standardize(s));
    }
    out << "time,asset";
    for (int id : ids) out << ",f_" << id;
    out << ",target\n";
    char buf[64];
    auto fmt = [&](double v) {
        auto r = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, r.ptr);
    };
    for (std::size_t t = 0; t < target.rows; ++t) {
        for (std::size_t m = 0; m < target.cols; ++m) {
            if (is_missing(target.at(t, m))) continue;
            bool all = true;
            for (const auto& z : stdz)
                if (is_missing(z.at(t, m))) {
                    all = false;
                    break;
                }
            if (!all) continue;
            out << timestamps[t] << ',' << assets[m];
            for (const auto& z : stdz) out << ',' << fmt(z.at(t, m));
            out << ',' << fmt(target.at(t, m)) << "\n";
        }
    }
}

}  // namespace fm
