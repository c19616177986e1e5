#pragma once

// Sparse aggregation of per-neuron features into a correctness probability:
// elastic-net logistic regression, nested cross-validation, the MSP
// combiner and isotonic calibration.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bll/error.hpp"
#include "bll/features.hpp"
#include "bll/metrics.hpp"
#include "bll/parallel.hpp"

namespace bll {

// z-score per column; zero-variance columns keep scale 1.
struct Standardizer {
    Eigen::VectorXd mean;
    Eigen::VectorXd scale;

    static Standardizer fit(const Eigen::Ref<const Eigen::MatrixXd>& x) {
        Standardizer s;
        const double n = static_cast<double>(x.rows());
        s.mean = x.colwise().sum().transpose() / n;
        s.scale.resize(x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double var = (x.col(j).array() - s.mean[j]).square().sum() / n;
            const double sd = std::sqrt(var);
            s.scale[j] = sd > 0.0 && std::isfinite(sd) ? sd : 1.0;
        }
        return s;
    }

    Eigen::MatrixXd apply(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
        if (x.cols() != mean.size()) throw ValidationError("standardizer: column count mismatch");
        return ((x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
    }
};

namespace detail {

inline double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }

inline double soft_threshold(double v, double t) {
    if (v > t) return v - t;
    if (v < -t) return v + t;
    return 0.0;
}

inline std::vector<double> signed_labels(std::span<const std::uint8_t> y) {
    std::vector<double> s(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) s[i] = y[i] ? 1.0 : -1.0;
    return s;
}

inline std::array<std::size_t, 2> class_counts(std::span<const std::uint8_t> y) {
    std::array<std::size_t, 2> c{0, 0};
    for (auto u : y) ++c[u ? 1 : 0];
    return c;
}

} // namespace detail

struct EnetConfig {
    double tol = 1e-6;          // max coordinate update
    std::uint32_t max_sweeps = 1000;
};

struct ElasticNetLogReg {
    Eigen::VectorXd w;  // weights on standardized features
    double b = 0.0;
    double l1_ratio = 0.5;
    double C = 1.0;
    Standardizer standardizer;
    std::uint32_t sweeps = 0;
    bool converged = false;

    Eigen::VectorXd decision_function(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
        return (standardizer.apply(x) * w).array() + b;
    }

    Eigen::VectorXd predict_proba(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
        Eigen::VectorXd m = decision_function(x);
        for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = 1.0 / (1.0 + std::exp(-m[i]));
        return m;
    }
};

// rho ||w||_1 + (1-rho)/2 ||w||^2 + C sum_i log(1 + exp(-y_i (x_i.w + b))), on
// already standardized rows.
inline double enet_objective(const Eigen::Ref<const Eigen::MatrixXd>& xs, std::span<const std::uint8_t> y,
                             const Eigen::VectorXd& w, double b, double l1_ratio, double C) {
    const Eigen::VectorXd m = (xs * w).array() + b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) loss += detail::softplus(-(y[static_cast<std::size_t>(i)] ? 1.0 : -1.0) * m[i]);
    return l1_ratio * w.lpNorm<1>() + 0.5 * (1.0 - l1_ratio) * w.squaredNorm() + C * loss;
}

struct KktResidual {
    double weights = 0.0;    // worst coordinate violation
    double intercept = 0.0;  // |d objective / d b|
};

// Optimality certificate evaluated in the standardized coordinates the
// solver works in.
inline KktResidual kkt_residual(const ElasticNetLogReg& m, const Eigen::Ref<const Eigen::MatrixXd>& x,
                                std::span<const std::uint8_t> y) {
    const Eigen::MatrixXd xs = m.standardizer.apply(x);
    const Eigen::VectorXd margin = (xs * m.w).array() + m.b;
    Eigen::VectorXd dloss(margin.size());  // d loss_i / d margin_i
    for (Eigen::Index i = 0; i < margin.size(); ++i) {
        const double ys = y[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
        dloss[i] = -ys / (1.0 + std::exp(ys * margin[i]));
    }
    KktResidual r;
    r.intercept = std::abs(m.C * dloss.sum());
    const Eigen::VectorXd grad = m.C * (xs.transpose() * dloss);
    for (Eigen::Index j = 0; j < m.w.size(); ++j) {
        const double smooth = grad[j] + (1.0 - m.l1_ratio) * m.w[j];
        const double v = m.w[j] == 0.0 ? std::max(0.0, std::abs(smooth) - m.l1_ratio)
                                       : std::abs(smooth + m.l1_ratio * (m.w[j] > 0.0 ? 1.0 : -1.0));
        r.weights = std::max(r.weights, v);
    }
    return r;
}

// Proximal Newton. Each outer iteration forms the quadratic model of the
// loss around the current point, minimizes it plus the penalty by cyclic
// coordinate descent with soft-thresholding (coordinates 0..F-1, then the
// intercept), and backtracks along the resulting direction until the
// objective does not increase. `sweeps` counts outer iterations.
inline ElasticNetLogReg fit_enet_logreg(const Eigen::Ref<const Eigen::MatrixXd>& x, std::span<const std::uint8_t> y,
                                        double l1_ratio, double C, const EnetConfig& cfg = {},
                                        const ElasticNetLogReg* warm_start = nullptr,
                                        std::vector<double>* objective_trace = nullptr) {
    const Eigen::Index n = x.rows();
    const Eigen::Index f = x.cols();
    if (static_cast<std::size_t>(n) != y.size()) throw ValidationError("fit_enet_logreg: label count mismatch");
    if (!(l1_ratio >= 0.0 && l1_ratio <= 1.0)) throw ValidationError("fit_enet_logreg: l1_ratio outside [0, 1]");
    if (!(C > 0.0)) throw ValidationError("fit_enet_logreg: C must be positive");
    if (!x.allFinite()) throw ValidationError("fit_enet_logreg: non-finite feature");
    const auto counts = detail::class_counts(y);
    if (counts[0] == 0 || counts[1] == 0) throw ValidationError("fit_enet_logreg: both classes must be present");

    ElasticNetLogReg model;
    model.l1_ratio = l1_ratio;
    model.C = C;
    model.standardizer = Standardizer::fit(x);
    // augmented design [Xs, 1]; the last coordinate is the intercept
    Eigen::MatrixXd a(n, f + 1);
    a.leftCols(f) = model.standardizer.apply(x);
    a.col(f).setOnes();
    const std::vector<double> ys = detail::signed_labels(y);

    Eigen::VectorXd theta(f + 1);
    if (warm_start && warm_start->w.size() == f) {
        theta.head(f) = warm_start->w;
        theta[f] = warm_start->b;
    } else {
        theta.setZero();
        theta[f] = std::log(static_cast<double>(counts[1]) / static_cast<double>(counts[0]));
    }

    auto penalty = [&](const Eigen::VectorXd& t) {
        return l1_ratio * t.head(f).lpNorm<1>() + 0.5 * (1.0 - l1_ratio) * t.head(f).squaredNorm();
    };
    auto loss_at = [&](const Eigen::VectorXd& margin) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) s += detail::softplus(-ys[static_cast<std::size_t>(i)] * margin[i]);
        return s;
    };

    Eigen::VectorXd margin = a * theta;
    double fval = C * loss_at(margin) + penalty(theta);
    if (objective_trace) objective_trace->push_back(fval);

    Eigen::VectorXd g(n), h(n), delta(f + 1), grad(f + 1), dmargin(n), cand_margin(n);
    Eigen::MatrixXd aw(n, f + 1), hess(f + 1, f + 1);
    for (std::uint32_t outer = 0; outer < cfg.max_sweeps; ++outer) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const double yi = ys[static_cast<std::size_t>(i)];
            const double q = 1.0 / (1.0 + std::exp(yi * margin[i]));  // P(wrong side)
            g[i] = -yi * q;
            h[i] = q * (1.0 - q);
        }
        aw = a.array().colwise() * h.array().sqrt();
        hess.setZero();
        hess.selfadjointView<Eigen::Lower>().rankUpdate(aw.transpose(), C);
        hess.triangularView<Eigen::StrictlyUpper>() = hess.transpose();
        grad.noalias() = C * (a.transpose() * g);  // gradient of the quadratic model at delta = 0

        delta.setZero();
        const double inner_tol = 0.1 * cfg.tol;
        for (std::uint32_t sweep = 0; sweep < 1000; ++sweep) {
            double max_change = 0.0;
            for (Eigen::Index j = 0; j <= f; ++j) {
                const double hjj = hess(j, j);
                const double v = theta[j] + delta[j];
                double t;
                if (j < f) {
                    const double denom = std::max(hjj + (1.0 - l1_ratio), 1e-12);
                    t = detail::soft_threshold(hjj * v - grad[j], l1_ratio) / denom;
                } else {
                    if (!(hjj > 0.0)) continue;
                    t = v - grad[j] / hjj;
                }
                const double step = t - v;
                if (step == 0.0) continue;
                delta[j] += step;
                grad.noalias() += step * hess.col(j);
                max_change = std::max(max_change, std::abs(step));
            }
            if (max_change < inner_tol) break;
        }
        model.sweeps = outer + 1;
        if (delta.cwiseAbs().maxCoeff() == 0.0) {
            model.converged = true;
            break;
        }

        dmargin.noalias() = a * delta;
        double t = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
            cand_margin = margin + t * dmargin;
            const Eigen::VectorXd cand = theta + t * delta;
            const double fc = C * loss_at(cand_margin) + penalty(cand);
            if (fc <= fval) {
                theta = cand;
                margin = cand_margin;
                fval = fc;
                accepted = true;
                break;
            }
        }
        if (objective_trace) objective_trace->push_back(fval);
        if (!accepted || t * delta.cwiseAbs().maxCoeff() < cfg.tol) {
            model.converged = true;
            break;
        }
    }
    model.w = theta.head(f);
    model.b = theta[f];
    if (!model.w.allFinite() || !std::isfinite(model.b)) throw NumericalError("fit_enet_logreg: diverged");
    return model;
}

// Small-dimensional logistic regression by damped Newton with a tiny ridge on
// the weights (intercept unpenalized). Inputs are standardized internally.
struct PlainLogReg {
    Eigen::VectorXd w;
    double b = 0.0;
    Standardizer standardizer;

    Eigen::VectorXd predict_proba(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
        Eigen::VectorXd m = (standardizer.apply(x) * w).array() + b;
        for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = 1.0 / (1.0 + std::exp(-m[i]));
        return m;
    }
};

inline PlainLogReg fit_plain_logreg(const Eigen::Ref<const Eigen::MatrixXd>& x, std::span<const std::uint8_t> y,
                                    double l2 = 1e-8, std::uint32_t max_iter = 100) {
    const auto counts = detail::class_counts(y);
    if (counts[0] == 0 || counts[1] == 0) throw ValidationError("logistic combiner: training split has a single class");
    PlainLogReg m;
    m.standardizer = Standardizer::fit(x);
    const Eigen::Index n = x.rows(), p = x.cols();
    Eigen::MatrixXd a(n, p + 1);
    a.leftCols(p) = m.standardizer.apply(x);
    a.col(p).setOnes();
    const std::vector<double> ys = detail::signed_labels(y);

    auto objective = [&](const Eigen::VectorXd& theta) {
        const Eigen::VectorXd mm = a * theta;
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) s += detail::softplus(-ys[static_cast<std::size_t>(i)] * mm[i]);
        return s + 0.5 * l2 * theta.head(p).squaredNorm();
    };

    Eigen::VectorXd theta = Eigen::VectorXd::Zero(p + 1);
    theta[p] = std::log(static_cast<double>(counts[1]) / static_cast<double>(counts[0]));
    double fval = objective(theta);
    for (std::uint32_t it = 0; it < max_iter; ++it) {
        const Eigen::VectorXd mm = a * theta;
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(p + 1);
        Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(p + 1, p + 1);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double yi = ys[static_cast<std::size_t>(i)];
            const double qi = 1.0 / (1.0 + std::exp(yi * mm[i]));
            grad -= yi * qi * a.row(i).transpose();
            hess.noalias() += qi * (1.0 - qi) * a.row(i).transpose() * a.row(i);
        }
        grad.head(p) += l2 * theta.head(p);
        hess.diagonal().head(p).array() += l2;
        hess.diagonal().array() += 1e-12;
        const Eigen::VectorXd dir = -hess.ldlt().solve(grad);
        double t = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 50; ++ls, t *= 0.5) {
            const Eigen::VectorXd cand = theta + t * dir;
            const double fc = objective(cand);
            if (fc <= fval) {
                moved = fc < fval;
                theta = cand;
                fval = fc;
                break;
            }
        }
        if (!moved || t * dir.cwiseAbs().maxCoeff() < 1e-10) break;
    }
    m.w = theta.head(p);
    m.b = theta[p];
    return m;
}

// Monotone step function through (score, value) knots, interpolated linearly
// between knots and clamped outside.
struct IsotonicCalibrator {
    std::vector<double> knots;   // strictly increasing
    std::vector<double> values;  // non-decreasing

    double operator()(double s) const {
        if (knots.empty()) throw ValidationError("isotonic calibrator is not fitted");
        if (s <= knots.front()) return values.front();
        if (s >= knots.back()) return values.back();
        const auto hi = static_cast<std::size_t>(std::upper_bound(knots.begin(), knots.end(), s) - knots.begin());
        const std::size_t lo = hi - 1;
        const double t = (s - knots[lo]) / (knots[hi] - knots[lo]);
        return values[lo] + t * (values[hi] - values[lo]);
    }

    std::vector<double> apply(std::span<const double> scores) const {
        std::vector<double> out(scores.size());
        for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (*this)(scores[i]);
        return out;
    }
};

// Pool-adjacent-violators on targets sorted by score; equal scores are pooled
// into one weighted knot first.
inline IsotonicCalibrator fit_isotonic(std::span<const double> scores, std::span<const double> targets) {
    if (scores.size() != targets.size()) throw ValidationError("fit_isotonic: size mismatch");
    if (scores.size() < 2) throw ValidationError("fit_isotonic: need n >= 2");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    struct Block {
        double sum = 0.0;
        double weight = 0.0;
        std::size_t knots = 0;
    };
    IsotonicCalibrator cal;
    std::vector<Block> stack;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        Block blk{0.0, 0.0, 1};
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            blk.sum += targets[order[j]];
            blk.weight += 1.0;
            ++j;
        }
        cal.knots.push_back(scores[order[i]]);
        stack.push_back(blk);
        while (stack.size() > 1 &&
               stack[stack.size() - 2].sum / stack[stack.size() - 2].weight >= stack.back().sum / stack.back().weight) {
            Block top = stack.back();
            stack.pop_back();
            stack.back().sum += top.sum;
            stack.back().weight += top.weight;
            stack.back().knots += top.knots;
        }
        i = j;
    }
    for (const auto& blk : stack) cal.values.insert(cal.values.end(), blk.knots, blk.sum / blk.weight);
    return cal;
}

inline IsotonicCalibrator fit_isotonic(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    std::vector<double> t(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i] ? 1.0 : 0.0;
    return fit_isotonic(scores, std::span<const double>(t));
}

// Two-feature logistic fit of [method score, msp] on the training split,
// applied to the test split.
inline std::vector<double> combine_with_msp(std::span<const double> method_train, std::span<const double> msp_train,
                                            std::span<const std::uint8_t> labels_train,
                                            std::span<const double> method_test, std::span<const double> msp_test) {
    if (method_train.size() != msp_train.size() || method_train.size() != labels_train.size() ||
        method_test.size() != msp_test.size())
        throw ValidationError("combine_with_msp: size mismatch");
    auto stack2 = [](std::span<const double> a, std::span<const double> b) {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(a.size()), 2);
        for (std::size_t i = 0; i < a.size(); ++i) {
            m(static_cast<Eigen::Index>(i), 0) = a[i];
            m(static_cast<Eigen::Index>(i), 1) = b[i];
        }
        return m;
    };
    const PlainLogReg lr = fit_plain_logreg(stack2(method_train, msp_train), labels_train);
    const Eigen::VectorXd p = lr.predict_proba(stack2(method_test, msp_test));
    return {p.data(), p.data() + p.size()};
}

inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
    // rejection sampling keeps this identical across standard libraries
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do v = rng(); while (v >= limit);
    return v % n;
}

// Stratified k-fold assignment from a seeded shuffle: returns the fold id of
// every example.
inline std::vector<std::uint32_t> stratified_folds(std::span<const std::uint8_t> labels, std::uint32_t k,
                                                   std::uint64_t seed) {
    if (k < 2) throw ValidationError("stratified_folds: need k >= 2");
    std::mt19937_64 rng(seed);
    std::vector<std::uint32_t> fold(labels.size(), 0);
    std::size_t counter = 0;
    for (int u = 0; u < 2; ++u) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if ((labels[i] ? 1 : 0) == u) idx.push_back(i);
        if (idx.size() < k)
            throw ValidationError("degenerate folds: class " + std::to_string(u) + " has " + std::to_string(idx.size()) +
                                  " examples for " + std::to_string(k) + " folds");
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
        for (auto i : idx) fold[i] = static_cast<std::uint32_t>(counter++ % k);
    }
    return fold;
}

enum class SelectionScope : std::uint8_t { Outer = 0, Inner = 1 };

struct NestedCvConfig {
    std::uint32_t outer = 5;
    std::uint32_t inner = 4;
    std::vector<double> l1_ratios{0.9, 0.7, 0.5};
    std::vector<double> Cs{0.01, 0.05, 0.1};
    std::uint64_t seed = 0;
    std::size_t select_k = 100;
    SelectionScope selection_scope = SelectionScope::Outer;
    EnetConfig solver;
    std::size_t workers = 1;
    std::size_t ece_bins = 10;

    void validate() const {
        if (outer < 2 || inner < 2) throw ValidationError("nested_cv: need at least 2 outer and 2 inner folds");
        if (l1_ratios.empty() || Cs.empty()) throw ValidationError("nested_cv: hyperparameter grids must be non-empty");
        for (double r : l1_ratios)
            if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("nested_cv: l1_ratio outside [0, 1]");
        for (double c : Cs)
            if (!(c > 0.0)) throw ValidationError("nested_cv: C must be positive");
        if (select_k == 0) throw ValidationError("nested_cv: select_k must be >= 1");
    }
};

struct CvReport {
    std::string label;
    std::vector<double> fold_auc;
    std::vector<double> fold_auc_combined;
    std::vector<std::pair<double, double>> chosen_params;  // (l1_ratio, C)
    std::vector<double> ece_raw;
    std::vector<double> ece_calibrated;
    std::vector<std::vector<std::size_t>> selected_features;  // column ids per fold
    std::vector<double> oof_scores;           // out-of-fold probabilities
    std::vector<double> oof_scores_combined;  // out-of-fold combined probabilities
    double msp_auc = 0.0;
    bool significant = false;           // fold AUCs vs MSP
    bool significant_combined = false;  // combined fold AUCs vs MSP

    FoldSummary auc() const { return fold_summary(fold_auc); }
    FoldSummary auc_combined() const { return fold_summary(fold_auc_combined); }
    FoldSummary ece() const { return fold_summary(ece_raw); }
    FoldSummary ece_cal() const { return fold_summary(ece_calibrated); }
};

// The MSP baseline row: AUROC and raw ECE on the whole set; the calibrated
// ECE uses the same outer folds as the methods.
struct BaselineReport {
    double auc = 0.0;
    double ece = 0.0;
    std::vector<double> ece_calibrated;
};

namespace detail {

inline std::vector<std::size_t> indices_where(std::span<const std::uint32_t> fold, std::uint32_t f, bool equal) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold.size(); ++i)
        if ((fold[i] == f) == equal) out.push_back(i);
    return out;
}

template <typename T>
std::vector<T> gather(std::span<const T> v, std::span<const std::size_t> idx) {
    std::vector<T> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
    return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::vector<std::size_t> anova_select(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                             std::span<const std::uint8_t> y, std::size_t k) {
    return select_top_k(anova_f(x, y), k);
}

inline std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

} // namespace detail

// Grid search over (l1_ratio, C) by mean inner-fold AUROC. Ties go to the
// larger l1_ratio, then the smaller C.
inline std::pair<double, double> inner_grid_search(const Eigen::Ref<const Eigen::MatrixXd>& x,
                                                   std::span<const std::uint8_t> y, const NestedCvConfig& cfg,
                                                   std::uint64_t seed) {
    const auto fold = stratified_folds(y, cfg.inner, seed);
    std::vector<double> cs = cfg.Cs;
    std::sort(cs.begin(), cs.end());
    std::vector<double> rhos = cfg.l1_ratios;
    std::sort(rhos.begin(), rhos.end(), std::greater<>());
    std::vector<std::vector<double>> score(rhos.size(), std::vector<double>(cs.size(), 0.0));

    for (std::uint32_t g = 0; g < cfg.inner; ++g) {
        const auto tr = detail::indices_where(fold, g, false);
        const auto va = detail::indices_where(fold, g, true);
        Eigen::MatrixXd xtr = take_rows(x, tr);
        Eigen::MatrixXd xva = take_rows(x, va);
        const auto ytr = detail::gather<std::uint8_t>(y, tr);
        const auto yva = detail::gather<std::uint8_t>(y, va);
        if (cfg.selection_scope == SelectionScope::Inner) {
            const auto sel = detail::anova_select(xtr, ytr, cfg.select_k);
            xtr = take_columns(xtr, sel);
            xva = take_columns(xva, sel);
        }
        for (std::size_t r = 0; r < rhos.size(); ++r) {
            std::optional<ElasticNetLogReg> prev;
            for (std::size_t c = 0; c < cs.size(); ++c) {
                // warm start along increasing C
                auto m = fit_enet_logreg(xtr, ytr, rhos[r], cs[c], cfg.solver, prev ? &*prev : nullptr);
                const Eigen::VectorXd s = m.decision_function(xva);
                score[r][c] += auroc(detail::to_vector(s), yva);
                prev = std::move(m);
            }
        }
    }
    // rhos descending, cs ascending: the first strict maximum wins ties
    std::pair<double, double> best{rhos[0], cs[0]};
    double best_score = -1.0;
    for (std::size_t r = 0; r < rhos.size(); ++r)
        for (std::size_t c = 0; c < cs.size(); ++c)
            if (score[r][c] > best_score) {
                best_score = score[r][c];
                best = {rhos[r], cs[c]};
            }
    return best;
}

// 5x4 nested cross-validation of the sparse aggregator. Test-fold labels are
// only touched after the fold's model produced its scores.
inline CvReport nested_cv(const FeatureMatrix& features, std::span<const std::uint8_t> labels,
                          std::span<const double> msp, const NestedCvConfig& cfg) {
    cfg.validate();
    const auto n = static_cast<std::size_t>(features.rows());
    if (labels.size() != n || msp.size() != n) throw ValidationError("nested_cv: row count mismatch");
    if (n < 50) throw ValidationError("nested_cv: need at least 50 examples, have " + std::to_string(n));

    const auto fold = stratified_folds(labels, cfg.outer, cfg.seed);
    CvReport rep;
    rep.label = features.spec.label();
    rep.fold_auc.assign(cfg.outer, 0.0);
    rep.fold_auc_combined.assign(cfg.outer, 0.0);
    rep.chosen_params.assign(cfg.outer, {0.0, 0.0});
    rep.ece_raw.assign(cfg.outer, 0.0);
    rep.ece_calibrated.assign(cfg.outer, 0.0);
    rep.selected_features.assign(cfg.outer, {});
    rep.oof_scores.assign(n, 0.0);
    rep.oof_scores_combined.assign(n, 0.0);

    parallel_for(cfg.outer, cfg.workers, [&](std::size_t fi) {
        const auto f = static_cast<std::uint32_t>(fi);
        const auto tr = detail::indices_where(fold, f, false);
        const auto te = detail::indices_where(fold, f, true);
        const auto ytr = detail::gather<std::uint8_t>(labels, tr);
        const auto msp_tr = detail::gather<double>(msp, tr);
        const auto msp_te = detail::gather<double>(msp, te);

        Eigen::MatrixXd xtr = take_rows(features.values, tr);
        Eigen::MatrixXd xte = take_rows(features.values, te);
        const auto sel = detail::anova_select(xtr, ytr, cfg.select_k);
        rep.selected_features[fi] = sel;
        if (cfg.selection_scope == SelectionScope::Outer) {
            xtr = take_columns(xtr, sel);
            const auto [rho, c] = inner_grid_search(xtr, ytr, cfg, detail::mix_seed(cfg.seed, f));
            rep.chosen_params[fi] = {rho, c};
        } else {
            // selection is redone inside every inner fold, then once on the
            // full outer train for the refit
            const auto [rho, c] = inner_grid_search(xtr, ytr, cfg, detail::mix_seed(cfg.seed, f));
            rep.chosen_params[fi] = {rho, c};
            xtr = take_columns(xtr, sel);
        }
        xte = take_columns(xte, sel);

        const auto [rho, c] = rep.chosen_params[fi];
        const ElasticNetLogReg model = fit_enet_logreg(xtr, ytr, rho, c, cfg.solver);
        const auto p_tr = detail::to_vector(model.predict_proba(xtr));
        const auto p_te = detail::to_vector(model.predict_proba(xte));  // features only
        const auto combined = combine_with_msp(p_tr, msp_tr, ytr, p_te, msp_te);
        const IsotonicCalibrator cal = fit_isotonic(p_tr, std::span<const std::uint8_t>(ytr));
        const auto p_te_cal = cal.apply(p_te);

        const auto yte = detail::gather<std::uint8_t>(labels, te);
        rep.fold_auc[fi] = auroc(p_te, yte);
        rep.fold_auc_combined[fi] = auroc(combined, yte);
        rep.ece_raw[fi] = ece(p_te, yte, cfg.ece_bins);
        rep.ece_calibrated[fi] = ece(p_te_cal, yte, cfg.ece_bins);
        for (std::size_t i = 0; i < te.size(); ++i) {
            rep.oof_scores[te[i]] = p_te[i];
            rep.oof_scores_combined[te[i]] = combined[i];
        }
    });

    std::vector<double> msp_d(msp.begin(), msp.end());
    rep.msp_auc = auroc(msp_d, labels);
    rep.significant = significance_star(rep.fold_auc, rep.msp_auc);
    rep.significant_combined = significance_star(rep.fold_auc_combined, rep.msp_auc);
    return rep;
}

inline BaselineReport msp_baseline(std::span<const double> msp, std::span<const std::uint8_t> labels,
                                   const NestedCvConfig& cfg) {
    BaselineReport b;
    b.auc = auroc(msp, labels);
    b.ece = ece(msp, labels, cfg.ece_bins);
    const auto fold = stratified_folds(labels, cfg.outer, cfg.seed);
    for (std::uint32_t f = 0; f < cfg.outer; ++f) {
        const auto tr = detail::indices_where(fold, f, false);
        const auto te = detail::indices_where(fold, f, true);
        const auto cal = fit_isotonic(detail::gather<double>(msp, tr),
                                      std::span<const std::uint8_t>(detail::gather<std::uint8_t>(labels, tr)));
        b.ece_calibrated.push_back(
            ece(cal.apply(detail::gather<double>(msp, te)), detail::gather<std::uint8_t>(labels, te), cfg.ece_bins));
    }
    return b;
}

} // namespace bll
