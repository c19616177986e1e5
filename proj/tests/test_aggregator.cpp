#include <gtest/gtest.h>

#include "bll/aggregator.hpp"
#include "oracles.hpp"

using namespace bll;

namespace {

struct Problem {
    Eigen::MatrixXd x;
    std::vector<std::uint8_t> y;
};

// Labels from a logistic model on the first `informative` columns.
Problem logistic_problem(std::mt19937_64& g, Eigen::Index n, Eigen::Index f, Eigen::Index informative,
                         double strength) {
    Problem p;
    p.x = oracle::random_matrix(g, n, f);
    p.y.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        double m = 0.0;
        for (Eigen::Index j = 0; j < informative; ++j) m += strength * p.x(i, j);
        p.y[static_cast<std::size_t>(i)] = oracle::uniform(g) < 1.0 / (1.0 + std::exp(-m)) ? 1 : 0;
    }
    return p;
}

FeatureMatrix as_features(const Eigen::MatrixXd& x) {
    FeatureMatrix fm;
    fm.values = x;
    for (Eigen::Index j = 0; j < x.cols(); ++j) fm.feature_index.push_back({1, static_cast<std::uint32_t>(j)});
    fm.spec = {FeatureFamily::RawNeurons, FeatureKind::Raw};
    return fm;
}

NestedCvConfig small_cv() {
    NestedCvConfig c;
    c.select_k = 20;
    return c;
}

double lattice_objective(const Eigen::VectorXd& xs, const std::vector<std::uint8_t>& y, double w, double b, double rho,
                         double c) {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < xs.size(); ++i) {
        const double m = (y[static_cast<std::size_t>(i)] ? 1.0 : -1.0) * (xs[i] * w + b);
        loss += m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
    }
    return rho * std::abs(w) + 0.5 * (1.0 - rho) * w * w + c * loss;
}

} // namespace

TEST(Standardizer, ZeroVarianceColumnsPassThrough) {
    Eigen::MatrixXd x(3, 2);
    x << 1, 5, 2, 5, 3, 5;
    const auto s = Standardizer::fit(x);
    const Eigen::MatrixXd z = s.apply(x);
    EXPECT_NEAR(z.col(0).mean(), 0.0, 1e-15);
    EXPECT_NEAR(z.col(0).squaredNorm() / 3.0, 1.0, 1e-12);
    EXPECT_EQ(z.col(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(FitEnet, NegligibleDataTermGivesPriorIntercept) {
    auto& g = oracle::rng();
    auto p = logistic_problem(g, 120, 5, 2, 2.0);
    const double n1 = static_cast<double>(std::count(p.y.begin(), p.y.end(), 1));
    const double n0 = 120.0 - n1;
    const auto m = fit_enet_logreg(p.x, p.y, 0.5, 1e-9);
    EXPECT_EQ(m.w.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_NEAR(m.b, std::log(n1 / n0), 1e-6);
}

TEST(FitEnet, SeparableDataMatchesLatticeOracle) {
    Eigen::MatrixXd x(40, 1);
    std::vector<std::uint8_t> y(40);
    for (int i = 0; i < 40; ++i) {
        x(i, 0) = (i < 20 ? -1.0 : 1.0) * (0.5 + 0.05 * i);
        y[static_cast<std::size_t>(i)] = i < 20 ? 0 : 1;
    }
    const auto m = fit_enet_logreg(x, y, 0.5, 0.1);
    ASSERT_TRUE(std::isfinite(m.w[0]));
    const auto kkt = kkt_residual(m, x, y);
    EXPECT_LT(kkt.weights, 1e-4);
    EXPECT_LT(kkt.intercept, 1e-4);

    // grid search over (w, b) in the standardized coordinates, refined twice
    const Eigen::VectorXd xs = m.standardizer.apply(x).col(0);
    double bw = 0.0, bb = 0.0, best = lattice_objective(xs, y, 0.0, 0.0, 0.5, 0.1);
    double cw = 0.0, cb = 0.0, half = 10.0;
    for (int level = 0; level < 3; ++level) {
        const int steps = 200;
        for (int i = 0; i <= steps; ++i)
            for (int j = 0; j <= steps; ++j) {
                const double w = cw - half + 2.0 * half * i / steps;
                const double b = cb - half + 2.0 * half * j / steps;
                const double v = lattice_objective(xs, y, w, b, 0.5, 0.1);
                if (v < best) {
                    best = v;
                    bw = w;
                    bb = b;
                }
            }
        cw = bw;
        cb = bb;
        half /= 50.0;
    }
    const double mine = lattice_objective(xs, y, m.w[0], m.b, 0.5, 0.1);
    EXPECT_LE(mine, best + 1e-9);
    EXPECT_NEAR(m.w[0], bw, 1e-3);
    EXPECT_NEAR(m.b, bb, 1e-3);
}

TEST(FitEnet, DuplicateColumnsShareWeight) {
    auto& g = oracle::rng();
    auto p = logistic_problem(g, 200, 3, 2, 1.5);
    Eigen::MatrixXd x(200, 4);
    x << p.x, p.x.col(0);
    EnetConfig cfg;
    cfg.tol = 1e-10;
    const auto m = fit_enet_logreg(x, p.y, 0.5, 0.5, cfg);
    ASSERT_NE(m.w[0], 0.0);
    EXPECT_NEAR(m.w[0], m.w[3], 1e-6);
}

TEST(FitEnet, KktOnGrid) {
    auto& g = oracle::rng();
    for (int trial = 0; trial < 5; ++trial) {
        auto p = logistic_problem(g, 150 + static_cast<Eigen::Index>(g() % 150), 10 + static_cast<Eigen::Index>(g() % 30),
                                  3, 1.0);
        for (double rho : {0.9, 0.7, 0.5})
            for (double c : {0.01, 0.05, 0.1}) {
                const auto m = fit_enet_logreg(p.x, p.y, rho, c);
                const auto k = kkt_residual(m, p.x, p.y);
                EXPECT_TRUE(m.converged);
                EXPECT_LT(k.weights, 1e-4) << rho << " " << c;
                EXPECT_LT(k.intercept, 1e-4) << rho << " " << c;
            }
    }
}

TEST(FitEnet, ObjectiveNeverIncreases) {
    auto& g = oracle::rng();
    auto p = logistic_problem(g, 300, 25, 5, 1.0);
    std::vector<double> trace;
    fit_enet_logreg(p.x, p.y, 0.7, 0.1, {}, nullptr, &trace);
    ASSERT_GE(trace.size(), 2u);
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LE(trace[i], trace[i - 1] + 1e-10);
}

TEST(FitEnet, WarmStartReachesSameOptimum) {
    auto& g = oracle::rng();
    auto p = logistic_problem(g, 250, 15, 4, 1.0);
    const auto cold = fit_enet_logreg(p.x, p.y, 0.5, 0.1);
    const auto from = fit_enet_logreg(p.x, p.y, 0.5, 0.05);
    const auto warm = fit_enet_logreg(p.x, p.y, 0.5, 0.1, {}, &from);
    EXPECT_LT((cold.w - warm.w).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(FitEnet, Validation) {
    Eigen::MatrixXd x = Eigen::MatrixXd::Ones(4, 1);
    std::vector<std::uint8_t> y{0, 1, 0, 1};
    EXPECT_THROW(fit_enet_logreg(x, y, 1.5, 0.1), ValidationError);
    EXPECT_THROW(fit_enet_logreg(x, y, 0.5, 0.0), ValidationError);
    EXPECT_THROW(fit_enet_logreg(x, std::vector<std::uint8_t>{0, 1}, 0.5, 0.1), ValidationError);
}

TEST(Isotonic, PoolsViolators) {
    const std::vector<double> s{1, 2, 3}, t{3, 1, 2};
    const auto cal = fit_isotonic(s, std::span<const double>(t));
    EXPECT_EQ(cal.apply(s), (std::vector<double>{2, 2, 2}));
}

TEST(Isotonic, MonotoneLabelsReproduceKnotMeans) {
    const std::vector<double> s{0.1, 0.2, 0.2, 0.5, 0.9};
    const std::vector<std::uint8_t> y{0, 0, 1, 1, 1};
    const auto cal = fit_isotonic(s, std::span<const std::uint8_t>(y));
    EXPECT_EQ(cal.knots, (std::vector<double>{0.1, 0.2, 0.5, 0.9}));
    EXPECT_EQ(cal.values, (std::vector<double>{0.0, 0.5, 1.0, 1.0}));
    EXPECT_DOUBLE_EQ(cal(0.35), 0.75);
    EXPECT_EQ(cal(-1.0), 0.0);
    EXPECT_EQ(cal(2.0), 1.0);
}

TEST(Isotonic, MatchesMinMaxOracle) {
    auto& g = oracle::rng();
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + g() % 60;
        std::vector<double> s(n), t(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(g() % 20);
            t[i] = (trial % 2) ? static_cast<double>(g() % 2) : oracle::normal(g);
        }
        const auto cal = fit_isotonic(s, std::span<const double>(t));
        const auto [knots, vals] = oracle::minmax_isotonic(s, t);
        ASSERT_EQ(cal.knots, knots);
        for (std::size_t i = 0; i < knots.size(); ++i) EXPECT_NEAR(cal.values[i], vals[i], 1e-12);
        for (double v : cal.values)
            if (trial % 2) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
            }
    }
}

TEST(Isotonic, AurocOnlyLosesToTies) {
    auto& g = oracle::rng();
    std::vector<double> s(200);
    std::vector<std::uint8_t> y(200);
    for (std::size_t i = 0; i < 200; ++i) {
        s[i] = oracle::normal(g);
        y[i] = oracle::uniform(g) < 1.0 / (1.0 + std::exp(-s[i])) ? 1 : 0;
    }
    const auto cal = fit_isotonic(s, std::span<const std::uint8_t>(y));
    const auto c = cal.apply(s);
    // a non-decreasing map never reorders a pair, it can only tie it
    for (std::size_t i = 0; i < 200; ++i)
        for (std::size_t j = 0; j < 200; ++j)
            if (s[i] < s[j]) EXPECT_LE(c[i], c[j]);
}

TEST(CombineWithMsp, IdenticalInputsKeepRanking) {
    auto& g = oracle::rng();
    std::vector<double> s(300);
    std::vector<std::uint8_t> y(300);
    for (std::size_t i = 0; i < 300; ++i) {
        s[i] = oracle::uniform(g, 0.01, 1.0);
        y[i] = oracle::uniform(g) < s[i] ? 1 : 0;
    }
    const std::span<const double> tr(s.data(), 200), te(s.data() + 200, 100);
    const std::span<const std::uint8_t> ytr(y.data(), 200), yte(y.data() + 200, 100);
    const auto comb = combine_with_msp(tr, tr, ytr, te, te);
    EXPECT_DOUBLE_EQ(auroc(comb, yte), auroc(te, yte));
}

TEST(CombineWithMsp, PerfectMethodDominates) {
    auto& g = oracle::rng();
    std::vector<double> m(200), msp(200);
    std::vector<std::uint8_t> y(200);
    for (std::size_t i = 0; i < 200; ++i) {
        y[i] = static_cast<std::uint8_t>(g() % 2);
        m[i] = y[i];
        msp[i] = oracle::uniform(g, 0.25, 1.0);
    }
    const auto comb = combine_with_msp(std::span<const double>(m).first(150), std::span<const double>(msp).first(150),
                                       std::span<const std::uint8_t>(y).first(150),
                                       std::span<const double>(m).last(50), std::span<const double>(msp).last(50));
    EXPECT_EQ(auroc(comb, std::span<const std::uint8_t>(y).last(50)), 1.0);
}

TEST(CombineWithMsp, TwoWeakScoresCombine) {
    auto& g = oracle::rng();
    const std::size_t n = 4000;
    std::vector<double> a(n), b(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = oracle::normal(g);
        b[i] = oracle::normal(g);
        y[i] = oracle::uniform(g) < 1.0 / (1.0 + std::exp(-(0.6 * a[i] + 0.6 * b[i]))) ? 1 : 0;
    }
    const std::span<const double> as(a), bs(b);
    const std::span<const std::uint8_t> ys(y);
    const auto comb = combine_with_msp(as.first(2000), bs.first(2000), ys.first(2000), as.last(2000), bs.last(2000));
    const double best = std::max(auroc(as.last(2000), ys.last(2000)), auroc(bs.last(2000), ys.last(2000)));
    EXPECT_GE(auroc(comb, ys.last(2000)), best - 0.01);
}

TEST(StratifiedFolds, BalancedAndDeterministic) {
    std::vector<std::uint8_t> y(103);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % 3 == 0;
    const auto f = stratified_folds(y, 5, 42);
    EXPECT_EQ(f, stratified_folds(y, 5, 42));
    EXPECT_NE(f, stratified_folds(y, 5, 43));
    for (int u = 0; u < 2; ++u) {
        std::array<int, 5> cnt{};
        for (std::size_t i = 0; i < y.size(); ++i)
            if (y[i] == u) ++cnt[f[i]];
        EXPECT_LE(*std::max_element(cnt.begin(), cnt.end()) - *std::min_element(cnt.begin(), cnt.end()), 1);
    }
    std::vector<std::uint8_t> few{1, 1, 0, 0, 0, 0, 0};
    try {
        stratified_folds(few, 5, 0);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("degenerate folds"), std::string::npos);
    }
}

TEST(NestedCv, IndependentLabelsNearChance) {
    std::mt19937_64 g(7);
    auto p = logistic_problem(g, 500, 30, 0, 0.0);
    std::vector<double> msp(500);
    for (auto& m : msp) m = oracle::uniform(g, 0.25, 1.0);
    const auto rep = nested_cv(as_features(p.x), p.y, msp, small_cv());
    const double mean = rep.auc().mean;
    EXPECT_GE(mean, 0.40);
    EXPECT_LE(mean, 0.60);
}

TEST(NestedCv, LabelColumnIsFound) {
    std::mt19937_64 g(8);
    auto p = logistic_problem(g, 300, 20, 0, 0.0);
    for (Eigen::Index i = 0; i < 300; ++i) p.x(i, 7) = p.y[static_cast<std::size_t>(i)];
    std::vector<double> msp(300, 0.5);
    msp[0] = 0.6;
    const auto rep = nested_cv(as_features(p.x), p.y, msp, small_cv());
    EXPECT_GE(rep.auc().mean, 0.99);
    for (const auto& sel : rep.selected_features)
        EXPECT_NE(std::find(sel.begin(), sel.end(), 7u), sel.end());
}

TEST(NestedCv, DeterministicAcrossWorkerCounts) {
    std::mt19937_64 g(9);
    auto p = logistic_problem(g, 200, 15, 3, 1.0);
    std::vector<double> msp(200);
    for (auto& m : msp) m = oracle::uniform(g, 0.25, 1.0);
    auto cfg = small_cv();
    const auto a = nested_cv(as_features(p.x), p.y, msp, cfg);
    cfg.workers = 3;
    const auto b = nested_cv(as_features(p.x), p.y, msp, cfg);
    EXPECT_EQ(a.fold_auc, b.fold_auc);
    EXPECT_EQ(a.fold_auc_combined, b.fold_auc_combined);
    EXPECT_EQ(a.chosen_params, b.chosen_params);
    EXPECT_EQ(a.oof_scores, b.oof_scores);
    EXPECT_EQ(a.ece_calibrated, b.ece_calibrated);
}

TEST(NestedCv, PositiveScalingInvariance) {
    std::mt19937_64 g(10);
    auto p = logistic_problem(g, 200, 12, 3, 1.0);
    std::vector<double> msp(200);
    for (auto& m : msp) m = oracle::uniform(g, 0.25, 1.0);
    auto cfg = small_cv();
    cfg.select_k = 6;
    const auto a = nested_cv(as_features(p.x), p.y, msp, cfg);
    Eigen::MatrixXd scaled = p.x;
    scaled.col(2) *= 4.0;
    scaled.col(5) *= 0.25;
    const auto b = nested_cv(as_features(scaled), p.y, msp, cfg);
    EXPECT_EQ(a.selected_features, b.selected_features);
    for (std::size_t f = 0; f < a.fold_auc.size(); ++f) EXPECT_NEAR(a.fold_auc[f], b.fold_auc[f], 1e-8);
}

TEST(NestedCv, InnerSelectionScopeRuns) {
    std::mt19937_64 g(11);
    auto p = logistic_problem(g, 200, 12, 3, 2.0);
    std::vector<double> msp(200);
    for (auto& m : msp) m = oracle::uniform(g, 0.25, 1.0);
    auto cfg = small_cv();
    cfg.select_k = 5;
    cfg.selection_scope = SelectionScope::Inner;
    const auto rep = nested_cv(as_features(p.x), p.y, msp, cfg);
    EXPECT_GT(rep.auc().mean, 0.7);
}

TEST(NestedCv, Preconditions) {
    std::mt19937_64 g(12);
    auto p = logistic_problem(g, 40, 5, 1, 1.0);
    std::vector<double> msp(40, 0.5);
    EXPECT_THROW(nested_cv(as_features(p.x), p.y, msp, small_cv()), ValidationError);
    auto cfg = small_cv();
    cfg.Cs.clear();
    auto q = logistic_problem(g, 100, 5, 1, 1.0);
    std::vector<double> msp2(100, 0.5);
    EXPECT_THROW(nested_cv(as_features(q.x), q.y, msp2, cfg), ValidationError);
}
