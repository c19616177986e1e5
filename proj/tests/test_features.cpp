#include <numbers>

#include <gtest/gtest.h>

#include "bll/features.hpp"
#include "bll/stats_cache.hpp"
#include "oracles.hpp"

using namespace bll;

namespace {

Dataset random_dataset(std::uint32_t L, std::uint32_t D, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 g(seed);
    Dataset ds;
    ds.header.num_layers = L;
    ds.header.hidden_dim = D;
    ds.header.num_records = n;
    for (std::size_t i = 0; i < n; ++i) {
        auto r = oracle::random_record(g, L, D, i);
        r.label = static_cast<std::uint8_t>(i % 2);
        ds.records.push_back(r);
    }
    return ds;
}

ModelBundle all_families(const Dataset& ds, std::uint32_t k) {
    return fit_bundle(collect_stats(ds), k, {ModelFamily::Density, ModelFamily::Regression, ModelFamily::Ridge});
}

double direct_nll(double mean, double var, double y) {
    return 0.5 * std::log(2.0 * std::numbers::pi * var) + (y - mean) * (y - mean) / (2.0 * var);
}

std::vector<std::uint8_t> labels_of(std::initializer_list<int> v) {
    std::vector<std::uint8_t> out;
    for (int x : v) out.push_back(static_cast<std::uint8_t>(x));
    return out;
}

} // namespace

TEST(BuildFeatures, SingleRecordShape) {
    const auto train = random_dataset(2, 3, 40, 1);
    const auto bundle = all_families(train, 2);
    Dataset one = random_dataset(2, 3, 1, 2);
    const auto fm = build_features(one, &bundle, {FeatureFamily::Density, FeatureKind::CorNLL});
    EXPECT_EQ(fm.rows(), 1);
    EXPECT_EQ(fm.cols(), 3);
    ASSERT_EQ(fm.feature_index.size(), 3u);
    EXPECT_EQ(fm.feature_index[2], (FeatureIndex{1, 2}));
}

TEST(BuildFeatures, LayoutIsLayerMajor) {
    const auto ds = random_dataset(4, 3, 30, 3);
    const auto fm = build_features(ds, nullptr, {FeatureFamily::RawNeurons, FeatureKind::Raw});
    EXPECT_EQ(fm.cols(), 9);
    for (std::size_t r = 0; r < ds.records.size(); ++r)
        for (Eigen::Index c = 0; c < fm.cols(); ++c) {
            const auto& fi = fm.feature_index[static_cast<std::size_t>(c)];
            EXPECT_EQ(fi.layer, 1 + c / 3);
            EXPECT_EQ(fm.values(static_cast<Eigen::Index>(r), c), ds.records[r].hidden(fi.layer, fi.neuron));
        }
}

TEST(BuildFeatures, RatioIsIncorMinusCor) {
    const auto ds = random_dataset(3, 4, 60, 4);
    const auto bundle = all_families(ds, 3);
    for (auto fam : {FeatureFamily::Density, FeatureFamily::Regression, FeatureFamily::Ridge}) {
        const auto cor = build_features(ds, &bundle, {fam, FeatureKind::CorNLL});
        const auto inc = build_features(ds, &bundle, {fam, FeatureKind::IncorNLL});
        const auto ratio = build_features(ds, &bundle, {fam, FeatureKind::Ratio});
        EXPECT_LT((ratio.values - (inc.values - cor.values)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(BuildFeatures, MatchesScalarOracle) {
    const auto ds = random_dataset(3, 4, 80, 5);
    const auto bundle = all_families(ds, 3);
    const auto dens = build_features(ds, &bundle, {FeatureFamily::Density, FeatureKind::CorNLL});
    const auto reg = build_features(ds, &bundle, {FeatureFamily::Regression, FeatureKind::IncorNLL});
    const auto ridge = build_features(ds, &bundle, {FeatureFamily::Ridge, FeatureKind::CorNLL});
    for (std::size_t r = 0; r < 10; ++r) {
        const auto& rec = ds.records[r];
        for (std::uint32_t l = 1; l < 3; ++l) {
            const auto& lm = bundle.layer(l);
            Eigen::VectorXd x(4), y(4);
            for (int i = 0; i < 4; ++i) {
                x[i] = rec.hidden(l - 1, i);
                y[i] = static_cast<double>(rec.hidden(l, i)) - static_cast<double>(rec.hidden(l - 1, i));
            }
            const Eigen::VectorXd z = lm.basis.basis.transpose() * (x - lm.basis.mean);
            for (int i = 0; i < 4; ++i) {
                const auto col = static_cast<Eigen::Index>((l - 1) * 4 + i);
                const auto row = static_cast<Eigen::Index>(r);
                const auto& d = lm.classes[1].density[static_cast<std::size_t>(i)];
                EXPECT_NEAR(dens.values(row, col), direct_nll(d.mu, d.var, y[i]), 1e-8);
                const auto& o = lm.classes[0].regression[static_cast<std::size_t>(i)];
                EXPECT_NEAR(reg.values(row, col), direct_nll(z.dot(o.w) + o.b, o.noise_var, y[i]), 1e-8);
                const auto& b = lm.classes[1].ridge[static_cast<std::size_t>(i)];
                const double v = z.dot(b.sigma_w * z) + 1.0 / b.beta;
                EXPECT_NEAR(ridge.values(row, col), direct_nll(z.dot(b.mu_w) + b.b, v, y[i]), 1e-8);
            }
        }
    }
}

TEST(BuildFeatures, DeterministicAndRowEquivariant) {
    auto ds = random_dataset(3, 4, 50, 6);
    const auto bundle = all_families(ds, 2);
    const FeatureSpec spec{FeatureFamily::Ridge, FeatureKind::Ratio};
    const auto a = build_features(ds, &bundle, spec);
    const auto b = build_features(ds, &bundle, spec, 3);
    EXPECT_TRUE(a.values == b.values);

    std::vector<ActivationRecord> rev(ds.records.rbegin(), ds.records.rend());
    const auto c = build_features(ds.header, rev, &bundle, spec);
    EXPECT_TRUE(c.values == a.values.colwise().reverse());
}

TEST(BuildFeatures, UnfittedFamilyListsAvailable) {
    const auto ds = random_dataset(3, 2, 30, 7);
    const auto bundle = fit_bundle(collect_stats(ds), 2, {ModelFamily::Density, ModelFamily::Ridge});
    try {
        build_features(ds, &bundle, {FeatureFamily::Regression, FeatureKind::Ratio});
        FAIL() << "expected a validation error";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("density"), std::string::npos) << msg;
        EXPECT_NE(msg.find("ridge"), std::string::npos) << msg;
    }
}

TEST(BuildFeatures, SpecValidation) {
    const auto ds = random_dataset(3, 2, 30, 8);
    EXPECT_THROW(build_features(ds, nullptr, {FeatureFamily::Ridge, FeatureKind::Ratio}), ValidationError);
    EXPECT_THROW(build_features(ds, nullptr, {FeatureFamily::RawNeurons, FeatureKind::Ratio}), ValidationError);
    EXPECT_THROW(build_features(ds, nullptr, {FeatureFamily::Ridge, FeatureKind::Raw}), ValidationError);
    EXPECT_THROW(build_features(ds, nullptr,
                                {FeatureFamily::RawNeurons, FeatureKind::Raw, AggregationMode::QuestionPlusAnswer}),
                 ValidationError);
}

TEST(FeatureSpec, Labels) {
    EXPECT_EQ((FeatureSpec{FeatureFamily::Ridge, FeatureKind::Ratio}).label(), "Ridge (A, Ratio)");
    EXPECT_EQ((FeatureSpec{FeatureFamily::RawNeurons, FeatureKind::Raw, AggregationMode::QuestionPlusAnswer}).label(),
              "Raw neurons (Q+A)");
}

TEST(AnovaF, HandComputedValue) {
    // class 0: {0, 2}, class 1: {2, 4}; means 1 and 3, grand 2
    // between = 2*1 + 2*1 = 4, within = 4, F = 4 / (4 / 2) = 2
    Eigen::MatrixXd v(4, 1);
    v << 0, 2, 2, 4;
    EXPECT_DOUBLE_EQ(anova_f(v, labels_of({0, 0, 1, 1}))[0], 2.0);
}

TEST(AnovaF, ConstantAndSeparated) {
    Eigen::MatrixXd v(4, 2);
    v << 5, 0, 5, 0, 5, 1, 5, 1;
    const auto f = anova_f(v, labels_of({0, 0, 1, 1}));
    EXPECT_EQ(f[0], 0.0);
    EXPECT_EQ(f[1], std::numeric_limits<double>::max());
}

TEST(AnovaF, AffineInvariance) {
    auto& g = oracle::rng();
    const Eigen::MatrixXd v = oracle::random_matrix(g, 40, 5);
    std::vector<std::uint8_t> y(40);
    for (std::size_t i = 0; i < 40; ++i) y[i] = static_cast<std::uint8_t>(g() % 2);
    const auto f = anova_f(v, y);
    const Eigen::MatrixXd w = (v * 3.5).array() + 10.0;
    const auto f2 = anova_f(w, y);
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(f2[j], f[j], 1e-9 * std::max(1.0, f[j]));
}

TEST(AnovaF, Errors) {
    Eigen::MatrixXd v(3, 1);
    v << 1, 2, 3;
    EXPECT_THROW(anova_f(v, labels_of({1, 1, 1})), ValidationError);
    EXPECT_THROW(anova_f(v, labels_of({1, 0})), ValidationError);
}

TEST(SelectTopK, Examples) {
    Eigen::VectorXd s(3);
    s << 3, 1, 2;
    EXPECT_EQ(select_top_k(s, 2), (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(select_top_k(Eigen::VectorXd::Ones(3), 2), (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(select_top_k(s, 10), (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_THROW(select_top_k(s, 0), ValidationError);
}

TEST(SelectTopK, ColumnFilterCommutesWithRowSubset) {
    auto& g = oracle::rng();
    const Eigen::MatrixXd m = oracle::random_matrix(g, 20, 6);
    const std::vector<std::size_t> cols{1, 4, 5};
    const std::vector<std::size_t> rows{0, 3, 7, 19};
    EXPECT_TRUE(take_rows(take_columns(m, cols), rows) == take_columns(take_rows(m, rows), cols));
}
