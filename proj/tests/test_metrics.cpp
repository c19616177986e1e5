#include <gtest/gtest.h>

#include "bll/metrics.hpp"
#include "oracles.hpp"

using namespace bll;

namespace {

std::vector<std::uint8_t> u8(std::initializer_list<int> v) {
    std::vector<std::uint8_t> out;
    for (int x : v) out.push_back(static_cast<std::uint8_t>(x));
    return out;
}

} // namespace

TEST(Auroc, Examples) {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    EXPECT_DOUBLE_EQ(auroc(s, u8({0, 0, 1, 1})), 0.75);
    EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, u8({0, 0, 1, 1})), 1.0);
    EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, u8({0, 1, 0, 1})), 0.5);
}

TEST(Auroc, RequiresBothClasses) {
    EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, u8({1, 1})), ValidationError);
    EXPECT_THROW(auroc(std::vector<double>{0.1}, u8({1, 0})), ValidationError);
    EXPECT_THROW(auroc(std::vector<double>{0.1, std::nan("")}, u8({1, 0})), ValidationError);
}

TEST(Auroc, MatchesPairCountingWithTies) {
    auto& g = oracle::rng();
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + g() % 150;
        std::vector<double> s(n);
        std::vector<std::uint8_t> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(g() % 7) / 7.0;  // many ties
            y[i] = static_cast<std::uint8_t>(g() % 2);
        }
        y[0] = 0;
        y[1] = 1;
        EXPECT_DOUBLE_EQ(auroc(s, y), oracle::pair_auroc(s, y));
    }
}

TEST(Auroc, MonotoneTransformAndLabelFlip) {
    auto& g = oracle::rng();
    std::vector<double> s(80), t(80);
    std::vector<std::uint8_t> y(80), flipped(80);
    for (std::size_t i = 0; i < 80; ++i) {
        s[i] = oracle::normal(g);
        t[i] = std::exp(3.0 * s[i]) + 2.0;
        y[i] = static_cast<std::uint8_t>(i % 3 == 0);
        flipped[i] = 1 - y[i];
    }
    EXPECT_EQ(auroc(s, y), auroc(t, y));
    EXPECT_NEAR(auroc(s, flipped), 1.0 - auroc(s, y), 1e-15);

    std::vector<double> tied{1, 1, 2, 2, 3};
    const auto yt = u8({0, 1, 1, 0, 1});
    const auto yf = u8({1, 0, 0, 1, 0});
    EXPECT_NEAR(auroc(tied, yf), 1.0 - auroc(tied, yt), 1e-15);
}

TEST(Ece, Examples) {
    EXPECT_NEAR(ece(std::vector<double>{0.9, 0.9, 0.9, 0.9}, u8({1, 0, 1, 0})), 0.4, 1e-15);
    EXPECT_EQ(ece(std::vector<double>{1, 1, 0, 0}, u8({1, 1, 0, 0})), 0.0);
    EXPECT_NEAR(ece(std::vector<double>{0.3}, u8({1})), 0.7, 1e-15);
}

TEST(Ece, CalibratedBinsGiveZero) {
    // bin (0.2, 0.3]: 4 examples at 0.25, one positive
    // bin (0.7, 0.8]: 4 examples at 0.75, three positives
    const std::vector<double> s{0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75};
    EXPECT_NEAR(ece(s, u8({1, 0, 0, 0, 1, 1, 1, 0})), 0.0, 1e-15);
}

TEST(Ece, MatchesBinEnumeration) {
    auto& g = oracle::rng();
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + g() % 200;
        std::vector<double> s(n);
        std::vector<std::uint8_t> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            // include exact bin edges and the endpoints
            s[i] = (g() % 4 == 0) ? static_cast<double>(g() % 11) / 10.0 : oracle::uniform(g);
            y[i] = static_cast<std::uint8_t>(g() % 2);
        }
        EXPECT_NEAR(ece(s, y), oracle::enum_ece(s, y), 1e-12);
    }
}

TEST(Ece, RejectsOutOfRange) {
    EXPECT_THROW(ece(std::vector<double>{1.5}, u8({1})), ValidationError);
    EXPECT_THROW(ece(std::vector<double>{-0.1}, u8({1})), ValidationError);
}

TEST(FoldSummary, Examples) {
    const auto a = fold_summary(std::vector<double>{1, 1, 1});
    EXPECT_EQ(a.mean, 1.0);
    EXPECT_EQ(a.std, 0.0);
    const auto b = fold_summary(std::vector<double>{0, 1});
    EXPECT_DOUBLE_EQ(b.mean, 0.5);
    EXPECT_NEAR(b.std, 0.7071067811865476, 1e-15);
    const auto c = fold_summary(std::vector<double>{0.3, 0.9, 0.1, 0.5});
    const auto d = fold_summary(std::vector<double>{0.5, 0.1, 0.9, 0.3});
    EXPECT_DOUBLE_EQ(c.mean, d.mean);
    EXPECT_DOUBLE_EQ(c.std, d.std);
}

TEST(SignificanceStar, Examples) {
    EXPECT_FALSE(significance_star(std::vector<double>(5, 0.8), 0.8));
    EXPECT_TRUE(significance_star(std::vector<double>(5, 0.82), 0.8));
    EXPECT_FALSE(significance_star(std::vector<double>(5, 0.78), 0.8));
    EXPECT_FALSE(significance_star(std::vector<double>{0.81, 0.80, 0.82, 0.79, 0.83}, 0.8089));
    // t = (0.81 - 0.79) / (0.0158 / sqrt 5) = 2.83 > 2.132
    EXPECT_TRUE(significance_star(std::vector<double>{0.81, 0.80, 0.82, 0.79, 0.83}, 0.79));
}

TEST(ScoreCorrelation, Examples) {
    const std::vector<double> a{1, 2, 3};
    EXPECT_NEAR(score_correlation(a, a), 1.0, 1e-15);
    EXPECT_NEAR(score_correlation(a, std::vector<double>{-1, -2, -3}), -1.0, 1e-15);
    EXPECT_NEAR(score_correlation(a, std::vector<double>{1, 2, 4}), 0.9819805060619657, 1e-12);
    EXPECT_THROW(score_correlation(a, std::vector<double>{2, 2, 2}), ValidationError);
}

TEST(ScoreCorrelation, AffineInvariance) {
    auto& g = oracle::rng();
    std::vector<double> a(30), b(30), a2(30);
    for (std::size_t i = 0; i < 30; ++i) {
        a[i] = oracle::normal(g);
        b[i] = a[i] + oracle::normal(g);
        a2[i] = 4.0 * a[i] - 7.0;
    }
    EXPECT_NEAR(score_correlation(a, b), score_correlation(a2, b), 1e-12);
}
