#pragma once

// Per-neuron model families: Gaussian density, truncated least squares and
// Bayesian ridge with evidence-maximized precisions. All of them are fitted
// from sufficient statistics only.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bll/error.hpp"
#include "bll/suffstats.hpp"

namespace bll {

inline constexpr double kVarianceFloor = 1e-12;

struct GaussianDensity {
    double mu = 0.0;
    double var = 0.0;  // 0 means unfitted

    bool operator==(const GaussianDensity&) const = default;
};

struct LinearGaussianModel {
    Eigen::VectorXd w;
    double b = 0.0;
    double noise_var = 0.0;

    bool operator==(const LinearGaussianModel&) const = default;
};

struct BayesianRidgeModel {
    Eigen::VectorXd mu_w;     // posterior mean
    double b = 0.0;           // unpenalized intercept
    Eigen::MatrixXd sigma_w;  // posterior covariance
    double beta = 0.0;        // noise precision 1/sigma^2
    double lambda = 0.0;      // weight precision, prior N(0, lambda^-1 I)
    double gamma = 0.0;       // effective number of well-determined weights
    std::uint32_t n_iter = 0;
    bool converged = false;

    bool operator==(const BayesianRidgeModel&) const = default;
};

struct GaussianPosterior {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

namespace detail {

inline GaussianPosterior conjugate_posterior_unchecked(const Eigen::MatrixXd& gram, const Eigen::VectorXd& xty,
                                                       double noise_var, double prior_var) {
    const Eigen::Index k = gram.rows();
    Eigen::MatrixXd precision = gram / noise_var;
    precision.diagonal().array() += 1.0 / prior_var;
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) throw NumericalError("conjugate_posterior: precision not positive definite");
    GaussianPosterior out;
    out.cov = llt.solve(Eigen::MatrixXd::Identity(k, k));
    out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
    out.mean = llt.solve(xty) / noise_var;
    return out;
}

} // namespace detail

// Sigma_n = (X^T X / s2 + I / t2)^-1,  mu_n = Sigma_n X^T y / s2.
// `n` is only used for validation; the data enter through gram and xty.
inline GaussianPosterior conjugate_posterior(const Eigen::MatrixXd& gram, const Eigen::VectorXd& xty,
                                             std::uint64_t n, double noise_var, double prior_var) {
    if (gram.rows() != gram.cols() || xty.size() != gram.rows())
        throw ValidationError("conjugate_posterior: dimension mismatch");
    if (!(noise_var > 0.0) || !(prior_var > 0.0))
        throw ValidationError("conjugate_posterior: variances must be positive");
    if (n == 0 && (gram.cwiseAbs().maxCoeff() > 0.0 || xty.cwiseAbs().maxCoeff() > 0.0))
        throw ValidationError("conjugate_posterior: non-zero moments with n = 0");
    if (gram.size() > 0) {
        const double scale = std::max(1.0, gram.diagonal().cwiseAbs().maxCoeff());
        if ((gram - gram.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
            throw ValidationError("conjugate_posterior: gram is not symmetric");
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
        if (eig.eigenvalues().minCoeff() < -1e-8 * scale)
            throw ValidationError("conjugate_posterior: gram is not positive semidefinite");
    }
    return detail::conjugate_posterior_unchecked(gram, xty, noise_var, prior_var);
}

inline GaussianDensity fit_density(std::uint64_t n, double sum_y, double sum_y2) {
    if (n < 2) throw ValidationError("fit_density: need n >= 2, have " + std::to_string(n));
    const double nn = static_cast<double>(n);
    GaussianDensity g;
    g.mu = sum_y / nn;
    g.var = std::max(sum_y2 / nn - g.mu * g.mu, kVarianceFloor);
    return g;
}

inline GaussianDensity fit_density(const LayerClassStats& s, Eigen::Index neuron) {
    return fit_density(s.n, s.sum_y[neuron], s.sum_y2[neuron]);
}

// Design moments of one (layer, class) after removing the class mean of z.
// Shared by every neuron of the layer.
struct CenteredDesign {
    std::uint64_t n = 0;
    Eigen::VectorXd mean_z;
    Eigen::MatrixXd gram;         // sum of (z - mean_z)(z - mean_z)^T
    Eigen::VectorXd eigenvalues;  // of gram, clamped at 0
    Eigen::MatrixXd eigenvectors;
};

inline CenteredDesign center_design(const LayerClassStats& projected) {
    if (projected.n == 0) throw ValidationError("center_design: no observations");
    CenteredDesign c;
    c.n = projected.n;
    const double n = static_cast<double>(projected.n);
    c.mean_z = projected.sum_x / n;
    c.gram = projected.gram - n * (c.mean_z * c.mean_z.transpose());
    c.gram = 0.5 * (c.gram + c.gram.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c.gram);
    if (eig.info() != Eigen::Success) throw NumericalError("center_design: eigendecomposition failed");
    c.eigenvalues = eig.eigenvalues().cwiseMax(0.0);
    c.eigenvectors = eig.eigenvectors();
    return c;
}

// Centered target moments of one neuron.
struct CenteredTarget {
    double mean_y = 0.0;
    Eigen::VectorXd cross;  // sum of (z - mean_z)(y - mean_y)
    double yy = 0.0;        // sum of (y - mean_y)^2, clamped at 0
};

inline CenteredTarget center_target(const LayerClassStats& projected, const CenteredDesign& design,
                                    Eigen::Index neuron) {
    if (neuron < 0 || neuron >= projected.target_dim()) throw ValidationError("neuron index out of range");
    const double n = static_cast<double>(projected.n);
    CenteredTarget t;
    t.mean_y = projected.sum_y[neuron] / n;
    t.cross = projected.cross.col(neuron) - n * t.mean_y * design.mean_z;
    t.yy = std::max(0.0, projected.sum_y2[neuron] - n * t.mean_y * t.mean_y);
    return t;
}

// Residual sum of squares of weights w, from moments.
inline double residual_sum_squares(const CenteredDesign& d, const CenteredTarget& t, const Eigen::VectorXd& w) {
    return std::max(0.0, t.yy - 2.0 * w.dot(t.cross) + w.dot(d.gram * w));
}

inline LinearGaussianModel fit_ols(const LayerClassStats& projected, const CenteredDesign& design,
                                   Eigen::Index neuron) {
    const auto k = projected.design_dim();
    if (projected.n < static_cast<std::uint64_t>(k) + 2)
        throw ValidationError("fit_ols: need n >= K+2=" + std::to_string(k + 2) + ", have " +
                              std::to_string(projected.n));
    const CenteredTarget t = center_target(projected, design, neuron);
    const double jitter = std::max(1e-10 * design.gram.trace() / static_cast<double>(k),
                                   std::numeric_limits<double>::min());
    Eigen::MatrixXd normal = design.gram;
    normal.diagonal().array() += jitter;

    LinearGaussianModel m;
    m.w = normal.llt().solve(t.cross);
    m.b = t.mean_y - design.mean_z.dot(m.w);
    m.noise_var = std::max(residual_sum_squares(design, t, m.w) / static_cast<double>(projected.n), kVarianceFloor);
    if (!m.w.allFinite() || !std::isfinite(m.b))
        throw NumericalError("fit_ols: non-finite solution for neuron " + std::to_string(neuron));
    return m;
}

inline LinearGaussianModel fit_ols(const LayerClassStats& projected, Eigen::Index neuron) {
    return fit_ols(projected, center_design(projected), neuron);
}

struct RidgeConfig {
    double tol = 1e-3;
    std::uint32_t max_iter = 300;
    double lambda_shape = 1e-6;  // Gamma hyperprior on lambda
    double lambda_rate = 1e-6;
    double beta_shape = 1e-6;    // Gamma hyperprior on beta
    double beta_rate = 1e-6;
    // Starting values; 0 selects the defaults (lambda = 1, beta = 1/var(y)).
    double lambda_init = 0.0;
    double beta_init = 0.0;
};

// Log evidence (plus Gamma hyperprior terms) of the centered problem at
// (lambda, beta), evaluated in the eigenbasis of the design gram.
inline double log_marginal_likelihood(const CenteredDesign& d, const CenteredTarget& t, double lambda, double beta,
                                      const RidgeConfig& cfg = {}) {
    const Eigen::VectorXd c = d.eigenvectors.transpose() * t.cross;
    const Eigen::ArrayXd denom = beta * d.eigenvalues.array() + lambda;
    const Eigen::VectorXd mu_rot = (beta * c.array() / denom).matrix();
    const double mu2 = mu_rot.squaredNorm();
    const double rss = std::max(0.0, t.yy - 2.0 * mu_rot.dot(c) + (d.eigenvalues.array() * mu_rot.array().square()).sum());
    const double n = static_cast<double>(d.n);
    const double k = static_cast<double>(d.eigenvalues.size());
    double score = cfg.lambda_shape * std::log(lambda) - cfg.lambda_rate * lambda;
    score += cfg.beta_shape * std::log(beta) - cfg.beta_rate * beta;
    score += 0.5 * (k * std::log(lambda) + n * std::log(beta) - beta * rss - lambda * mu2 -
                    denom.log().sum() - n * std::log(2.0 * std::numbers::pi));
    return score;
}

// Evidence approximation: alternate the posterior mean with the fixed-point
// updates of lambda and beta until the mean stops moving. The final
// posterior is the conjugate update at the converged precisions.
inline BayesianRidgeModel fit_bayesian_ridge(const LayerClassStats& projected, const CenteredDesign& design,
                                             Eigen::Index neuron, const RidgeConfig& cfg = {},
                                             std::vector<double>* evidence_trace = nullptr) {
    const auto k = projected.design_dim();
    if (projected.n < static_cast<std::uint64_t>(k) + 2)
        throw ValidationError("fit_bayesian_ridge: need n >= K+2=" + std::to_string(k + 2) + ", have " +
                              std::to_string(projected.n));
    const CenteredTarget t = center_target(projected, design, neuron);
    const double n = static_cast<double>(projected.n);
    const Eigen::ArrayXd e = design.eigenvalues.array();
    const Eigen::VectorXd c = design.eigenvectors.transpose() * t.cross;

    double lambda = cfg.lambda_init > 0.0 ? cfg.lambda_init : 1.0;
    double beta = cfg.beta_init > 0.0 ? cfg.beta_init : 1.0 / std::max(t.yy / n, kVarianceFloor);

    BayesianRidgeModel m;
    Eigen::VectorXd mu_old;
    for (std::uint32_t it = 0; it < cfg.max_iter; ++it) {
        if (evidence_trace) evidence_trace->push_back(log_marginal_likelihood(design, t, lambda, beta, cfg));
        // posterior mean in the rotated coordinates
        const Eigen::VectorXd mu = (beta * c.array() / (beta * e + lambda)).matrix();
        const double rss = std::max(0.0, t.yy - 2.0 * mu.dot(c) + (e * mu.array().square()).sum());
        const double gamma = (beta * e / (lambda + beta * e)).sum();
        lambda = (gamma + 2.0 * cfg.lambda_shape) / (mu.squaredNorm() + 2.0 * cfg.lambda_rate);
        beta = (n - gamma + 2.0 * cfg.beta_shape) / (rss + 2.0 * cfg.beta_rate);
        if (!std::isfinite(lambda) || !std::isfinite(beta) || !(lambda > 0.0) || !(beta > 0.0))
            throw NumericalError("fit_bayesian_ridge: non-finite iterate for neuron " + std::to_string(neuron) +
                                 " at iteration " + std::to_string(it));
        m.n_iter = it + 1;
        if (it > 0 && (mu - mu_old).cwiseAbs().maxCoeff() < cfg.tol) {
            m.converged = true;
            break;
        }
        mu_old = mu;
    }
    if (evidence_trace) evidence_trace->push_back(log_marginal_likelihood(design, t, lambda, beta, cfg));

    const GaussianPosterior post = detail::conjugate_posterior_unchecked(design.gram, t.cross, 1.0 / beta, 1.0 / lambda);
    m.mu_w = post.mean;
    m.sigma_w = post.cov;
    m.beta = beta;
    m.lambda = lambda;
    m.gamma = (beta * e / (lambda + beta * e)).sum();
    m.b = t.mean_y - design.mean_z.dot(m.mu_w);
    if (!m.mu_w.allFinite() || !m.sigma_w.allFinite() || !std::isfinite(m.b))
        throw NumericalError("fit_bayesian_ridge: non-finite posterior for neuron " + std::to_string(neuron));
    return m;
}

inline BayesianRidgeModel fit_bayesian_ridge(const LayerClassStats& projected, Eigen::Index neuron,
                                             const RidgeConfig& cfg = {}) {
    return fit_bayesian_ridge(projected, center_design(projected), neuron, cfg);
}

// -log N(y | mean, var), var floored.
inline double gaussian_nll(double mean, double var, double y) {
    const double v = std::max(var, kVarianceFloor);
    const double r = y - mean;
    return 0.5 * std::log(2.0 * std::numbers::pi * v) + r * r / (2.0 * v);
}

inline double predictive_nll(const GaussianDensity& m, double y) {
    if (!(m.var > 0.0)) throw ValidationError("predictive_nll: density model is not fitted");
    return gaussian_nll(m.mu, m.var, y);
}

inline double predictive_nll(const LinearGaussianModel& m, const Eigen::Ref<const Eigen::VectorXd>& z, double y) {
    if (!(m.noise_var > 0.0)) throw ValidationError("predictive_nll: regression model is not fitted");
    if (z.size() != m.w.size()) throw ValidationError("predictive_nll: design dimension mismatch");
    return gaussian_nll(z.dot(m.w) + m.b, m.noise_var, y);
}

inline double predictive_variance(const BayesianRidgeModel& m, const Eigen::Ref<const Eigen::VectorXd>& z) {
    return z.dot(m.sigma_w * z) + 1.0 / m.beta;
}

inline double predictive_nll(const BayesianRidgeModel& m, const Eigen::Ref<const Eigen::VectorXd>& z, double y) {
    if (!(m.beta > 0.0)) throw ValidationError("predictive_nll: ridge model is not fitted");
    if (z.size() != m.mu_w.size()) throw ValidationError("predictive_nll: design dimension mismatch");
    return gaussian_nll(z.dot(m.mu_w) + m.b, predictive_variance(m, z), y);
}

// log p(y | u=1) - log p(y | u=0)
inline double log_likelihood_ratio(double nll_cor, double nll_incor) {
    if (!std::isfinite(nll_cor) || !std::isfinite(nll_incor))
        throw ValidationError("log_likelihood_ratio: non-finite input");
    return nll_incor - nll_cor;
}

} // namespace bll
