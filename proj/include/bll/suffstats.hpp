#pragma once

// Mergeable sufficient statistics per (layer, class) and the shared
// truncated principal basis of the previous-layer design.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include <Eigen/Dense>

#include "bll/error.hpp"

namespace bll {

// Moments of (design x, target y) pairs. For layer l the design is h^(l-1)
// and the target is h^(l) - h^(l-1). After projection the design dimension
// drops to K while the target dimension stays D.
struct LayerClassStats {
    std::uint64_t n = 0;
    Eigen::VectorXd sum_x;   // design_dim
    Eigen::MatrixXd gram;    // design_dim x design_dim, sum of x x^T
    Eigen::MatrixXd cross;   // design_dim x target_dim, sum of x y^T
    Eigen::VectorXd sum_y;   // target_dim
    Eigen::VectorXd sum_y2;  // target_dim, per-neuron sum of y_i^2

    LayerClassStats() = default;
    LayerClassStats(Eigen::Index design_dim, Eigen::Index target_dim)
        : sum_x(Eigen::VectorXd::Zero(design_dim)),
          gram(Eigen::MatrixXd::Zero(design_dim, design_dim)),
          cross(Eigen::MatrixXd::Zero(design_dim, target_dim)),
          sum_y(Eigen::VectorXd::Zero(target_dim)),
          sum_y2(Eigen::VectorXd::Zero(target_dim)) {}

    Eigen::Index design_dim() const { return sum_x.size(); }
    Eigen::Index target_dim() const { return sum_y.size(); }

    bool operator==(const LayerClassStats& o) const {
        return n == o.n && design_dim() == o.design_dim() && target_dim() == o.target_dim() &&
               sum_x == o.sum_x && gram == o.gram && cross == o.cross && sum_y == o.sum_y &&
               sum_y2 == o.sum_y2;
    }
};

inline void accumulate(LayerClassStats& s, const Eigen::Ref<const Eigen::VectorXd>& design,
                       const Eigen::Ref<const Eigen::VectorXd>& target) {
    if (design.size() != s.design_dim() || target.size() != s.target_dim())
        throw ValidationError("accumulate: dimension mismatch");
    if (!design.allFinite() || !target.allFinite()) throw ValidationError("accumulate: non-finite input");
    s.n += 1;
    s.sum_x += design;
    s.gram.noalias() += design * design.transpose();
    s.cross.noalias() += design * target.transpose();
    s.sum_y += target;
    s.sum_y2 += target.cwiseAbs2();
}

// Row-batched variant: each row of `designs` / `targets` is one observation.
// Equivalent to calling accumulate() per row, but uses GEMM.
inline void accumulate_batch(LayerClassStats& s, const Eigen::Ref<const Eigen::MatrixXd>& designs,
                             const Eigen::Ref<const Eigen::MatrixXd>& targets) {
    if (designs.rows() != targets.rows() || designs.cols() != s.design_dim() ||
        targets.cols() != s.target_dim())
        throw ValidationError("accumulate_batch: dimension mismatch");
    if (!designs.allFinite() || !targets.allFinite())
        throw ValidationError("accumulate_batch: non-finite input");
    s.n += static_cast<std::uint64_t>(designs.rows());
    s.sum_x += designs.colwise().sum().transpose();
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(s.design_dim(), s.design_dim());
    g.selfadjointView<Eigen::Lower>().rankUpdate(designs.transpose());
    s.gram += g.selfadjointView<Eigen::Lower>();
    s.cross.noalias() += designs.transpose() * targets;
    s.sum_y += targets.colwise().sum().transpose();
    s.sum_y2 += targets.cwiseAbs2().colwise().sum().transpose();
}

inline LayerClassStats merge(const LayerClassStats& a, const LayerClassStats& b) {
    if (a.design_dim() != b.design_dim() || a.target_dim() != b.target_dim())
        throw ValidationError("merge: dimension mismatch");
    LayerClassStats out = a;
    out.n += b.n;
    out.sum_x += b.sum_x;
    out.gram += b.gram;
    out.cross += b.cross;
    out.sum_y += b.sum_y;
    out.sum_y2 += b.sum_y2;
    return out;
}

struct TruncatedBasis {
    Eigen::VectorXd mean;         // D, pooled design mean
    Eigen::MatrixXd basis;        // D x K, orthonormal columns
    Eigen::VectorXd eigenvalues;  // K, non-increasing, >= 0

    Eigen::Index dim() const { return basis.cols(); }
    Eigen::Index input_dim() const { return basis.rows(); }

    Eigen::VectorXd project(const Eigen::Ref<const Eigen::VectorXd>& x) const {
        return basis.transpose() * (x - mean);
    }

    bool operator==(const TruncatedBasis&) const = default;
};

namespace detail {

// Flip each column so its largest-magnitude entry is positive; the first
// index wins ties.
inline void canonicalize_signs(Eigen::MatrixXd& vecs) {
    for (Eigen::Index j = 0; j < vecs.cols(); ++j) {
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < vecs.rows(); ++i) {
            const double a = std::abs(vecs(i, j));
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        if (vecs(arg, j) < 0.0) vecs.col(j) *= -1.0;
    }
}

} // namespace detail

// Top-K eigenpairs of the pooled design covariance gram/n - mean mean^T.
inline TruncatedBasis fit_basis(const LayerClassStats& stats_cor, const LayerClassStats& stats_incor,
                                Eigen::Index k) {
    const LayerClassStats pooled = merge(stats_cor, stats_incor);
    const Eigen::Index d = pooled.design_dim();
    if (k < 1 || k > d)
        throw ValidationError("fit_basis: K=" + std::to_string(k) + " must be in [1, D=" + std::to_string(d) + "]");
    if (pooled.n < static_cast<std::uint64_t>(k) + 1)
        throw ValidationError("fit_basis: need at least K+1=" + std::to_string(k + 1) + " observations, have " +
                              std::to_string(pooled.n));

    const double n = static_cast<double>(pooled.n);
    TruncatedBasis out;
    out.mean = pooled.sum_x / n;
    Eigen::MatrixXd cov = pooled.gram / n - out.mean * out.mean.transpose();
    cov = 0.5 * (cov + cov.transpose()).eval();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericalError("fit_basis: eigendecomposition failed");

    // Eigen returns ascending order
    out.basis.resize(d, k);
    out.eigenvalues.resize(k);
    for (Eigen::Index j = 0; j < k; ++j) {
        out.basis.col(j) = eig.eigenvectors().col(d - 1 - j);
        out.eigenvalues[j] = std::max(0.0, eig.eigenvalues()[d - 1 - j]);
    }
    detail::canonicalize_signs(out.basis);
    return out;
}

// Statistics of z = basis^T (x - mean) computed from the raw moments, no
// second pass over the data.
inline LayerClassStats project_stats(const LayerClassStats& s, const TruncatedBasis& b) {
    if (b.input_dim() != s.design_dim()) throw ValidationError("project_stats: dimension mismatch");
    const double n = static_cast<double>(s.n);
    const Eigen::MatrixXd& B = b.basis;
    const Eigen::VectorXd& m = b.mean;

    LayerClassStats out;
    out.n = s.n;
    out.sum_x = B.transpose() * (s.sum_x - n * m);
    const Eigen::MatrixXd centered_gram =
        s.gram - s.sum_x * m.transpose() - m * s.sum_x.transpose() + n * (m * m.transpose());
    out.gram = B.transpose() * centered_gram * B;
    out.gram = 0.5 * (out.gram + out.gram.transpose()).eval();
    out.cross = B.transpose() * (s.cross - m * s.sum_y.transpose());
    out.sum_y = s.sum_y;
    out.sum_y2 = s.sum_y2;
    return out;
}

} // namespace bll
