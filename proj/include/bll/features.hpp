#pragma once

// Example x feature matrices built from fitted per-neuron models, and the
// ANOVA-F pre-selection applied before the sparse aggregator.

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bll/activation_store.hpp"
#include "bll/linear_models.hpp"
#include "bll/model_bundle.hpp"
#include "bll/parallel.hpp"

namespace bll {

enum class FeatureFamily : std::uint8_t { Density = 0, Regression = 1, Ridge = 2, RawNeurons = 3 };
enum class FeatureKind : std::uint8_t { CorNLL = 0, IncorNLL = 1, Ratio = 2, Raw = 3 };

inline const char* to_string(FeatureFamily f) {
    switch (f) {
    case FeatureFamily::Density: return "Density";
    case FeatureFamily::Regression: return "Truncated Regression";
    case FeatureFamily::Ridge: return "Ridge";
    case FeatureFamily::RawNeurons: return "Raw neurons";
    }
    return "?";
}

inline const char* to_string(FeatureKind k) {
    switch (k) {
    case FeatureKind::CorNLL: return "Cor.";
    case FeatureKind::IncorNLL: return "Incor.";
    case FeatureKind::Ratio: return "Ratio";
    case FeatureKind::Raw: return "Raw";
    }
    return "?";
}

struct FeatureSpec {
    FeatureFamily family = FeatureFamily::Ridge;
    FeatureKind kind = FeatureKind::Ratio;
    AggregationMode aggregation = AggregationMode::AnswerOnly;

    bool operator==(const FeatureSpec&) const = default;

    void validate() const {
        const bool raw_family = family == FeatureFamily::RawNeurons;
        const bool raw_kind = kind == FeatureKind::Raw;
        if (raw_family != raw_kind)
            throw ValidationError(std::string("feature kind ") + bll::to_string(kind) + " is not valid for family " +
                                  bll::to_string(family));
    }

    // Row label in the style "Ridge (A, Ratio)" / "Raw neurons (Q+A)".
    std::string label() const {
        std::string s = bll::to_string(family);
        s += " (";
        s += bll::to_string(aggregation);
        if (family != FeatureFamily::RawNeurons) {
            s += ", ";
            s += bll::to_string(kind);
        }
        return s + ")";
    }
};

inline ModelFamily model_family(FeatureFamily f) {
    switch (f) {
    case FeatureFamily::Density: return ModelFamily::Density;
    case FeatureFamily::Regression: return ModelFamily::Regression;
    case FeatureFamily::Ridge: return ModelFamily::Ridge;
    case FeatureFamily::RawNeurons: break;
    }
    throw ValidationError("raw neurons have no fitted model family");
}

struct FeatureIndex {
    std::uint32_t layer = 0;
    std::uint32_t neuron = 0;
    bool operator==(const FeatureIndex&) const = default;
};

struct FeatureMatrix {
    Eigen::MatrixXd values;  // n x F
    std::vector<FeatureIndex> feature_index;
    FeatureSpec spec;

    Eigen::Index rows() const { return values.rows(); }
    Eigen::Index cols() const { return values.cols(); }
};

namespace detail {

inline void check_bundle_matches(const DatasetHeader& h, const ModelBundle& b, FeatureFamily f) {
    if (b.num_layers != h.num_layers || b.hidden_dim != h.hidden_dim)
        throw ValidationError("model bundle shape " + std::to_string(b.num_layers) + "x" +
                              std::to_string(b.hidden_dim) + " does not match dataset " +
                              std::to_string(h.num_layers) + "x" + std::to_string(h.hidden_dim));
    if (b.aggregation != h.aggregation)
        throw ValidationError(std::string("model bundle was fit on ") + to_string(b.aggregation) +
                              " activations but the dataset holds " + to_string(h.aggregation));
    const auto mf = model_family(f);
    if (!b.has(mf)) {
        std::string avail;
        for (auto x : b.families) avail += std::string(avail.empty() ? "" : ", ") + to_string(x);
        throw ValidationError(std::string("family ") + to_string(mf) + " was not fitted; available: " + avail);
    }
}

// -log p(y | z, u) for one neuron of one layer.
inline double neuron_nll(const LayerModels& lm, FeatureFamily f, int u, std::size_t i, const Eigen::VectorXd& z,
                         double y) {
    const ClassModels& cm = lm.classes[u];
    switch (f) {
    case FeatureFamily::Density: return predictive_nll(cm.density[i], y);
    case FeatureFamily::Regression: return predictive_nll(cm.regression[i], z, y);
    case FeatureFamily::Ridge: return predictive_nll(cm.ridge[i], z, y);
    case FeatureFamily::RawNeurons: break;
    }
    throw ValidationError("neuron_nll: raw family");
}

} // namespace detail

inline std::vector<FeatureIndex> feature_layout(std::uint32_t num_layers, std::uint32_t hidden_dim) {
    std::vector<FeatureIndex> idx;
    idx.reserve(static_cast<std::size_t>(num_layers - 1) * hidden_dim);
    for (std::uint32_t l = 1; l < num_layers; ++l)
        for (std::uint32_t i = 0; i < hidden_dim; ++i) idx.push_back({l, i});
    return idx;
}

// Columns are layer-major then neuron, (L-1) * D of them. `bundle` may be
// null for the raw-neuron baseline.
inline FeatureMatrix build_features(const DatasetHeader& header, std::span<const ActivationRecord> records,
                                    const ModelBundle* bundle, const FeatureSpec& spec, std::size_t workers = 1) {
    spec.validate();
    validate_header(header);
    if (spec.aggregation != header.aggregation)
        throw ValidationError("feature spec aggregation does not match the dataset");
    const bool raw = spec.family == FeatureFamily::RawNeurons;
    if (!raw) {
        if (!bundle) throw ValidationError("build_features: model bundle required for " + spec.label());
        detail::check_bundle_matches(header, *bundle, spec.family);
    }

    const std::uint32_t L = header.num_layers;
    const std::uint32_t D = header.hidden_dim;
    FeatureMatrix fm;
    fm.spec = spec;
    fm.feature_index = feature_layout(L, D);
    fm.values.resize(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(fm.feature_index.size()));

    parallel_for(records.size(), workers, [&](std::size_t row) {
        const ActivationRecord& rec = records[row];
        validate_record(rec, header, row);
        const auto r = static_cast<Eigen::Index>(row);
        Eigen::Index col = 0;
        for (std::uint32_t l = 1; l < L; ++l) {
            if (raw) {
                for (std::uint32_t i = 0; i < D; ++i)
                    fm.values(r, col++) = static_cast<double>(rec.hidden(static_cast<Eigen::Index>(l), i));
                continue;
            }
            const LayerModels& lm = bundle->layer(l);
            const Eigen::VectorXd x = design_vector(rec, l);
            const Eigen::VectorXd z = spec.family == FeatureFamily::Density ? Eigen::VectorXd() : lm.basis.project(x);
            const Eigen::VectorXd y = centered_target(rec, l);
            for (std::uint32_t i = 0; i < D; ++i) {
                double v = 0.0;
                switch (spec.kind) {
                case FeatureKind::CorNLL: v = detail::neuron_nll(lm, spec.family, 1, i, z, y[i]); break;
                case FeatureKind::IncorNLL: v = detail::neuron_nll(lm, spec.family, 0, i, z, y[i]); break;
                case FeatureKind::Ratio:
                    v = log_likelihood_ratio(detail::neuron_nll(lm, spec.family, 1, i, z, y[i]),
                                             detail::neuron_nll(lm, spec.family, 0, i, z, y[i]));
                    break;
                case FeatureKind::Raw: break;
                }
                fm.values(r, col++) = v;
            }
        }
    });
    if (!fm.values.allFinite()) throw NumericalError("build_features: non-finite feature value");
    return fm;
}

inline FeatureMatrix build_features(const Dataset& ds, const ModelBundle* bundle, const FeatureSpec& spec,
                                    std::size_t workers = 1) {
    return build_features(ds.header, ds.records, bundle, spec, workers);
}

// One-way two-group ANOVA F per column; perfect separation maps to the
// largest finite double.
inline Eigen::VectorXd anova_f(const Eigen::Ref<const Eigen::MatrixXd>& values, std::span<const std::uint8_t> labels) {
    const Eigen::Index n = values.rows();
    if (static_cast<std::size_t>(n) != labels.size()) throw ValidationError("anova_f: label count mismatch");
    if (n < 3) throw ValidationError("anova_f: need at least 3 examples");
    std::array<double, 2> cnt{0.0, 0.0};
    for (auto u : labels) cnt[u ? 1 : 0] += 1.0;
    if (cnt[0] == 0.0 || cnt[1] == 0.0) throw ValidationError("anova_f: both classes must be present");

    Eigen::VectorXd f(values.cols());
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
        std::array<double, 2> sum{0.0, 0.0};
        for (Eigen::Index r = 0; r < n; ++r) sum[labels[static_cast<std::size_t>(r)] ? 1 : 0] += values(r, j);
        const std::array<double, 2> mean{sum[0] / cnt[0], sum[1] / cnt[1]};
        const double grand = (sum[0] + sum[1]) / static_cast<double>(n);
        double within = 0.0;
        for (Eigen::Index r = 0; r < n; ++r) {
            const double dv = values(r, j) - mean[labels[static_cast<std::size_t>(r)] ? 1 : 0];
            within += dv * dv;
        }
        const double between = cnt[0] * (mean[0] - grand) * (mean[0] - grand) +
                               cnt[1] * (mean[1] - grand) * (mean[1] - grand);
        if (within == 0.0)
            f[j] = between > 0.0 ? std::numeric_limits<double>::max() : 0.0;
        else
            f[j] = between / (within / static_cast<double>(n - 2));
    }
    return f;
}

// Indices of the k largest scores (ties to the smaller index), ascending.
inline std::vector<std::size_t> select_top_k(const Eigen::Ref<const Eigen::VectorXd>& scores, std::size_t k) {
    if (k == 0) throw ValidationError("select_top_k: k must be >= 1");
    std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    k = std::min(k, order.size());
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[static_cast<Eigen::Index>(a)] > scores[static_cast<Eigen::Index>(b)];
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

inline Eigen::MatrixXd take_columns(const Eigen::Ref<const Eigen::MatrixXd>& m, std::span<const std::size_t> cols) {
    Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(static_cast<Eigen::Index>(cols[j]));
    return out;
}

inline Eigen::MatrixXd take_rows(const Eigen::Ref<const Eigen::MatrixXd>& m, std::span<const std::size_t> rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

} // namespace bll
