#pragma once

// Fitted per-neuron models for every (layer, class, family) and the "BLLM"
// bundle container.

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bll/activation_store.hpp"
#include "bll/binary_io.hpp"
#include "bll/linear_models.hpp"
#include "bll/parallel.hpp"
#include "bll/stats_cache.hpp"
#include "bll/suffstats.hpp"

namespace bll {

enum class ModelFamily : std::uint8_t { Density = 0, Regression = 1, Ridge = 2 };

inline const char* to_string(ModelFamily f) {
    switch (f) {
    case ModelFamily::Density: return "density";
    case ModelFamily::Regression: return "regression";
    case ModelFamily::Ridge: return "ridge";
    }
    return "?";
}

struct ClassModels {
    std::vector<GaussianDensity> density;
    std::vector<LinearGaussianModel> regression;
    std::vector<BayesianRidgeModel> ridge;

    bool operator==(const ClassModels&) const = default;
};

struct LayerModels {
    TruncatedBasis basis;
    std::array<ClassModels, 2> classes;  // indexed by label u

    bool operator==(const LayerModels&) const = default;
};

struct ModelBundle {
    std::uint32_t num_layers = 0;
    std::uint32_t hidden_dim = 0;
    std::uint32_t rank = 0;  // K
    AggregationMode aggregation = AggregationMode::AnswerOnly;
    std::uint64_t stats_hash = 0;
    std::vector<ModelFamily> families;
    std::vector<LayerModels> layers;  // layers[l - 1] models layer l

    bool has(ModelFamily f) const { return std::find(families.begin(), families.end(), f) != families.end(); }
    const LayerModels& layer(std::size_t l) const { return layers.at(l - 1); }

    bool operator==(const ModelBundle&) const = default;
};

struct FitReport {
    struct LayerLine {
        std::size_t layer = 0;
        std::array<std::size_t, 2> ridge_converged{0, 0};
        std::array<std::size_t, 2> ridge_total{0, 0};
    };
    std::vector<LayerLine> layers;

    double nonconverged_fraction() const {
        std::size_t bad = 0, total = 0;
        for (const auto& l : layers)
            for (int u = 0; u < 2; ++u) {
                bad += l.ridge_total[u] - l.ridge_converged[u];
                total += l.ridge_total[u];
            }
        return total == 0 ? 0.0 : static_cast<double>(bad) / static_cast<double>(total);
    }
};

// Fits the requested families for every layer >= 1. One basis per layer is
// fit on both classes pooled; each class model reads only its own stats.
inline ModelBundle fit_bundle(const StatsCache& stats, std::uint32_t rank, std::vector<ModelFamily> families,
                              const RidgeConfig& ridge_cfg = {}, std::size_t workers = 1,
                              FitReport* report = nullptr) {
    require_both_classes(stats);
    if (families.empty()) throw ValidationError("fit_bundle: no model family requested");
    std::sort(families.begin(), families.end());
    families.erase(std::unique(families.begin(), families.end()), families.end());

    ModelBundle b;
    b.num_layers = stats.dataset.num_layers;
    b.hidden_dim = stats.dataset.hidden_dim;
    b.rank = rank;
    b.aggregation = stats.dataset.aggregation;
    b.stats_hash = stats.input_hash;
    b.families = families;
    b.layers.resize(stats.layers.size());

    const auto d = static_cast<Eigen::Index>(b.hidden_dim);
    const bool want_density = b.has(ModelFamily::Density);
    const bool want_reg = b.has(ModelFamily::Regression);
    const bool want_ridge = b.has(ModelFamily::Ridge);
    std::vector<FitReport::LayerLine> lines(stats.layers.size());

    parallel_for(stats.layers.size(), workers, [&](std::size_t idx) {
        const std::size_t layer = idx + 1;
        const auto& ls = stats.layers[idx];
        LayerModels& out = b.layers[idx];
        out.basis = fit_basis(ls[1], ls[0], static_cast<Eigen::Index>(rank));
        lines[idx].layer = layer;
        for (int u = 0; u < 2; ++u) {
            const auto& raw = ls[u];
            ClassModels& cm = out.classes[u];
            if (want_density) {
                cm.density.reserve(static_cast<std::size_t>(d));
                for (Eigen::Index i = 0; i < d; ++i) cm.density.push_back(fit_density(raw, i));
            }
            if (!want_reg && !want_ridge) continue;
            const LayerClassStats proj = project_stats(raw, out.basis);
            const CenteredDesign design = center_design(proj);
            try {
                for (Eigen::Index i = 0; i < d; ++i) {
                    if (want_reg) cm.regression.push_back(fit_ols(proj, design, i));
                    if (want_ridge) {
                        cm.ridge.push_back(fit_bayesian_ridge(proj, design, i, ridge_cfg));
                        lines[idx].ridge_converged[u] += cm.ridge.back().converged ? 1 : 0;
                        lines[idx].ridge_total[u] += 1;
                    }
                }
            } catch (const NumericalError& e) {
                throw NumericalError("layer " + std::to_string(layer) + ", class " + class_name(u) + ": " + e.what());
            } catch (const ValidationError& e) {
                throw ValidationError("layer " + std::to_string(layer) + ", class " + class_name(u) + ": " + e.what());
            }
        }
    });
    if (report) report->layers = std::move(lines);
    return b;
}

inline constexpr char kBundleMagic[4] = {'B', 'L', 'L', 'M'};
inline constexpr std::uint32_t kBundleVersion = 1;

inline void save_bundle(const ModelBundle& b, std::ostream& os) {
    io::LeWriter w(os);
    w.bytes(std::string_view(kBundleMagic, 4));
    w.u32(kBundleVersion);
    w.u32(b.num_layers);
    w.u32(b.hidden_dim);
    w.u32(b.rank);
    w.u8(static_cast<std::uint8_t>(b.aggregation));
    w.u64(b.stats_hash);
    w.u32(static_cast<std::uint32_t>(b.families.size()));
    for (auto f : b.families) w.u8(static_cast<std::uint8_t>(f));
    for (const auto& layer : b.layers) {
        w.vec(layer.basis.mean);
        w.mat(layer.basis.basis);
        w.vec(layer.basis.eigenvalues);
        for (const auto& cm : layer.classes) {
            w.u64(cm.density.size());
            for (const auto& g : cm.density) {
                w.f64(g.mu);
                w.f64(g.var);
            }
            w.u64(cm.regression.size());
            for (const auto& m : cm.regression) {
                w.vec(m.w);
                w.f64(m.b);
                w.f64(m.noise_var);
            }
            w.u64(cm.ridge.size());
            for (const auto& m : cm.ridge) {
                w.vec(m.mu_w);
                w.f64(m.b);
                w.mat(m.sigma_w);
                w.f64(m.beta);
                w.f64(m.lambda);
                w.f64(m.gamma);
                w.u32(m.n_iter);
                w.u8(m.converged ? 1 : 0);
            }
        }
    }
}

inline ModelBundle load_bundle(std::istream& is) {
    io::LeReader r(is);
    if (r.bytes(4, "bundle magic") != std::string_view(kBundleMagic, 4)) throw FormatError("not a BLLM model bundle");
    if (r.u32("bundle version") != kBundleVersion) throw FormatError("unsupported model bundle version");
    ModelBundle b;
    b.num_layers = r.u32("num_layers");
    b.hidden_dim = r.u32("hidden_dim");
    b.rank = r.u32("rank");
    b.aggregation = static_cast<AggregationMode>(r.u8("aggregation"));
    b.stats_hash = r.u64("stats hash");
    const auto nf = r.u32("family count");
    if (nf > 3) throw FormatError("bad family count");
    for (std::uint32_t i = 0; i < nf; ++i) {
        const auto f = r.u8("family");
        if (f > 2) throw FormatError("unknown model family");
        b.families.push_back(static_cast<ModelFamily>(f));
    }
    if (b.num_layers < 2) throw FormatError("bundle has fewer than 2 layers");
    b.layers.resize(b.num_layers - 1);
    auto count = [&](const char* what) {
        const auto n = r.u64(what);
        if (n > b.hidden_dim) throw FormatError(std::string("bad ") + what);
        return static_cast<std::size_t>(n);
    };
    for (auto& layer : b.layers) {
        layer.basis.mean = r.vec("basis mean");
        layer.basis.basis = r.mat("basis");
        layer.basis.eigenvalues = r.vec("basis eigenvalues");
        for (auto& cm : layer.classes) {
            cm.density.resize(count("density count"));
            for (auto& g : cm.density) {
                g.mu = r.f64("density mu");
                g.var = r.f64("density var");
            }
            cm.regression.resize(count("regression count"));
            for (auto& m : cm.regression) {
                m.w = r.vec("ols w");
                m.b = r.f64("ols b");
                m.noise_var = r.f64("ols noise");
            }
            cm.ridge.resize(count("ridge count"));
            for (auto& m : cm.ridge) {
                m.mu_w = r.vec("ridge mu");
                m.b = r.f64("ridge b");
                m.sigma_w = r.mat("ridge sigma");
                m.beta = r.f64("ridge beta");
                m.lambda = r.f64("ridge lambda");
                m.gamma = r.f64("ridge gamma");
                m.n_iter = r.u32("ridge n_iter");
                m.converged = r.u8("ridge converged") != 0;
            }
        }
    }
    return b;
}

inline void save_bundle_file(const ModelBundle& b, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot open " + path + " for writing");
    save_bundle(b, os);
}

inline ModelBundle load_bundle_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("missing model bundle " + path + " (run `fit` first)");
    return load_bundle(is);
}

inline std::uint64_t bundle_hash(const ModelBundle& b) {
    std::ostringstream os(std::ios::binary);
    save_bundle(b, os);
    io::Fnv1a h;
    h.update(os.view());
    return h.digest();
}

} // namespace bll
