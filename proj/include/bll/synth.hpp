#pragma once

// Synthetic activations with known class-conditional residual dynamics:
//   h^0 ~ N(0, I),  h^l = h^(l-1) + W_u^l h^(l-1) + c_u^l + eps,  eps ~ N(0, s_l^2 I)
//   c_u^l is a per-layer offset shared by both classes plus an optional class shift
// plus a logit-normal msp whose AUROC against the label is set by
// `msp_informativeness`.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "bll/activation_store.hpp"
#include "bll/error.hpp"
#include "bll/linear_models.hpp"
#include "bll/model_bundle.hpp"

namespace bll::synth {

// splitmix64 stream with a Box-Muller normal; identical on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform on (0, 1)
    double uniform() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double r = std::sqrt(-2.0 * std::log(uniform()));
        const double a = 2.0 * std::numbers::pi * uniform();
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
        return m;
    }

    // Independent stream keyed by (seed, a, b).
    static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        Rng r(seed);
        r.state_ ^= Rng(a * 0x632be59bd9b4e019ULL + 1).next();
        r.state_ = Rng(r.state_).next() ^ Rng(b + 0x2545f4914f6cdd1dULL).next();
        return r;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Inverse of normal_cdf by bisection; p in (0, 1).
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ValidationError("normal_quantile: p outside (0, 1)");
    double lo = -40.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (normal_cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

struct SynthConfig {
    std::uint32_t num_layers = 6;   // L, including layer 0
    std::uint32_t hidden_dim = 32;  // D
    std::uint32_t true_rank = 16;   // K_true
    std::uint64_t n_per_class = 2000;
    std::uint64_t seed = 0;
    std::vector<double> noise_std{0.1};  // one value per layer 1..L-1, or one for all
    double msp_informativeness = 0.5;    // 0 = independent of the label
    double msp_offset = 1.0;             // mean logit of the msp construction
    double max_gain = 0.6;               // largest singular value of each W
    double min_gain = 0.2;
    double offset_scale = 0.1;           // std of the shared per-layer offset c^l
    double bias_scale = 0.0;             // norm of an extra class shift c_cor - c_incor
    double min_class_gap = 0.5;          // required ||W_cor - W_incor||_2 per layer
    bool identical_classes = false;      // null configuration
    std::uint64_t id_offset = 0;         // first example id
    AggregationMode aggregation = AggregationMode::AnswerOnly;

    double noise(std::size_t layer) const { return noise_std.size() == 1 ? noise_std[0] : noise_std.at(layer - 1); }

    void validate() const {
        if (num_layers < 2) throw ValidationError("synth: need L >= 2");
        if (hidden_dim < 1) throw ValidationError("synth: need D >= 1");
        if (true_rank < 1 || true_rank > hidden_dim) throw ValidationError("synth: need 1 <= K_true <= D");
        if (n_per_class < 1) throw ValidationError("synth: need n >= 1 per class");
        if (noise_std.size() != 1 && noise_std.size() != num_layers - 1)
            throw ValidationError("synth: noise_std needs 1 or L-1 entries");
        for (double s : noise_std)
            if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("synth: noise_std must be > 0");
        if (!(msp_informativeness >= 0.0 && msp_informativeness <= 1.0))
            throw ValidationError("synth: msp_informativeness outside [0, 1]");
        if (!(min_gain >= 0.0 && max_gain >= min_gain)) throw ValidationError("synth: bad gain range");
        if (!(bias_scale >= 0.0)) throw ValidationError("synth: bias_scale must be >= 0");
        if (!(offset_scale >= 0.0)) throw ValidationError("synth: offset_scale must be >= 0");
    }
};

// Strong class-distinct dynamics at the benchmark size.
inline SynthConfig signal_preset() { return SynthConfig{}; }

// Same dynamics and biases for both classes, msp independent of the label.
inline SynthConfig null_preset() {
    SynthConfig c;
    c.identical_classes = true;
    c.msp_informativeness = 0.0;
    c.min_class_gap = 0.0;
    return c;
}

struct GroundTruth {
    SynthConfig config;
    // [u][l - 1]
    std::array<std::vector<Eigen::MatrixXd>, 2> transition;
    std::array<std::vector<Eigen::VectorXd>, 2> bias;
    double msp_shift = 0.0;  // logit gap between the classes

    double class_gap(std::size_t layer) const {
        const Eigen::MatrixXd d = transition[1][layer - 1] - transition[0][layer - 1];
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(d);
        return svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
    }
};

struct SynthDataset {
    DatasetHeader header;
    std::vector<ActivationRecord> records;
    GroundTruth truth;
};

namespace detail {

inline Eigen::MatrixXd random_orthonormal(Rng& rng, Eigen::Index d, Eigen::Index k) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(rng.normal_matrix(d, k));
    return qr.householderQ() * Eigen::MatrixXd::Identity(d, k);
}

inline Eigen::MatrixXd low_rank_map(Rng& rng, const SynthConfig& c) {
    const auto d = static_cast<Eigen::Index>(c.hidden_dim);
    const auto k = static_cast<Eigen::Index>(c.true_rank);
    const Eigen::MatrixXd u = random_orthonormal(rng, d, k);
    const Eigen::MatrixXd v = random_orthonormal(rng, d, k);
    Eigen::VectorXd s(k);
    for (Eigen::Index i = 0; i < k; ++i)
        s[i] = k == 1 ? c.max_gain : c.max_gain - (c.max_gain - c.min_gain) * static_cast<double>(i) / static_cast<double>(k - 1);
    return u * s.asDiagonal() * v.transpose();
}

} // namespace detail

// Transition maps and biases; depends only on the seed and the shape fields.
inline GroundTruth make_ground_truth(const SynthConfig& c) {
    c.validate();
    GroundTruth t;
    t.config = c;
    const auto d = static_cast<Eigen::Index>(c.hidden_dim);
    for (std::size_t l = 1; l < c.num_layers; ++l) {
        // redraw until the class gap requirement holds
        for (std::uint64_t attempt = 0;; ++attempt) {
            Rng rng = Rng::derive(c.seed, 1000 + l, attempt);
            Eigen::MatrixXd w_cor = detail::low_rank_map(rng, c);
            Eigen::MatrixXd w_incor = c.identical_classes ? w_cor : detail::low_rank_map(rng, c);
            Eigen::VectorXd dir = rng.normal_matrix(d, 1);
            dir /= dir.norm();
            Eigen::VectorXd base = c.offset_scale * rng.normal_matrix(d, 1);
            const Eigen::VectorXd half = c.identical_classes ? Eigen::VectorXd::Zero(d) : Eigen::VectorXd(0.5 * c.bias_scale * dir);
            const Eigen::MatrixXd diff = w_cor - w_incor;
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(diff);
            if (svd.singularValues()[0] >= c.min_class_gap) {
                t.transition[0].push_back(w_incor);
                t.transition[1].push_back(w_cor);
                t.bias[0].push_back(base - half);
                t.bias[1].push_back(base + half);
                break;
            }
            if (attempt == 64) throw ValidationError("synth: cannot reach class gap " + std::to_string(c.min_class_gap));
        }
    }
    t.msp_shift = std::numbers::sqrt2 * normal_quantile(0.5 + 0.45 * c.msp_informativeness);
    return t;
}

// AUROC of the msp construction implied by the shift: Phi(shift / sqrt(2)).
inline double expected_msp_auroc(double msp_shift) { return normal_cdf(msp_shift / std::numbers::sqrt2); }

// One record from its own substream keyed by (seed, id), so any subset of
// ids can be generated independently.
inline ActivationRecord generate_record(const GroundTruth& t, std::uint64_t id, std::uint8_t label) {
    const SynthConfig& c = t.config;
    const auto d = static_cast<Eigen::Index>(c.hidden_dim);
    Rng rng = Rng::derive(c.seed, 7, id);
    ActivationRecord r;
    r.example_id = id;
    r.label = label;
    r.hidden.resize(static_cast<Eigen::Index>(c.num_layers), d);
    Eigen::VectorXd h = rng.normal_matrix(d, 1);
    r.hidden.row(0) = h.cast<float>().transpose();
    for (std::size_t l = 1; l < c.num_layers; ++l) {
        const double s = c.noise(l);
        Eigen::VectorXd eps = rng.normal_matrix(d, 1) * s;
        // the stored layer l-1 is the float-rounded value, so the linear
        // model holds exactly for the values a reader sees
        const Eigen::VectorXd prev = r.hidden.row(static_cast<Eigen::Index>(l) - 1).cast<double>().transpose();
        h = prev + t.transition[label][l - 1] * prev + t.bias[label][l - 1] + eps;
        r.hidden.row(static_cast<Eigen::Index>(l)) = h.cast<float>().transpose();
    }
    const double logit = c.msp_offset + 0.5 * t.msp_shift * (label ? 1.0 : -1.0) + rng.normal();
    // four-choice style range [0.25, 1]
    const double p = 0.25 + 0.75 / (1.0 + std::exp(-logit));
    r.msp = std::clamp(static_cast<float>(p), 0.25f, 1.0f);
    return r;
}

// n_per_class examples of each class; ids alternate incorrect / correct.
inline SynthDataset generate(const SynthConfig& c) {
    SynthDataset out;
    out.truth = make_ground_truth(c);
    out.header.num_layers = c.num_layers;
    out.header.hidden_dim = c.hidden_dim;
    out.header.num_records = 2 * c.n_per_class;
    out.header.aggregation = c.aggregation;
    out.records.reserve(2 * c.n_per_class);
    for (std::uint64_t i = 0; i < 2 * c.n_per_class; ++i)
        out.records.push_back(generate_record(out.truth, c.id_offset + i, static_cast<std::uint8_t>(i % 2)));
    return out;
}

// ---- ground-truth sidecar ----

namespace detail {

inline nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXd json_matrix(const nlohmann::json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != cols)
            throw FormatError("sidecar: ragged matrix");
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
    }
    return m;
}

} // namespace detail

inline nlohmann::json config_json(const SynthConfig& c) {
    return {{"num_layers", c.num_layers},
            {"hidden_dim", c.hidden_dim},
            {"true_rank", c.true_rank},
            {"n_per_class", c.n_per_class},
            {"seed", c.seed},
            {"noise_std", c.noise_std},
            {"msp_informativeness", c.msp_informativeness},
            {"msp_offset", c.msp_offset},
            {"max_gain", c.max_gain},
            {"min_gain", c.min_gain},
            {"offset_scale", c.offset_scale},
            {"bias_scale", c.bias_scale},
            {"min_class_gap", c.min_class_gap},
            {"identical_classes", c.identical_classes},
            {"id_offset", c.id_offset},
            {"aggregation", static_cast<int>(c.aggregation)}};
}

// Fields missing from `j` keep the values already in `c`.
inline SynthConfig config_from_json(const nlohmann::json& j, SynthConfig c = {}) {
    if (!j.is_object()) throw ValidationError("synth config must be a JSON object");
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    try {
        get("num_layers", c.num_layers);
        get("hidden_dim", c.hidden_dim);
        get("true_rank", c.true_rank);
        get("n_per_class", c.n_per_class);
        get("seed", c.seed);
        if (j.contains("noise_std")) {
            if (j["noise_std"].is_array())
                c.noise_std = j["noise_std"].get<std::vector<double>>();
            else
                c.noise_std = {j["noise_std"].get<double>()};
        }
        get("msp_informativeness", c.msp_informativeness);
        get("msp_offset", c.msp_offset);
        get("max_gain", c.max_gain);
        get("min_gain", c.min_gain);
        get("offset_scale", c.offset_scale);
        get("bias_scale", c.bias_scale);
        get("min_class_gap", c.min_class_gap);
        get("identical_classes", c.identical_classes);
        get("id_offset", c.id_offset);
        if (j.contains("aggregation")) {
            const int a = j["aggregation"].get<int>();
            if (a < 0 || a > 1) throw ValidationError("synth config: aggregation must be 0 or 1");
            c.aggregation = static_cast<AggregationMode>(a);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

inline nlohmann::json truth_json(const GroundTruth& t) {
    nlohmann::json j;
    j["config"] = config_json(t.config);
    j["msp_shift"] = t.msp_shift;
    for (int u = 0; u < 2; ++u) {
        const std::string key = u ? "cor" : "incor";
        nlohmann::json layers = nlohmann::json::array();
        for (std::size_t l = 0; l < t.transition[u].size(); ++l) {
            const Eigen::VectorXd& b = t.bias[u][l];
            layers.push_back({{"layer", l + 1},
                              {"transition", detail::matrix_json(t.transition[u][l])},
                              {"bias", std::vector<double>(b.data(), b.data() + b.size())}});
        }
        j[key] = std::move(layers);
    }
    return j;
}

inline GroundTruth truth_from_json(const nlohmann::json& j) {
    GroundTruth t;
    try {
        t.config = config_from_json(j.at("config"));
        t.msp_shift = j.at("msp_shift").get<double>();
        for (int u = 0; u < 2; ++u) {
            for (const auto& layer : j.at(u ? "cor" : "incor")) {
                t.transition[u].push_back(detail::json_matrix(layer.at("transition")));
                const auto b = layer.at("bias").get<std::vector<double>>();
                t.bias[u].push_back(Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size())));
            }
            if (t.transition[u].size() != t.config.num_layers - 1) throw FormatError("sidecar: wrong layer count");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("sidecar: ") + e.what());
    }
    return t;
}

inline void write_truth_file(const GroundTruth& t, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw RuntimeError("cannot open " + path + " for writing");
    os << truth_json(t).dump(1) << '\n';
}

inline GroundTruth read_truth_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open sidecar " + path);
    try {
        return truth_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("sidecar: ") + e.what());
    }
}

// ---- dense posterior oracle ----

struct OracleReport {
    std::size_t rows = 0;
    double mean_deviation = 0.0;       // max |mu_dense - mu_fit|
    double cov_deviation = 0.0;        // max |Sigma_dense - Sigma_fit|
    double intercept_deviation = 0.0;  // |b_dense - b_fit|
    double truth_relative_error = 0.0; // ||mu_fit - B^T w_true|| / ||B^T w_true||

    double max_deviation() const { return std::max({mean_deviation, cov_deviation, intercept_deviation}); }
};

// Rebuilds the raw (design, target) rows of one (layer, neuron, class),
// projects and centers them explicitly, and evaluates the conjugate
// posterior with a dense inverse at the fitted precisions.
inline OracleReport oracle_posterior_check(const DatasetHeader& header, std::span<const ActivationRecord> records,
                                           const GroundTruth& truth, const LayerModels& fitted, std::size_t layer,
                                           std::size_t neuron, int u) {
    if (layer < 1 || layer >= header.num_layers) throw ValidationError("oracle: layer out of range");
    if (neuron >= header.hidden_dim) throw ValidationError("oracle: neuron out of range");
    if (truth.config.num_layers != header.num_layers || truth.config.hidden_dim != header.hidden_dim)
        throw ValidationError("oracle: ground truth shape does not match the dataset");
    const auto& cm = fitted.classes[u];
    if (cm.ridge.size() != header.hidden_dim) throw ValidationError("oracle: ridge family not fitted");
    const BayesianRidgeModel& m = cm.ridge[neuron];
    const TruncatedBasis& basis = fitted.basis;
    const Eigen::Index k = basis.basis.cols();

    std::vector<Eigen::VectorXd> zs;
    std::vector<double> ys;
    for (const auto& r : records) {
        if (r.label != u) continue;
        zs.push_back(basis.project(design_vector(r, layer)));
        ys.push_back(centered_target(r, layer)[static_cast<Eigen::Index>(neuron)]);
    }
    const auto n = static_cast<Eigen::Index>(zs.size());
    if (n < k + 2) throw ValidationError("oracle: too few rows");
    Eigen::MatrixXd z(n, k);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        z.row(i) = zs[static_cast<std::size_t>(i)].transpose();
        y[i] = ys[static_cast<std::size_t>(i)];
    }
    const Eigen::RowVectorXd zbar = z.colwise().mean();
    const double ybar = y.mean();
    const Eigen::MatrixXd zc = z.rowwise() - zbar;
    const Eigen::VectorXd yc = y.array() - ybar;

    Eigen::MatrixXd precision = m.beta * zc.transpose() * zc;
    precision.diagonal().array() += m.lambda;
    const Eigen::MatrixXd sigma = Eigen::FullPivLU<Eigen::MatrixXd>(precision).inverse();
    const Eigen::VectorXd mu = m.beta * sigma * zc.transpose() * yc;
    const double b = ybar - zbar.dot(mu);

    OracleReport rep;
    rep.rows = static_cast<std::size_t>(n);
    rep.mean_deviation = (mu - m.mu_w).cwiseAbs().maxCoeff();
    rep.cov_deviation = (sigma - m.sigma_w).cwiseAbs().maxCoeff();
    rep.intercept_deviation = std::abs(b - m.b);
    const Eigen::VectorXd w_true = truth.transition[u][layer - 1].row(static_cast<Eigen::Index>(neuron)).transpose();
    const Eigen::VectorXd target = basis.basis.transpose() * w_true;
    rep.truth_relative_error = target.norm() > 0.0 ? (m.mu_w - target).norm() / target.norm() : (m.mu_w).norm();
    return rep;
}

} // namespace bll::synth
