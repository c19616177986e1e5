#pragma once

// Batch pipeline: stats -> fit -> features -> nested CV -> report, with
// cached intermediates in the output directory.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bll/activation_store.hpp"
#include "bll/aggregator.hpp"
#include "bll/features.hpp"
#include "bll/model_bundle.hpp"
#include "bll/stats_cache.hpp"
#include "bll/synth.hpp"

namespace bll {

inline FeatureFamily parse_family(const std::string& s) {
    if (s == "density") return FeatureFamily::Density;
    if (s == "regression") return FeatureFamily::Regression;
    if (s == "ridge") return FeatureFamily::Ridge;
    if (s == "raw") return FeatureFamily::RawNeurons;
    throw ValidationError("unknown family '" + s + "' (expected density, regression, ridge or raw)");
}

inline FeatureKind parse_kind(const std::string& s) {
    if (s == "cor") return FeatureKind::CorNLL;
    if (s == "incor") return FeatureKind::IncorNLL;
    if (s == "ratio") return FeatureKind::Ratio;
    if (s == "raw") return FeatureKind::Raw;
    throw ValidationError("unknown kind '" + s + "' (expected cor, incor, ratio or raw)");
}

inline const char* family_key(FeatureFamily f) {
    switch (f) {
    case FeatureFamily::Density: return "density";
    case FeatureFamily::Regression: return "regression";
    case FeatureFamily::Ridge: return "ridge";
    case FeatureFamily::RawNeurons: return "raw";
    }
    return "?";
}

inline const char* kind_key(FeatureKind k) {
    switch (k) {
    case FeatureKind::CorNLL: return "cor";
    case FeatureKind::IncorNLL: return "incor";
    case FeatureKind::Ratio: return "ratio";
    case FeatureKind::Raw: return "raw";
    }
    return "?";
}

struct PipelineConfig {
    std::string train;  // .blla used for stats and fitting
    std::string eval;   // optional .blla scored by nested CV; defaults to train
    std::string out = "out";
    std::vector<FeatureFamily> families{FeatureFamily::Ridge, FeatureFamily::RawNeurons};
    std::vector<FeatureKind> kinds{FeatureKind::Ratio, FeatureKind::CorNLL, FeatureKind::IncorNLL};
    std::uint32_t rank = 16;  // K
    NestedCvConfig cv;
    RidgeConfig ridge;
    double nonconvergence_warn = 0.01;

    const std::string& eval_path() const { return eval.empty() ? train : eval; }
    std::filesystem::path out_path(const std::string& name) const { return std::filesystem::path(out) / name; }

    // (family, kind) pairs to evaluate; raw neurons ignore the kind list.
    std::vector<std::pair<FeatureFamily, FeatureKind>> methods() const {
        std::vector<std::pair<FeatureFamily, FeatureKind>> m;
        for (auto f : families) {
            if (f == FeatureFamily::RawNeurons) {
                m.emplace_back(f, FeatureKind::Raw);
                continue;
            }
            for (auto k : kinds)
                if (k != FeatureKind::Raw) m.emplace_back(f, k);
        }
        return m;
    }

    std::vector<ModelFamily> model_families() const {
        std::vector<ModelFamily> m;
        for (auto f : families)
            if (f != FeatureFamily::RawNeurons) m.push_back(model_family(f));
        return m;
    }

    void validate() const {
        if (train.empty()) throw ValidationError("no training dataset configured (use --data or \"train\")");
        if (!std::filesystem::exists(train)) throw ValidationError("dataset not found: " + train);
        if (!eval.empty() && !std::filesystem::exists(eval)) throw ValidationError("dataset not found: " + eval);
        if (families.empty()) throw ValidationError("no feature family requested");
        if (rank < 1) throw ValidationError("K must be >= 1");
        if (!(nonconvergence_warn >= 0.0 && nonconvergence_warn <= 1.0))
            throw ValidationError("nonconvergence_warn outside [0, 1]");
        bool needs_kind = false;
        for (auto f : families) needs_kind |= f != FeatureFamily::RawNeurons;
        if (needs_kind) {
            bool any = false;
            for (auto k : kinds) any |= k != FeatureKind::Raw;
            if (!any) throw ValidationError("families other than raw need a kind among cor, incor, ratio");
        }
        cv.validate();
    }
};

// Keys absent from `j` keep their current values.
inline void apply_config_json(PipelineConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    try {
        if (j.contains("train")) c.train = j["train"].get<std::string>();
        if (j.contains("eval")) c.eval = j["eval"].get<std::string>();
        if (j.contains("out")) c.out = j["out"].get<std::string>();
        if (j.contains("families")) {
            c.families.clear();
            for (const auto& f : j["families"]) c.families.push_back(parse_family(f.get<std::string>()));
        }
        if (j.contains("kinds")) {
            c.kinds.clear();
            for (const auto& k : j["kinds"]) c.kinds.push_back(parse_kind(k.get<std::string>()));
        }
        if (j.contains("k")) c.rank = j["k"].get<std::uint32_t>();
        if (j.contains("select_k")) c.cv.select_k = j["select_k"].get<std::size_t>();
        if (j.contains("workers")) c.cv.workers = j["workers"].get<std::size_t>();
        if (j.contains("nonconvergence_warn")) c.nonconvergence_warn = j["nonconvergence_warn"].get<double>();
        if (j.contains("cv")) {
            const auto& cv = j["cv"];
            if (cv.contains("outer")) c.cv.outer = cv["outer"].get<std::uint32_t>();
            if (cv.contains("inner")) c.cv.inner = cv["inner"].get<std::uint32_t>();
            if (cv.contains("l1_ratios")) c.cv.l1_ratios = cv["l1_ratios"].get<std::vector<double>>();
            if (cv.contains("Cs")) c.cv.Cs = cv["Cs"].get<std::vector<double>>();
            if (cv.contains("seed")) c.cv.seed = cv["seed"].get<std::uint64_t>();
            if (cv.contains("selection_scope")) {
                const auto s = cv["selection_scope"].get<std::string>();
                if (s == "outer")
                    c.cv.selection_scope = SelectionScope::Outer;
                else if (s == "inner")
                    c.cv.selection_scope = SelectionScope::Inner;
                else
                    throw ValidationError("selection_scope must be \"outer\" or \"inner\"");
            }
        }
        if (j.contains("ridge")) {
            const auto& r = j["ridge"];
            if (r.contains("tol")) c.ridge.tol = r["tol"].get<double>();
            if (r.contains("max_iter")) c.ridge.max_iter = r["max_iter"].get<std::uint32_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open config " + path);
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("config " + path + ": " + e.what());
    }
}

namespace detail {

inline void ensure_out_dir(const PipelineConfig& c) {
    std::error_code ec;
    std::filesystem::create_directories(c.out, ec);
    if (ec) throw RuntimeError("cannot create output directory " + c.out + ": " + ec.message());
}

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot open " + p.string() + " for writing");
    os << text;
    if (!os) throw RuntimeError("write failed: " + p.string());
}

} // namespace detail

inline StatsCache cmd_stats(const PipelineConfig& c, std::ostream& log) {
    if (c.train.empty()) throw ValidationError("no training dataset configured");
    detail::ensure_out_dir(c);
    StatsCache cache = collect_stats_file(c.train);
    save_stats_file(cache, c.out_path("stats.bin").string());
    const auto& h = cache.dataset;
    log << "dataset " << c.train << ": " << h.num_records << " records, L=" << h.num_layers << ", D=" << h.hidden_dim
        << ", aggregation " << to_string(h.aggregation) << "\n";
    log << "classes: correct " << cache.class_count(1) << ", incorrect " << cache.class_count(0) << "\n";
    log << "stat blocks: " << 2 * cache.layers.size() << " -> " << c.out_path("stats.bin").string() << "\n";
    return cache;
}

inline StatsCache load_fresh_stats(const PipelineConfig& c) {
    StatsCache cache = load_stats_file(c.out_path("stats.bin").string());
    if (cache.input_hash != hash_file(c.train))
        throw ValidationError("stats cache does not match " + c.train + " (run `stats` again)");
    return cache;
}

// K is clamped to D; returns the bundle and writes models.bin.
inline ModelBundle cmd_fit(const PipelineConfig& c, std::ostream& log, std::ostream& warn) {
    const auto families = c.model_families();
    if (families.empty()) throw ValidationError("fit: no model family requested (raw neurons need no fit)");
    const StatsCache stats = load_fresh_stats(c);
    const std::uint32_t k = std::min(c.rank, stats.dataset.hidden_dim);
    if (k != c.rank) warn << "warning: K=" << c.rank << " exceeds D=" << stats.dataset.hidden_dim << "; using K=" << k << "\n";
    FitReport report;
    ModelBundle bundle = fit_bundle(stats, k, families, c.ridge, c.cv.workers, &report);
    save_bundle_file(bundle, c.out_path("models.bin").string());

    log << "fitted";
    for (auto f : bundle.families) log << " " << to_string(f);
    log << " with K=" << k << " for " << bundle.layers.size() << " layers x " << bundle.hidden_dim << " neurons x 2 classes\n";
    if (bundle.has(ModelFamily::Ridge)) {
        for (const auto& line : report.layers)
            log << "layer " << line.layer << ": evidence iteration converged " << line.ridge_converged[1] << "/"
                << line.ridge_total[1] << " (correct), " << line.ridge_converged[0] << "/" << line.ridge_total[0]
                << " (incorrect)\n";
        const double frac = report.nonconverged_fraction();
        if (frac > c.nonconvergence_warn)
            warn << "warning: " << detail::fmt("%.2f", 100.0 * frac) << "% of ridge fits hit the iteration limit\n";
    }
    return bundle;
}

struct EvaluationResult {
    std::string dataset;
    AggregationMode aggregation = AggregationMode::AnswerOnly;
    std::size_t num_records = 0;
    std::uint32_t rank = 0;
    BaselineReport msp;
    std::vector<CvReport> methods;
    std::vector<std::string> correlation_labels;  // "MSP" first
    Eigen::MatrixXd correlation;
};

inline EvaluationResult evaluate_dataset(const Dataset& ds, const ModelBundle* bundle, const PipelineConfig& c) {
    EvaluationResult res;
    res.aggregation = ds.header.aggregation;
    res.num_records = ds.records.size();
    res.rank = bundle ? bundle->rank : 0;
    std::vector<std::uint8_t> labels;
    std::vector<double> msp;
    for (const auto& r : ds.records) {
        labels.push_back(r.label);
        msp.push_back(static_cast<double>(r.msp));
    }
    res.msp = msp_baseline(msp, labels, c.cv);

    std::vector<std::vector<double>> scores{msp};
    res.correlation_labels.push_back("MSP");
    for (const auto& [family, kind] : c.methods()) {
        const FeatureSpec spec{family, kind, ds.header.aggregation};
        const FeatureMatrix fm = build_features(ds, family == FeatureFamily::RawNeurons ? nullptr : bundle, spec, c.cv.workers);
        res.methods.push_back(nested_cv(fm, labels, msp, c.cv));
        scores.push_back(res.methods.back().oof_scores);
        res.correlation_labels.push_back(res.methods.back().label);
    }
    const auto m = static_cast<Eigen::Index>(scores.size());
    res.correlation.resize(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) {
            try {
                res.correlation(i, j) = score_correlation(scores[static_cast<std::size_t>(i)], scores[static_cast<std::size_t>(j)]);
            } catch (const ValidationError&) {
                res.correlation(i, j) = std::numeric_limits<double>::quiet_NaN();
            }
        }
    return res;
}

inline std::string report_text(const EvaluationResult& r, const NestedCvConfig& cv) {
    std::ostringstream os;
    os << "dataset: " << r.dataset << " (" << r.num_records << " records, aggregation " << to_string(r.aggregation)
       << ")\n";
    if (r.rank) os << "truncation rank K: " << r.rank << "\n";
    os << "nested CV: " << cv.outer << " outer x " << cv.inner << " inner folds, seed " << cv.seed << ", ANOVA top-"
       << cv.select_k << " (" << (cv.selection_scope == SelectionScope::Outer ? "outer" : "inner") << " train)\n";
    os << "significance (*): one-sided one-sample t-test of fold AUROCs against the MSP AUROC, df=" << cv.outer - 1;
    if (cv.outer == 5) os << ", t_crit=" << detail::fmt("%.3f", kTCritical4);
    os << "\n\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-32s %-18s %-18s %-18s %-18s\n", "method", "AUROC", "AUROC +MSP", "ECE",
                  "ECE (isotonic)");
    os << line;
    const FoldSummary msp_cal = fold_summary(r.msp.ece_calibrated);
    std::snprintf(line, sizeof line, "%-32s %-18s %-18s %-18s %-18s\n", "MSP", detail::fmt("%.4f", r.msp.auc).c_str(), "-",
                  detail::fmt("%.4f", r.msp.ece).c_str(),
                  (detail::fmt("%.4f", msp_cal.mean) + " +- " + detail::fmt("%.4f", msp_cal.std)).c_str());
    os << line;
    auto cell = [](FoldSummary s, bool star) {
        return detail::fmt("%.4f", s.mean) + " +- " + detail::fmt("%.4f", s.std) + (star ? "*" : "");
    };
    for (const auto& m : r.methods) {
        std::snprintf(line, sizeof line, "%-32s %-18s %-18s %-18s %-18s\n", m.label.c_str(),
                      cell(m.auc(), m.significant).c_str(), cell(m.auc_combined(), m.significant_combined).c_str(),
                      cell(m.ece(), false).c_str(), cell(m.ece_cal(), false).c_str());
        os << line;
    }
    os << "\nchosen (l1_ratio, C) per fold:\n";
    for (const auto& m : r.methods) {
        os << "  " << m.label << ":";
        for (const auto& [rho, c] : m.chosen_params) os << " (" << detail::fmt("%g", rho) << ", " << detail::fmt("%g", c) << ")";
        os << "\n";
    }
    os << "\nscore correlation (Pearson, out-of-fold scores; MSP raw):\n";
    for (std::size_t i = 0; i < r.correlation_labels.size(); ++i) {
        std::snprintf(line, sizeof line, "  [%zu] %s\n", i, r.correlation_labels[i].c_str());
        os << line;
    }
    os << "      ";
    for (std::size_t j = 0; j < r.correlation_labels.size(); ++j) {
        std::snprintf(line, sizeof line, " %7s", ("[" + std::to_string(j) + "]").c_str());
        os << line;
    }
    os << "\n";
    for (Eigen::Index i = 0; i < r.correlation.rows(); ++i) {
        std::snprintf(line, sizeof line, "  %-4s", ("[" + std::to_string(i) + "]").c_str());
        os << line;
        for (Eigen::Index j = 0; j < r.correlation.cols(); ++j) os << " " << detail::fmt("%7.3f", r.correlation(i, j));
        os << "\n";
    }
    return os.str();
}

inline std::string table_tsv(const EvaluationResult& r) {
    std::ostringstream os;
    os << "method\tauc_mean\tauc_std\tsignificant\tauc_combined_mean\tauc_combined_std\tsignificant_combined\t"
          "ece_mean\tece_std\tece_calibrated_mean\tece_calibrated_std\n";
    const FoldSummary mc = fold_summary(r.msp.ece_calibrated);
    os << "MSP\t" << detail::fmt("%.6f", r.msp.auc) << "\t\t\t\t\t\t" << detail::fmt("%.6f", r.msp.ece) << "\t\t"
       << detail::fmt("%.6f", mc.mean) << "\t" << detail::fmt("%.6f", mc.std) << "\n";
    for (const auto& m : r.methods) {
        const auto a = m.auc(), ac = m.auc_combined(), e = m.ece(), ec = m.ece_cal();
        os << m.label << "\t" << detail::fmt("%.6f", a.mean) << "\t" << detail::fmt("%.6f", a.std) << "\t"
           << (m.significant ? 1 : 0) << "\t" << detail::fmt("%.6f", ac.mean) << "\t" << detail::fmt("%.6f", ac.std)
           << "\t" << (m.significant_combined ? 1 : 0) << "\t" << detail::fmt("%.6f", e.mean) << "\t"
           << detail::fmt("%.6f", e.std) << "\t" << detail::fmt("%.6f", ec.mean) << "\t" << detail::fmt("%.6f", ec.std)
           << "\n";
    }
    return os.str();
}

inline std::string correlation_tsv(const EvaluationResult& r) {
    std::ostringstream os;
    os << "method";
    for (const auto& l : r.correlation_labels) os << "\t" << l;
    os << "\n";
    for (Eigen::Index i = 0; i < r.correlation.rows(); ++i) {
        os << r.correlation_labels[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < r.correlation.cols(); ++j) os << "\t" << detail::fmt("%.6f", r.correlation(i, j));
        os << "\n";
    }
    return os.str();
}

// Writes report.txt, table.tsv and correlation.tsv into the output directory.
inline EvaluationResult cmd_evaluate(const PipelineConfig& c, std::ostream& log) {
    c.validate();
    detail::ensure_out_dir(c);
    std::unique_ptr<ModelBundle> bundle;
    if (!c.model_families().empty()) {
        bundle = std::make_unique<ModelBundle>(load_bundle_file(c.out_path("models.bin").string()));
        if (bundle->stats_hash != hash_file(c.train))
            throw ValidationError("model bundle was fit on a different dataset than " + c.train + " (run `stats` and `fit` again)");
    }
    const Dataset ds = read_dataset_file(c.eval_path());
    EvaluationResult res = evaluate_dataset(ds, bundle.get(), c);
    res.dataset = std::filesystem::path(c.eval_path()).filename().string();
    const std::string text = report_text(res, c.cv);
    detail::write_text_file(c.out_path("report.txt"), text);
    detail::write_text_file(c.out_path("table.tsv"), table_tsv(res));
    detail::write_text_file(c.out_path("correlation.tsv"), correlation_tsv(res));
    log << text;
    return res;
}

inline void cmd_inspect(const std::string& path, std::ostream& log, std::size_t limit = 5) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open dataset " + path);
    DatasetReader reader(is);
    const DatasetHeader& h = reader.header();
    log << path << ": .blla v" << h.version << ", L=" << h.num_layers << ", D=" << h.hidden_dim
        << ", N=" << h.num_records << ", aggregation " << to_string(h.aggregation) << ", "
        << dataset_bytes(h) << " bytes\n";
    ActivationRecord r;
    std::uint64_t count = 0, correct = 0;
    double msp_sum = 0.0;
    while (reader.next(r)) {
        if (count < limit) {
            log << "  record " << count << ": id=" << r.example_id << " label=" << int(r.label)
                << " msp=" << detail::fmt("%.4f", r.msp) << " |h| per layer:";
            for (Eigen::Index l = 0; l < r.hidden.rows(); ++l) log << " " << detail::fmt("%.3f", r.hidden.row(l).cast<double>().norm());
            log << "\n";
        }
        ++count;
        correct += r.label;
        msp_sum += r.msp;
    }
    if (count > 0)
        log << "accuracy (mean label): " << detail::fmt("%.4f", static_cast<double>(correct) / static_cast<double>(count))
            << ", mean msp: " << detail::fmt("%.4f", msp_sum / static_cast<double>(count)) << "\n";
}

// train.blla, eval.blla (disjoint ids, same dynamics) and truth.json.
inline void cmd_synth(const synth::SynthConfig& cfg, const std::string& out, std::ostream& log) {
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    if (ec) throw RuntimeError("cannot create output directory " + out + ": " + ec.message());
    synth::SynthConfig train = cfg;
    train.id_offset = 0;
    synth::SynthConfig eval = cfg;
    eval.id_offset = 2 * cfg.n_per_class;
    const auto dir = std::filesystem::path(out);
    const auto tr = synth::generate(train);
    write_dataset_file((dir / "train.blla").string(), tr.header, tr.records);
    const auto ev = synth::generate(eval);
    write_dataset_file((dir / "eval.blla").string(), ev.header, ev.records);
    synth::write_truth_file(tr.truth, (dir / "truth.json").string());
    log << "wrote " << (dir / "train.blla").string() << ", " << (dir / "eval.blla").string() << " ("
        << tr.records.size() << " records each, L=" << cfg.num_layers << ", D=" << cfg.hidden_dim << ") and "
        << (dir / "truth.json").string() << "\n";
}

} // namespace bll
