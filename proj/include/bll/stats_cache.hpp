#pragma once

// Single pass over a dataset collecting LayerClassStats for every
// (layer >= 1, class) pair, plus the on-disk "BLLS" cache container.

#include <array>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bll/activation_store.hpp"
#include "bll/binary_io.hpp"
#include "bll/suffstats.hpp"

namespace bll {

inline constexpr char kStatsMagic[4] = {'B', 'L', 'L', 'S'};
inline constexpr std::uint32_t kStatsVersion = 1;

struct StatsCache {
    DatasetHeader dataset;
    std::uint64_t input_hash = 0;
    // layers[l - 1][u] holds the statistics of layer l for class u
    std::vector<std::array<LayerClassStats, 2>> layers;

    std::uint64_t class_count(int u) const { return layers.empty() ? 0 : layers.front()[u].n; }
    bool operator==(const StatsCache&) const = default;
};

inline const char* class_name(int u) { return u == 1 ? "correct (u=1)" : "incorrect (u=0)"; }

// Incremental collector; records may arrive in any grouping.
class StatsCollector {
public:
    explicit StatsCollector(const DatasetHeader& h, std::size_t batch = 256) : batch_(batch) {
        validate_header(h);
        cache_.dataset = h;
        cache_.dataset.num_records = 0;
        const auto d = static_cast<Eigen::Index>(h.hidden_dim);
        cache_.layers.assign(h.num_layers - 1, {LayerClassStats(d, d), LayerClassStats(d, d)});
        for (auto& p : pending_) p.reserve(batch_);
    }

    void add(const ActivationRecord& r) {
        validate_record(r, cache_.dataset, cache_.dataset.num_records);
        auto& p = pending_[r.label];
        p.push_back(r.hidden.cast<double>());
        ++cache_.dataset.num_records;
        if (p.size() == batch_) flush(r.label);
    }

    StatsCache finish(std::uint64_t input_hash) {
        flush(0);
        flush(1);
        cache_.input_hash = input_hash;
        return cache_;
    }

private:
    void flush(int u) {
        auto& p = pending_[u];
        if (p.empty()) return;
        const auto rows = static_cast<Eigen::Index>(p.size());
        const auto d = static_cast<Eigen::Index>(cache_.dataset.hidden_dim);
        Eigen::MatrixXd x(rows, d), y(rows, d);
        for (std::size_t l = 1; l < cache_.dataset.num_layers; ++l) {
            for (Eigen::Index r = 0; r < rows; ++r) {
                const auto& h = p[static_cast<std::size_t>(r)];
                x.row(r) = h.row(static_cast<Eigen::Index>(l) - 1);
                y.row(r) = h.row(static_cast<Eigen::Index>(l)) - h.row(static_cast<Eigen::Index>(l) - 1);
            }
            accumulate_batch(cache_.layers[l - 1][u], x, y);
        }
        p.clear();
    }

    std::size_t batch_;
    StatsCache cache_;
    std::array<std::vector<Eigen::MatrixXd>, 2> pending_;
};

inline std::uint64_t hash_stream(std::istream& is) {
    io::Fnv1a h;
    std::vector<char> buf(1 << 16);
    while (is) {
        is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto got = static_cast<std::size_t>(is.gcount());
        h.update({reinterpret_cast<const std::uint8_t*>(buf.data()), got});
    }
    return h.digest();
}

inline std::uint64_t hash_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open " + path);
    return hash_stream(is);
}

inline std::uint64_t hash_dataset(const Dataset& ds) {
    std::ostringstream os(std::ios::binary);
    write_dataset(ds.header, ds.records, os);
    io::Fnv1a h;
    h.update(os.view());
    return h.digest();
}

inline void require_both_classes(const StatsCache& c) {
    for (int u = 0; u < 2; ++u)
        if (c.class_count(u) == 0)
            throw ValidationError(std::string("dataset has no ") + class_name(u) + " examples");
}

inline StatsCache collect_stats(const Dataset& ds) {
    StatsCollector col(ds.header);
    for (const auto& r : ds.records) col.add(r);
    auto cache = col.finish(hash_dataset(ds));
    require_both_classes(cache);
    return cache;
}

inline StatsCache collect_stats_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open dataset " + path);
    DatasetReader reader(is);
    StatsCollector col(reader.header());
    ActivationRecord r;
    while (reader.next(r)) col.add(r);
    auto cache = col.finish(hash_file(path));
    require_both_classes(cache);
    return cache;
}

namespace detail {

inline void write_stats_block(io::LeWriter& w, const LayerClassStats& s) {
    w.u64(s.n);
    w.vec(s.sum_x);
    w.mat(s.gram);
    w.mat(s.cross);
    w.vec(s.sum_y);
    w.vec(s.sum_y2);
}

inline LayerClassStats read_stats_block(io::LeReader& r) {
    LayerClassStats s;
    s.n = r.u64("stats n");
    s.sum_x = r.vec("sum_x");
    s.gram = r.mat("gram");
    s.cross = r.mat("cross");
    s.sum_y = r.vec("sum_y");
    s.sum_y2 = r.vec("sum_y2");
    return s;
}

} // namespace detail

inline void save_stats(const StatsCache& c, std::ostream& os) {
    io::LeWriter w(os);
    w.bytes(std::string_view(kStatsMagic, 4));
    w.u32(kStatsVersion);
    w.u32(c.dataset.num_layers);
    w.u32(c.dataset.hidden_dim);
    w.u64(c.dataset.num_records);
    w.u8(static_cast<std::uint8_t>(c.dataset.aggregation));
    w.u64(c.input_hash);
    for (const auto& layer : c.layers)
        for (const auto& s : layer) detail::write_stats_block(w, s);
}

inline StatsCache load_stats(std::istream& is) {
    io::LeReader r(is);
    if (r.bytes(4, "stats magic") != std::string_view(kStatsMagic, 4)) throw FormatError("not a BLLS stats cache");
    if (r.u32("stats version") != kStatsVersion) throw FormatError("unsupported stats cache version");
    StatsCache c;
    c.dataset.num_layers = r.u32("num_layers");
    c.dataset.hidden_dim = r.u32("hidden_dim");
    c.dataset.num_records = r.u64("num_records");
    c.dataset.aggregation = static_cast<AggregationMode>(r.u8("aggregation"));
    validate_header(c.dataset);
    c.input_hash = r.u64("input hash");
    c.layers.resize(c.dataset.num_layers - 1);
    for (auto& layer : c.layers)
        for (auto& s : layer) {
            s = detail::read_stats_block(r);
            if (s.design_dim() != c.dataset.hidden_dim || s.target_dim() != c.dataset.hidden_dim)
                throw FormatError("stats block dimension does not match header");
        }
    return c;
}

inline void save_stats_file(const StatsCache& c, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot open " + path + " for writing");
    save_stats(c, os);
}

inline StatsCache load_stats_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("missing stats cache " + path + " (run `stats` first)");
    return load_stats(is);
}

} // namespace bll
