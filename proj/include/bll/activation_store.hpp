#pragma once

// The "BLLA" v1 activation dump and its in-memory record model.
//
// Layout (all little-endian):
//   header  : magic "BLLA" | version u32 | num_layers u32 | hidden_dim u32
//             | num_records u64 | aggregation u8                 (25 bytes)
//   record  : example_id u64 | label u8 | msp f32
//             | num_layers * hidden_dim f32, layer-major          (13 + 4LD bytes)

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bll/binary_io.hpp"
#include "bll/error.hpp"

namespace bll {

enum class AggregationMode : std::uint8_t { AnswerOnly = 0, QuestionPlusAnswer = 1 };

inline const char* to_string(AggregationMode m) {
    return m == AggregationMode::AnswerOnly ? "A" : "Q+A";
}

using HiddenStates = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr char kDatasetMagic[4] = {'B', 'L', 'L', 'A'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint64_t kDatasetHeaderBytes = 25;

struct DatasetHeader {
    std::uint32_t version = kDatasetVersion;
    std::uint32_t num_layers = 0;  // layer 0 is the embedding output
    std::uint32_t hidden_dim = 0;
    std::uint64_t num_records = 0;
    AggregationMode aggregation = AggregationMode::AnswerOnly;

    bool operator==(const DatasetHeader&) const = default;
};

struct ActivationRecord {
    std::uint64_t example_id = 0;
    std::uint8_t label = 0;  // 1 = the model answered correctly
    float msp = 1.0f;
    HiddenStates hidden;     // num_layers x hidden_dim

    std::size_t num_layers() const { return static_cast<std::size_t>(hidden.rows()); }
    std::size_t hidden_dim() const { return static_cast<std::size_t>(hidden.cols()); }

    // Bit-exact comparison, so -0.0f and 0.0f differ.
    bool operator==(const ActivationRecord& o) const {
        return example_id == o.example_id && label == o.label &&
               std::bit_cast<std::uint32_t>(msp) == std::bit_cast<std::uint32_t>(o.msp) &&
               hidden.rows() == o.hidden.rows() && hidden.cols() == o.hidden.cols() &&
               std::memcmp(hidden.data(), o.hidden.data(),
                           sizeof(float) * static_cast<std::size_t>(hidden.size())) == 0;
    }
};

struct Dataset {
    DatasetHeader header;
    std::vector<ActivationRecord> records;
};

inline constexpr std::uint64_t record_bytes(std::uint64_t num_layers, std::uint64_t hidden_dim) {
    return 13 + 4 * num_layers * hidden_dim;
}

inline constexpr std::uint64_t dataset_bytes(const DatasetHeader& h) {
    return kDatasetHeaderBytes + h.num_records * record_bytes(h.num_layers, h.hidden_dim);
}

inline void validate_header(const DatasetHeader& h) {
    if (h.version != kDatasetVersion)
        throw FormatError("unsupported dataset version " + std::to_string(h.version));
    if (h.num_layers < 2)
        throw FormatError("dataset needs at least 2 stored layers, got " + std::to_string(h.num_layers));
    if (h.hidden_dim < 1) throw FormatError("hidden_dim must be >= 1");
    const auto mode = static_cast<std::uint8_t>(h.aggregation);
    if (mode > 1) throw FormatError("unknown aggregation mode " + std::to_string(mode));
}

// Checks label/msp/shape/finiteness; `index` only labels the error message.
inline void validate_record(const ActivationRecord& r, const DatasetHeader& h, std::uint64_t index) {
    const auto where = " (record " + std::to_string(index) + ")";
    if (r.hidden.rows() != static_cast<Eigen::Index>(h.num_layers) ||
        r.hidden.cols() != static_cast<Eigen::Index>(h.hidden_dim))
        throw ValidationError("hidden state shape " + std::to_string(r.hidden.rows()) + "x" +
                              std::to_string(r.hidden.cols()) + " does not match header " +
                              std::to_string(h.num_layers) + "x" + std::to_string(h.hidden_dim) + where);
    if (r.label > 1) throw ValidationError("label must be 0 or 1" + where);
    if (!(r.msp > 0.0f && r.msp <= 1.0f)) throw ValidationError("msp outside (0, 1]" + where);
    if (!r.hidden.allFinite()) throw ValidationError("non-finite hidden state" + where);
}

inline std::uint64_t write_header(io::LeWriter& w, const DatasetHeader& h) {
    w.bytes(std::string_view(kDatasetMagic, 4));
    w.u32(h.version);
    w.u32(h.num_layers);
    w.u32(h.hidden_dim);
    w.u64(h.num_records);
    w.u8(static_cast<std::uint8_t>(h.aggregation));
    return kDatasetHeaderBytes;
}

inline void write_record(io::LeWriter& w, const ActivationRecord& r) {
    w.u64(r.example_id);
    w.u8(r.label);
    w.f32(r.msp);
    w.f32s({r.hidden.data(), static_cast<std::size_t>(r.hidden.size())});
}

inline std::uint64_t write_dataset(const DatasetHeader& header, std::span<const ActivationRecord> records,
                                   std::ostream& sink) {
    validate_header(header);
    if (header.num_records != records.size())
        throw ValidationError("header declares " + std::to_string(header.num_records) + " records but " +
                              std::to_string(records.size()) + " were given");
    for (std::size_t i = 0; i < records.size(); ++i) validate_record(records[i], header, i);

    io::LeWriter w(sink);
    write_header(w, header);
    for (const auto& r : records) write_record(w, r);
    sink.flush();
    if (!sink) throw RuntimeError("flush failed");
    return w.written();
}

inline std::uint64_t write_dataset_file(const std::string& path, const DatasetHeader& header,
                                        std::span<const ActivationRecord> records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot open " + path + " for writing");
    return write_dataset(header, records, os);
}

// Streaming decoder: the header is parsed in the constructor, records are
// pulled one at a time and validated as they come.
class DatasetReader {
public:
    explicit DatasetReader(std::istream& source) : in_(source) {
        const auto magic = in_.bytes(4, "header magic");
        if (magic != std::string_view(kDatasetMagic, 4)) throw FormatError("bad magic: not a BLLA file");
        header_.version = in_.u32("header version");
        if (header_.version != kDatasetVersion)
            throw FormatError("unsupported dataset version " + std::to_string(header_.version));
        header_.num_layers = in_.u32("header num_layers");
        header_.hidden_dim = in_.u32("header hidden_dim");
        header_.num_records = in_.u64("header num_records");
        header_.aggregation = static_cast<AggregationMode>(in_.u8("header aggregation"));
        validate_header(header_);
    }

    const DatasetHeader& header() const { return header_; }
    std::uint64_t position() const { return next_index_; }

    // False once all declared records were read.
    bool next(ActivationRecord& r) {
        if (next_index_ == header_.num_records) return false;
        const auto idx = next_index_;
        try {
            r.example_id = in_.u64("example_id");
            r.label = in_.u8("label");
            r.msp = in_.f32("msp");
            r.hidden.resize(header_.num_layers, header_.hidden_dim);
            in_.f32s({r.hidden.data(), static_cast<std::size_t>(r.hidden.size())}, "hidden states");
        } catch (const FormatError&) {
            throw FormatError("truncated payload in record " + std::to_string(idx) + " of " +
                              std::to_string(header_.num_records));
        }
        validate_record(r, header_, idx);
        ++next_index_;
        return true;
    }

private:
    io::LeReader in_;
    DatasetHeader header_;
    std::uint64_t next_index_ = 0;
};

inline Dataset read_dataset(std::istream& source) {
    DatasetReader reader(source);
    Dataset ds;
    ds.header = reader.header();
    ds.records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(ds.header.num_records, 1u << 20)));
    ActivationRecord r;
    while (reader.next(r)) ds.records.push_back(r);
    if (source.peek() != std::char_traits<char>::eof())
        throw FormatError("trailing bytes after " + std::to_string(ds.header.num_records) + " records");
    return ds;
}

inline Dataset read_dataset_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open dataset " + path);
    return read_dataset(is);
}

// token_states holds num_tokens slices of num_layers x hidden_dim, token-major
// then layer-major. The generated token is the last slice.
inline HiddenStates aggregate_tokens(std::span<const float> token_states, std::size_t num_tokens,
                                     std::size_t num_layers, std::size_t hidden_dim, AggregationMode mode) {
    if (num_tokens == 0) throw ValidationError("aggregate_tokens: no token states");
    const std::size_t slice = num_layers * hidden_dim;
    if (token_states.size() != num_tokens * slice)
        throw ValidationError("aggregate_tokens: tensor size does not match T x L x D");

    using ConstMap = Eigen::Map<const HiddenStates>;
    auto at = [&](std::size_t t) {
        return ConstMap(token_states.data() + t * slice, static_cast<Eigen::Index>(num_layers),
                        static_cast<Eigen::Index>(hidden_dim));
    };
    if (mode == AggregationMode::AnswerOnly) return at(num_tokens - 1);

    // accumulate in double so the mean does not depend on token order
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_layers),
                                                static_cast<Eigen::Index>(hidden_dim));
    for (std::size_t t = 0; t < num_tokens; ++t) acc += at(t).cast<double>();
    acc /= static_cast<double>(num_tokens);
    return acc.cast<float>();
}

// y^(l) = h^(l) - h^(l-1), valid for 1 <= layer < num_layers.
inline Eigen::VectorXd centered_target(const ActivationRecord& r, std::size_t layer) {
    if (layer == 0 || layer >= r.num_layers())
        throw ValidationError("centered_target: layer " + std::to_string(layer) + " outside [1, " +
                              std::to_string(r.num_layers() - 1) + "]");
    const auto l = static_cast<Eigen::Index>(layer);
    return (r.hidden.row(l).cast<double>() - r.hidden.row(l - 1).cast<double>()).transpose();
}

inline Eigen::VectorXd design_vector(const ActivationRecord& r, std::size_t layer) {
    return r.hidden.row(static_cast<Eigen::Index>(layer) - 1).cast<double>().transpose();
}

} // namespace bll
