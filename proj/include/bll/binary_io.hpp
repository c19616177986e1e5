#pragma once

// Little-endian primitive encoding shared by the .blla dataset, the stats
// cache and the model bundle containers.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "bll/error.hpp"

namespace bll::io {

class LeWriter {
public:
    explicit LeWriter(std::ostream& os) : os_(os) {}

    void u8(std::uint8_t v) { put(&v, 1); }
    void u32(std::uint32_t v) { put_uint(v); }
    void u64(std::uint64_t v) { put_uint(v); }
    void f32(float v) { put_uint(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put_uint(std::bit_cast<std::uint64_t>(v)); }

    void bytes(std::string_view s) {
        put(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
    }

    void f32s(std::span<const float> vs) {
        // batch the conversion so large payloads are one stream write
        scratch_.resize(vs.size() * 4);
        for (std::size_t i = 0; i < vs.size(); ++i) {
            const auto bits = std::bit_cast<std::uint32_t>(vs[i]);
            for (int b = 0; b < 4; ++b)
                scratch_[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
        }
        put(scratch_.data(), scratch_.size());
    }

    void vec(const Eigen::VectorXd& v) {
        u64(static_cast<std::uint64_t>(v.size()));
        for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
    }

    // column-major payload after (rows, cols)
    void mat(const Eigen::MatrixXd& m) {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            for (Eigen::Index i = 0; i < m.rows(); ++i) f64(m(i, j));
    }

    std::uint64_t written() const { return written_; }

private:
    template <typename U>
    void put_uint(U v) {
        std::array<std::uint8_t, sizeof(U)> buf{};
        for (std::size_t b = 0; b < sizeof(U); ++b)
            buf[b] = static_cast<std::uint8_t>(v >> (8 * b));
        put(buf.data(), buf.size());
    }

    void put(const std::uint8_t* p, std::size_t n) {
        os_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!os_) throw RuntimeError("write failed after " + std::to_string(written_) + " bytes");
        written_ += n;
    }

    std::ostream& os_;
    std::uint64_t written_ = 0;
    std::vector<std::uint8_t> scratch_;
};

class LeReader {
public:
    explicit LeReader(std::istream& is) : is_(is) {}

    // Returns false on clean EOF before any byte of the value was read.
    bool try_get(std::uint8_t* p, std::size_t n) {
        is_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
        const auto got = static_cast<std::size_t>(is_.gcount());
        consumed_ += got;
        return got == n;
    }

    void get(std::uint8_t* p, std::size_t n, const char* what) {
        if (!try_get(p, n)) throw FormatError(std::string("truncated input while reading ") + what);
    }

    std::uint8_t u8(const char* what = "u8") {
        std::uint8_t v = 0;
        get(&v, 1, what);
        return v;
    }
    std::uint32_t u32(const char* what = "u32") { return get_uint<std::uint32_t>(what); }
    std::uint64_t u64(const char* what = "u64") { return get_uint<std::uint64_t>(what); }
    float f32(const char* what = "f32") { return std::bit_cast<float>(get_uint<std::uint32_t>(what)); }
    double f64(const char* what = "f64") { return std::bit_cast<double>(get_uint<std::uint64_t>(what)); }

    std::string bytes(std::size_t n, const char* what) {
        std::string s(n, '\0');
        get(reinterpret_cast<std::uint8_t*>(s.data()), n, what);
        return s;
    }

    void f32s(std::span<float> out, const char* what) {
        scratch_.resize(out.size() * 4);
        get(scratch_.data(), scratch_.size(), what);
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= std::uint32_t{scratch_[4 * i + b]} << (8 * b);
            out[i] = std::bit_cast<float>(bits);
        }
    }

    Eigen::VectorXd vec(const char* what = "vector") {
        const auto n = u64(what);
        check_size(n, what);
        Eigen::VectorXd v(static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = f64(what);
        return v;
    }

    Eigen::MatrixXd mat(const char* what = "matrix") {
        const auto r = u64(what);
        const auto c = u64(what);
        check_size(r, what);
        check_size(c, what);
        check_size(r * c, what);
        Eigen::MatrixXd m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = f64(what);
        return m;
    }

    std::uint64_t consumed() const { return consumed_; }

private:
    static void check_size(std::uint64_t n, const char* what) {
        if (n > (std::uint64_t{1} << 32)) throw FormatError(std::string("implausible size for ") + what);
    }

    template <typename U>
    U get_uint(const char* what) {
        std::array<std::uint8_t, sizeof(U)> buf{};
        get(buf.data(), buf.size(), what);
        U v = 0;
        for (std::size_t b = 0; b < sizeof(U); ++b) v |= U{buf[b]} << (8 * b);
        return v;
    }

    std::istream& is_;
    std::uint64_t consumed_ = 0;
    std::vector<std::uint8_t> scratch_;
};

// 64-bit FNV-1a; used as a content hash for cache invalidation.
class Fnv1a {
public:
    void update(std::span<const std::uint8_t> data) {
        for (auto b : data) {
            state_ ^= b;
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) {
        update({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    }
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

} // namespace bll::io
