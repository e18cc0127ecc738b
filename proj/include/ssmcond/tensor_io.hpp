#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "ssmcond/tensor.hpp"

namespace ssmcond {

// ─── Little-endian byte helpers ──────────────────────────────────────────────

namespace bytes {

inline void put_u32(std::vector<std::uint8_t> &out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t> &out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t> &out, double v) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
inline void put_f64(std::vector<std::uint8_t> &out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

// Sequential reader; every get_* reports whether enough bytes remained.
class Reader {
  public:
    explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

    std::size_t remaining() const { return data_.size() - pos_; }

    bool get_u32(std::uint32_t &v) {
        if (remaining() < 4)
            return false;
        v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return true;
    }

    bool get_u64(std::uint64_t &v) {
        if (remaining() < 8)
            return false;
        v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return true;
    }

    bool get_f32(double &v) {
        std::uint32_t bits;
        if (!get_u32(bits))
            return false;
        v = static_cast<double>(std::bit_cast<float>(bits));
        return true;
    }

    bool get_f64(double &v) {
        std::uint64_t bits;
        if (!get_u64(bits))
            return false;
        v = std::bit_cast<double>(bits);
        return true;
    }

    bool get_magic(const std::array<std::uint8_t, 4> &magic) {
        if (remaining() < 4 || !std::equal(magic.begin(), magic.end(), data_.begin() + static_cast<std::ptrdiff_t>(pos_)))
            return false;
        pos_ += 4;
        return true;
    }

  private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path &path, bool &ok) {
    std::ifstream in(path, std::ios::binary);
    ok = static_cast<bool>(in);
    if (!ok)
        return {};
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline bool write_file(const std::filesystem::path &path, std::span<const std::uint8_t> data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        return false;
    out.write(reinterpret_cast<const char *>(data.data()), static_cast<std::streamsize>(data.size()));
    return static_cast<bool>(out);
}

} // namespace bytes

// ─── MVCT tensor files ───────────────────────────────────────────────────────
//
//   "MVCT" | u32 version=1 | u32 rank=2 | u32 rows | u32 cols | rows*cols f32
//
// All integers and floats little-endian, payload row-major.

inline constexpr std::array<std::uint8_t, 4> kTensorMagic{0x4D, 0x56, 0x43, 0x54};
inline constexpr std::uint32_t kTensorVersion = 1;

class TensorFileError : public Error {
  public:
    enum class Kind { io, bad_magic, bad_version, bad_rank, truncated };

    TensorFileError(Kind kind, const std::string &what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

  private:
    Kind kind_;
};

inline std::vector<std::uint8_t> encode_tensor(const Tensor &t) {
    std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
    out.reserve(20 + 4 * t.size());
    bytes::put_u32(out, kTensorVersion);
    bytes::put_u32(out, 2);
    bytes::put_u32(out, static_cast<std::uint32_t>(t.rows()));
    bytes::put_u32(out, static_cast<std::uint32_t>(t.cols()));
    for (double v : t.values())
        bytes::put_f32(out, v);
    return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> data, const std::string &origin = "<memory>") {
    using K = TensorFileError::Kind;
    bytes::Reader r(data);
    if (!r.get_magic(kTensorMagic))
        throw TensorFileError(K::bad_magic, origin + ": bad magic (not an MVCT tensor)");
    std::uint32_t version = 0, rank = 0, rows = 0, cols = 0;
    if (!r.get_u32(version))
        throw TensorFileError(K::truncated, origin + ": truncated header");
    if (version != kTensorVersion)
        throw TensorFileError(K::bad_version, detail::concat(origin, ": unsupported version ", version));
    if (!r.get_u32(rank))
        throw TensorFileError(K::truncated, origin + ": truncated header");
    if (rank != 2)
        throw TensorFileError(K::bad_rank, detail::concat(origin, ": rank ", rank, " (only rank 2 is supported)"));
    if (!r.get_u32(rows) || !r.get_u32(cols))
        throw TensorFileError(K::truncated, origin + ": truncated header");
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (r.remaining() < n * 4)
        throw TensorFileError(K::truncated, detail::concat(origin, ": truncated payload (expected ", n * 4, " bytes, have ",
                                                           r.remaining(), ")"));
    Tensor t(rows, cols);
    for (double &v : t.values())
        r.get_f32(v);
    return t;
}

inline void write_tensor(const Tensor &t, const std::filesystem::path &path) {
    if (!bytes::write_file(path, encode_tensor(t)))
        throw TensorFileError(TensorFileError::Kind::io, "cannot write " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path &path) {
    bool ok = false;
    auto data = bytes::read_file(path, ok);
    if (!ok)
        throw TensorFileError(TensorFileError::Kind::io, "cannot read " + path.string());
    return decode_tensor(data, path.string());
}

// Rounds every value to float32, i.e. what a write/read round trip yields.
inline Tensor round_to_f32(const Tensor &t) {
    Tensor r(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.size(); ++i)
        r[i] = static_cast<double>(static_cast<float>(t[i]));
    return r;
}

} // namespace ssmcond
