#pragma once

// Checkpoint container: magic "GEGAN", u32 version, u32 entry count, then per
// entry: u32 name length + UTF-8 name, u8 dtype code, u32 rank, u64 extents,
// u32 CRC32 of the payload, payload bytes (little-endian, row-major).

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gegan/tensor.hpp"

namespace gegan {

enum class DType : std::uint8_t { F64 = 0, I64 = 1, U8 = 2 };

struct CheckpointEntry {
    DType dtype = DType::F64;
    Shape shape;
    std::vector<std::uint8_t> payload;

    std::int64_t count() const {
        std::int64_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }

    static CheckpointEntry from_f64(const Shape& shape, const std::vector<double>& v) {
        CheckpointEntry e;
        e.dtype = DType::F64;
        e.shape = shape;
        e.payload.resize(v.size() * 8);
        for (std::size_t i = 0; i < v.size(); ++i)
            detail_store_le(e.payload.data() + i * 8, v[i]);
        return e;
    }
    static CheckpointEntry from_i64(const Shape& shape,
                                    const std::vector<std::int64_t>& v) {
        CheckpointEntry e;
        e.dtype = DType::I64;
        e.shape = shape;
        e.payload.resize(v.size() * 8);
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::uint64_t u;
            std::memcpy(&u, &v[i], 8);
            detail_store_le64(e.payload.data() + i * 8, u);
        }
        return e;
    }
    static CheckpointEntry from_string(const std::string& s) {
        CheckpointEntry e;
        e.dtype = DType::U8;
        e.shape = {std::int64_t(s.size())};
        e.payload.assign(s.begin(), s.end());
        return e;
    }

    std::vector<double> as_f64() const {
        if (dtype != DType::F64) throw std::runtime_error("checkpoint: dtype not f64");
        std::vector<double> v(payload.size() / 8);
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = detail_load_le(payload.data() + i * 8);
        return v;
    }
    std::vector<std::int64_t> as_i64() const {
        if (dtype != DType::I64) throw std::runtime_error("checkpoint: dtype not i64");
        std::vector<std::int64_t> v(payload.size() / 8);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::uint64_t u = detail_load_le64(payload.data() + i * 8);
            std::memcpy(&v[i], &u, 8);
        }
        return v;
    }
    std::string as_string() const {
        if (dtype != DType::U8) throw std::runtime_error("checkpoint: dtype not u8");
        return std::string(payload.begin(), payload.end());
    }

    static void detail_store_le64(std::uint8_t* p, std::uint64_t u) {
        for (int i = 0; i < 8; ++i) p[i] = std::uint8_t(u >> (8 * i));
    }
    static std::uint64_t detail_load_le64(const std::uint8_t* p) {
        std::uint64_t u = 0;
        for (int i = 0; i < 8; ++i) u |= std::uint64_t(p[i]) << (8 * i);
        return u;
    }
    static void detail_store_le(std::uint8_t* p, double d) {
        std::uint64_t u;
        std::memcpy(&u, &d, 8);
        detail_store_le64(p, u);
    }
    static double detail_load_le(const std::uint8_t* p) {
        const std::uint64_t u = detail_load_le64(p);
        double d;
        std::memcpy(&d, &u, 8);
        return d;
    }
};

// Ordered name -> entry table (std::map keeps saves byte-identical).
using CheckpointTable = std::map<std::string, CheckpointEntry>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void ckpt_write_u32(std::ostream& out, std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = std::uint8_t(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t ckpt_read_u32(std::istream& in) {
    std::uint8_t b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}
inline void ckpt_write_u64(std::ostream& out, std::uint64_t v) {
    std::uint8_t b[8];
    CheckpointEntry::detail_store_le64(b, v);
    out.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t ckpt_read_u64(std::istream& in) {
    std::uint8_t b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8))
        throw std::runtime_error("checkpoint: truncated file");
    return CheckpointEntry::detail_load_le64(b);
}

}  // namespace detail

inline void save_checkpoint_table(const CheckpointTable& table,
                                  const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
    out.write("GEGAN", 5);
    detail::ckpt_write_u32(out, kCheckpointVersion);
    detail::ckpt_write_u32(out, std::uint32_t(table.size()));
    for (const auto& [name, e] : table) {
        detail::ckpt_write_u32(out, std::uint32_t(name.size()));
        out.write(name.data(), std::streamsize(name.size()));
        const std::uint8_t dt = std::uint8_t(e.dtype);
        out.write(reinterpret_cast<const char*>(&dt), 1);
        detail::ckpt_write_u32(out, std::uint32_t(e.shape.size()));
        for (auto ext : e.shape) detail::ckpt_write_u64(out, std::uint64_t(ext));
        const std::uint32_t crc = std::uint32_t(
            crc32(0L, e.payload.data(), uInt(e.payload.size())));
        detail::ckpt_write_u32(out, crc);
        out.write(reinterpret_cast<const char*>(e.payload.data()),
                  std::streamsize(e.payload.size()));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline CheckpointTable load_checkpoint_table(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[5];
    if (!in.read(magic, 5) || std::memcmp(magic, "GEGAN", 5) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint32_t version = detail::ckpt_read_u32(in);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: version " + std::to_string(version) +
                                 " unsupported (expect " +
                                 std::to_string(kCheckpointVersion) + ")");
    const std::uint32_t n = detail::ckpt_read_u32(in);
    CheckpointTable table;
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t name_len = detail::ckpt_read_u32(in);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len))
            throw std::runtime_error("checkpoint: truncated name");
        CheckpointEntry e;
        std::uint8_t dt;
        if (!in.read(reinterpret_cast<char*>(&dt), 1))
            throw std::runtime_error("checkpoint: truncated dtype");
        if (dt > 2) throw std::runtime_error("checkpoint: unknown dtype code");
        e.dtype = DType(dt);
        const std::uint32_t rank = detail::ckpt_read_u32(in);
        std::int64_t count = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const std::int64_t ext = std::int64_t(detail::ckpt_read_u64(in));
            e.shape.push_back(ext);
            count *= ext;
        }
        const std::uint32_t want_crc = detail::ckpt_read_u32(in);
        const std::size_t width = e.dtype == DType::U8 ? 1 : 8;
        e.payload.resize(std::size_t(count) * width);
        if (!in.read(reinterpret_cast<char*>(e.payload.data()),
                     std::streamsize(e.payload.size())))
            throw std::runtime_error("checkpoint: truncated payload for " + name);
        const std::uint32_t got_crc = std::uint32_t(
            crc32(0L, e.payload.data(), uInt(e.payload.size())));
        if (got_crc != want_crc)
            throw std::runtime_error("checkpoint: checksum failure for " + name);
        table.emplace(std::move(name), std::move(e));
    }
    return table;
}

}  // namespace gegan
