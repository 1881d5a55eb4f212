#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vfda {

// Fixed little-endian byte-level IO shared by every on-disk and on-wire
// format in the project.  Parse failures are reported as distinct exception
// types so callers (and tests) can tell a wrong file apart from a damaged
// one.

struct WireError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagicError : WireError {
    using WireError::WireError;
};
struct VersionMismatchError : WireError {
    using WireError::WireError;
};
struct TruncationError : WireError {
    using WireError::WireError;
};
struct RangeError : WireError {
    using WireError::WireError;
};

namespace wire {

inline void put_u8(std::vector<uint8_t>& out, uint8_t v) { out.push_back(v); }

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<uint8_t>& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

inline void put_magic(std::vector<uint8_t>& out, const char (&magic)[5]) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(magic[i]));
}

/// Sequential reader over a byte buffer with positioned truncation
/// diagnostics.
class Reader {
  public:
    Reader(const uint8_t* data, size_t size, std::string what) : data_(data), size_(size), what_(std::move(what)) {}
    explicit Reader(const std::vector<uint8_t>& bytes, std::string what)
        : Reader(bytes.data(), bytes.size(), std::move(what)) {}

    size_t pos() const { return pos_; }
    size_t remaining() const { return size_ - pos_; }

    void need(size_t n) const {
        if (size_ - pos_ < n) {
            throw TruncationError(what_ + ": truncated at byte " + std::to_string(pos_) + " (need " +
                                  std::to_string(n) + " more, have " + std::to_string(size_ - pos_) + ")");
        }
    }

    uint8_t u8() {
        need(1);
        return data_[pos_++];
    }

    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v = static_cast<uint16_t>(v | (static_cast<uint16_t>(data_[pos_++]) << (8 * i)));
        return v;
    }

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_++]) << (8 * i);
        return v;
    }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[pos_++]) << (8 * i);
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    void bytes(uint8_t* out, size_t n) {
        need(n);
        std::memcpy(out, data_ + pos_, n);
        pos_ += n;
    }

    void expect_magic(const char (&magic)[5]) {
        need(4);
        if (std::memcmp(data_ + pos_, magic, 4) != 0) {
            throw BadMagicError(what_ + ": bad magic, expected \"" + std::string(magic, 4) + "\"");
        }
        pos_ += 4;
    }

    void expect_end() const {
        if (pos_ != size_) {
            throw WireError(what_ + ": " + std::to_string(size_ - pos_) + " unexpected trailing bytes");
        }
    }

  private:
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    std::string what_;
};

inline std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path + " for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw std::runtime_error("read failure on " + path);
    return bytes;
}

inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failure on " + path);
}

}  // namespace wire
}  // namespace vfda
