#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pmae/errors.hpp"

namespace pmae {

// Little-endian binary file helpers shared by the checkpoint, basis, and
// dataset formats. All multi-byte values are encoded explicitly so the files
// are identical across hosts.

class BinWriter {
public:
    explicit BinWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open for writing: " + path);
    }

    void bytes(const void* p, size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw IoError("write failed: " + path_);
    }

    void u8(uint8_t v) { bytes(&v, 1); }
    void u16(uint16_t v) { put_le(v); }
    void u32(uint32_t v) { put_le(v); }
    void u64(uint64_t v) { put_le(v); }

    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }

    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }

    void magic(const char tag[5]) { bytes(tag, 4); }

    void close() {
        out_.close();
        if (!out_) throw IoError("close failed: " + path_);
    }

private:
    template <typename T>
    void put_le(T v) {
        uint8_t buf[sizeof(T)];
        for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<uint8_t>(v >> (8 * i));
        bytes(buf, sizeof(T));
    }

    std::string path_;
    std::ofstream out_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open for reading: " + path);
    }

    void bytes(void* p, size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in_.gcount() != static_cast<std::streamsize>(n)) {
            throw IoError("truncated file: " + path_);
        }
    }

    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint16_t u16() { return get_le<uint16_t>(); }
    uint32_t u32() { return get_le<uint32_t>(); }
    uint64_t u64() { return get_le<uint64_t>(); }

    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    void expect_magic(const char tag[5]) {
        char got[4];
        bytes(got, 4);
        if (std::memcmp(got, tag, 4) != 0) {
            throw IoError("bad magic in " + path_ + ": expected " + tag);
        }
    }

    bool at_eof() {
        return in_.peek() == std::char_traits<char>::eof();
    }

    const std::string& path() const { return path_; }

private:
    template <typename T>
    T get_le() {
        uint8_t buf[sizeof(T)];
        bytes(buf, sizeof(T));
        T v = 0;
        for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
        return v;
    }

    std::string path_;
    std::ifstream in_;
};

} // namespace pmae
