#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3f/tensor.hpp"

namespace m3f::io {

// All on-disk formats are little-endian with 32-bit floats, regardless of
// the in-memory real width.

struct TruncatedFile : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagic : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadVersion : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename T>
void write_raw(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw TruncatedFile(std::string("truncated file while reading ") + what);
    return v;
}

inline void write_f32(std::ostream& os, real v) { write_raw<float>(os, static_cast<float>(v)); }
inline real read_f32(std::istream& is, const char* what) {
    return static_cast<real>(read_raw<float>(is, what));
}

inline void write_f32_block(std::ostream& os, const std::vector<real>& v) {
    if constexpr (sizeof(real) == sizeof(float)) {
        os.write(reinterpret_cast<const char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(float)));
    } else {
        for (real x : v) write_f32(os, x);
    }
}

inline void read_f32_block(std::istream& is, std::vector<real>& v, const char* what) {
    if constexpr (sizeof(real) == sizeof(float)) {
        is.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(float)));
        if (!is) throw TruncatedFile(std::string("truncated file while reading ") + what);
    } else {
        for (real& x : v) x = read_f32(is, what);
    }
}

inline void expect_magic(std::istream& is, const char* magic4, const char* format) {
    char buf[4];
    is.read(buf, 4);
    if (!is) throw TruncatedFile(std::string("truncated ") + format + " header");
    if (std::memcmp(buf, magic4, 4) != 0)
        throw BadMagic(std::string("not a ") + format + " file (bad magic)");
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    return is;
}

}  // namespace m3f::io
