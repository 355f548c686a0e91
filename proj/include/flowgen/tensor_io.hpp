#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flowgen/errors.hpp"
#include "flowgen/tensor.hpp"

namespace flowgen {

/// Self-describing binary tensor file (.ptg):
///   magic "PDTG" | u8 version | u8 dtype (0=f64, 1=f32) | u8 ndim |
///   ndim x little-endian u64 extents | row-major payload.
/// All dataset and checkpoint files use this format.
namespace ptg {

constexpr char kMagic[4] = {'P', 'D', 'T', 'G'};
constexpr std::uint8_t kVersion = 1;

enum class Dtype : std::uint8_t { f64 = 0, f32 = 1 };

namespace detail_io {

template <typename T>
void put(std::ostream& os, T v) {
    // serialize little-endian regardless of host order
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw FormatError("unexpected end of tensor file");
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

} // namespace detail_io

inline void write(std::ostream& os, const Tensor& t, Dtype dtype = Dtype::f64) {
    os.write(kMagic, 4);
    detail_io::put<std::uint8_t>(os, kVersion);
    detail_io::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    detail_io::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
    for (auto e : t.shape()) detail_io::put<std::uint64_t>(os, static_cast<std::uint64_t>(e));
    if (dtype == Dtype::f64) {
        for (double v : t.raw()) detail_io::put<double>(os, v);
    } else {
        for (double v : t.raw()) detail_io::put<float>(os, static_cast<float>(v));
    }
    if (!os) throw FormatError("tensor write failed");
}

inline Tensor read(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad magic: not a PDTG tensor file");
    const auto version = detail_io::get<std::uint8_t>(is);
    if (version != kVersion)
        throw FormatError("unsupported tensor file version " + std::to_string(version));
    const auto dtype = detail_io::get<std::uint8_t>(is);
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype));
    const auto ndim = detail_io::get<std::uint8_t>(is);
    Shape shape(ndim);
    for (auto& e : shape) e = static_cast<std::size_t>(detail_io::get<std::uint64_t>(is));
    const std::size_t n = shape_numel(shape);
    std::vector<double> data(n);
    if (static_cast<Dtype>(dtype) == Dtype::f64) {
        for (auto& v : data) v = detail_io::get<double>(is);
    } else {
        for (auto& v : data) v = static_cast<double>(detail_io::get<float>(is));
    }
    return Tensor(std::move(shape), std::move(data));
}

inline void save(const std::filesystem::path& path, const Tensor& t, Dtype dtype = Dtype::f64) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write(os, t, dtype);
}

inline Tensor load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return read(is);
}

} // namespace ptg

/// Write a file atomically: stream into <path>.tmp then rename over the target,
/// so failed runs never leave partial outputs behind.
template <typename WriteFn>
void atomic_write(const std::filesystem::path& path, WriteFn&& fn) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot open " + tmp + " for writing");
        fn(os);
        if (!os) throw FormatError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

} // namespace flowgen
