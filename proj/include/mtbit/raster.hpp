#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtbit {

enum class RasterErrorKind {
    io,
    bad_magic,
    truncated,
    non_finite,
    bad_value,
};

class RasterError : public std::runtime_error {
public:
    RasterError(RasterErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    RasterErrorKind kind() const { return kind_; }

private:
    RasterErrorKind kind_;
};

/// Single-channel row-major float grid.  Holds meters for DSM / elevation
/// difference rasters and [0,1] reflectance for image bands.
struct RasterF32 {
    int width = 0;
    int height = 0;
    std::vector<float> values;

    RasterF32() = default;
    RasterF32(int w, int h, float fill = 0.0f)
        : width(w), height(h), values(static_cast<size_t>(w) * h, fill) {}

    float& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
    float at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return values.size(); }

    bool finite() const {
        for (float v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// Row-major binary grid, one byte per pixel, values restricted to {0,1}.
struct Mask8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> values;

    Mask8() = default;
    Mask8(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), values(static_cast<size_t>(w) * h, fill) {}

    std::uint8_t& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return values.size(); }

    bool binary() const {
        for (auto v : values)
            if (v > 1) return false;
        return true;
    }
};

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32le(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32le(out, bits);
}

inline float get_f32le(const unsigned char* p) {
    std::uint32_t bits = get_u32le(p);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RasterError(RasterErrorKind::io, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RasterError(RasterErrorKind::io, "cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw RasterError(RasterErrorKind::io, "short write to " + path.string());
}

}  // namespace detail

// File layout: 4-byte magic ("R32F" / "MSK8"), u32le width, u32le height,
// then the row-major payload (f32le per pixel, or one byte per mask value).

inline std::string serialize_raster(const RasterF32& r) {
    if (r.values.size() != static_cast<size_t>(r.width) * r.height)
        throw RasterError(RasterErrorKind::bad_value, "raster size mismatch");
    if (!r.finite())
        throw RasterError(RasterErrorKind::non_finite, "refusing to write non-finite raster");
    std::string out;
    out.reserve(12 + 4 * r.size());
    out += "R32F";
    detail::put_u32le(out, static_cast<std::uint32_t>(r.width));
    detail::put_u32le(out, static_cast<std::uint32_t>(r.height));
    for (float v : r.values) detail::put_f32le(out, v);
    return out;
}

inline std::string serialize_mask(const Mask8& m) {
    if (m.values.size() != static_cast<size_t>(m.width) * m.height)
        throw RasterError(RasterErrorKind::bad_value, "mask size mismatch");
    if (!m.binary())
        throw RasterError(RasterErrorKind::bad_value, "refusing to write non-binary mask");
    std::string out;
    out.reserve(12 + m.size());
    out += "MSK8";
    detail::put_u32le(out, static_cast<std::uint32_t>(m.width));
    detail::put_u32le(out, static_cast<std::uint32_t>(m.height));
    out.append(reinterpret_cast<const char*>(m.values.data()), m.values.size());
    return out;
}

inline void write_raster(const RasterF32& r, const std::filesystem::path& path) {
    detail::write_file_bytes(path, serialize_raster(r));
}

inline void write_raster(const Mask8& m, const std::filesystem::path& path) {
    detail::write_file_bytes(path, serialize_mask(m));
}

inline RasterF32 parse_raster(const std::string& bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 12 || bytes.compare(0, 4, "R32F") != 0)
        throw RasterError(RasterErrorKind::bad_magic, "bad raster magic in " + origin);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    RasterF32 r;
    r.width = static_cast<int>(detail::get_u32le(p + 4));
    r.height = static_cast<int>(detail::get_u32le(p + 8));
    const size_t n = static_cast<size_t>(r.width) * r.height;
    if (bytes.size() != 12 + 4 * n)
        throw RasterError(RasterErrorKind::truncated, "raster payload truncated in " + origin);
    r.values.resize(n);
    for (size_t i = 0; i < n; ++i) r.values[i] = detail::get_f32le(p + 12 + 4 * i);
    if (!r.finite())
        throw RasterError(RasterErrorKind::non_finite, "non-finite raster payload in " + origin);
    return r;
}

inline Mask8 parse_mask(const std::string& bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 12 || bytes.compare(0, 4, "MSK8") != 0)
        throw RasterError(RasterErrorKind::bad_magic, "bad mask magic in " + origin);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    Mask8 m;
    m.width = static_cast<int>(detail::get_u32le(p + 4));
    m.height = static_cast<int>(detail::get_u32le(p + 8));
    const size_t n = static_cast<size_t>(m.width) * m.height;
    if (bytes.size() != 12 + n)
        throw RasterError(RasterErrorKind::truncated, "mask payload truncated in " + origin);
    m.values.assign(p + 12, p + 12 + n);
    if (!m.binary())
        throw RasterError(RasterErrorKind::bad_value, "mask payload not binary in " + origin);
    return m;
}

inline RasterF32 read_raster(const std::filesystem::path& path) {
    return parse_raster(detail::read_file_bytes(path), path.string());
}

inline Mask8 read_mask(const std::filesystem::path& path) {
    return parse_mask(detail::read_file_bytes(path), path.string());
}

/// Multi-band image: a one-byte band count followed by the bands as complete
/// R32F blobs, concatenated.
struct ImageF32 {
    std::vector<RasterF32> bands;

    int width() const { return bands.empty() ? 0 : bands[0].width; }
    int height() const { return bands.empty() ? 0 : bands[0].height; }
    int band_count() const { return static_cast<int>(bands.size()); }
};

inline void write_image(const ImageF32& img, const std::filesystem::path& path) {
    if (img.bands.empty() || img.bands.size() > 255)
        throw RasterError(RasterErrorKind::bad_value, "band count out of range");
    std::string out;
    out.push_back(static_cast<char>(img.bands.size()));
    for (const auto& b : img.bands) out += serialize_raster(b);
    detail::write_file_bytes(path, out);
}

inline ImageF32 read_image(const std::filesystem::path& path) {
    const std::string bytes = detail::read_file_bytes(path);
    if (bytes.empty())
        throw RasterError(RasterErrorKind::truncated, "empty image file " + path.string());
    const int n_bands = static_cast<unsigned char>(bytes[0]);
    if (n_bands == 0)
        throw RasterError(RasterErrorKind::bad_value, "zero bands in " + path.string());
    ImageF32 img;
    size_t off = 1;
    for (int b = 0; b < n_bands; ++b) {
        if (off + 12 > bytes.size())
            throw RasterError(RasterErrorKind::truncated, "image band truncated in " + path.string());
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + off;
        const size_t n = static_cast<size_t>(detail::get_u32le(p + 4)) * detail::get_u32le(p + 8);
        const size_t blob = 12 + 4 * n;
        if (off + blob > bytes.size())
            throw RasterError(RasterErrorKind::truncated, "image band truncated in " + path.string());
        img.bands.push_back(parse_raster(bytes.substr(off, blob), path.string()));
        off += blob;
    }
    if (off != bytes.size())
        throw RasterError(RasterErrorKind::truncated, "trailing bytes in " + path.string());
    return img;
}

}  // namespace mtbit
