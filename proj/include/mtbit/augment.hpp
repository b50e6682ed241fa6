#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mtbit/rng.hpp"
#include "mtbit/tile.hpp"

namespace mtbit {

/// Augmentation recipe.  Geometric parameters are shared across the image pair
/// and both targets; photometric parameters are drawn independently per image.
struct AugSpec {
    int target_size = 256;
    double p_hflip = 0.5;
    double shift_max = 8.0;       // pixels, in output-grid units
    double scale_min = 0.95, scale_max = 1.05;
    double rot_max_deg = 5.0;
    double brightness = 0.10;     // additive offset range
    double contrast = 0.10;       // multiplicative range about the image mean
    double saturation = 0.10;     // range about per-pixel gray
    double blur_sharpen = 0.30;   // unsharp-mask strength range (negative blurs)
    double noise_sigma = 0.01;
    bool enable_flip = true;
    bool enable_geom = true;
    bool enable_radiometric = true;
    bool enable_noise = true;

    bool operator==(const AugSpec&) const = default;

    void validate() const {
        if (target_size <= 0) throw std::invalid_argument("target_size must be positive");
        if (p_hflip < 0.0 || p_hflip > 1.0) throw std::invalid_argument("p_hflip outside [0,1]");
        auto finite = [](double v) { return std::isfinite(v); };
        if (!finite(shift_max) || !finite(scale_min) || !finite(scale_max) || !finite(rot_max_deg) ||
            !finite(brightness) || !finite(contrast) || !finite(saturation) ||
            !finite(blur_sharpen) || !finite(noise_sigma))
            throw std::invalid_argument("augmentation range not finite");
        if (shift_max < 0.0 || rot_max_deg < 0.0 || noise_sigma < 0.0)
            throw std::invalid_argument("augmentation range negative");
        if (!(scale_min > 0.0) || scale_max < scale_min)
            throw std::invalid_argument("scale range invalid");
    }
};

struct GeomTransform {
    bool hflip = false;
    double dx = 0.0, dy = 0.0;  // translation, output pixels
    double scale = 1.0;
    double rot_deg = 0.0;

    bool is_identity_affine() const {
        return dx == 0.0 && dy == 0.0 && scale == 1.0 && rot_deg == 0.0;
    }
};

/// One training example in model layout: planar band-major images in [0,1],
/// binary 2D target, and a 3D target normalized to [-1,1].
struct ModelSample {
    int size = 0;
    int bands = 0;
    std::vector<double> x1, x2;      // bands * size * size
    std::vector<std::uint8_t> y2d;   // size * size
    std::vector<double> y3d;         // size * size
};

inline GeomTransform sample_transform(const AugSpec& spec, Rng& rng) {
    GeomTransform g;
    if (spec.enable_flip) g.hflip = rng.bernoulli(spec.p_hflip);
    if (spec.enable_geom) {
        g.dx = spec.shift_max > 0.0 ? rng.uniform(-spec.shift_max, spec.shift_max) : 0.0;
        g.dy = spec.shift_max > 0.0 ? rng.uniform(-spec.shift_max, spec.shift_max) : 0.0;
        g.scale = spec.scale_max > spec.scale_min ? rng.uniform(spec.scale_min, spec.scale_max)
                                                  : spec.scale_min;
        g.rot_deg = spec.rot_max_deg > 0.0 ? rng.uniform(-spec.rot_max_deg, spec.rot_max_deg) : 0.0;
    }
    return g;
}

namespace detail {

/// Maps an output pixel index to continuous source-pixel coordinates under the
/// inverse of (scale+rotate about center, then translate, then flip), using
/// half-pixel centers.  The same normalized mapping is reused for every source
/// resolution, which keeps the 400 px channels and the 200 px channel aligned.
struct InverseMap {
    int out_size;
    bool hflip;
    double cos_t, sin_t, inv_scale, tx, ty;

    explicit InverseMap(const GeomTransform& g, int out_size_) : out_size(out_size_) {
        const double theta = g.rot_deg * 3.14159265358979323846 / 180.0;
        hflip = g.hflip;
        cos_t = std::cos(theta);
        sin_t = std::sin(theta);
        inv_scale = 1.0 / g.scale;
        tx = g.dx / out_size;
        ty = g.dy / out_size;
    }

    // Returns normalized source coordinates in [0,1] for in-canvas points.
    void operator()(int ox, int oy, double& sx, double& sy) const {
        const int fx = hflip ? out_size - 1 - ox : ox;
        const double ux = (fx + 0.5) / out_size - 0.5 - tx;
        const double uy = (oy + 0.5) / out_size - 0.5 - ty;
        sx = (cos_t * ux + sin_t * uy) * inv_scale + 0.5;
        sy = (-sin_t * ux + cos_t * uy) * inv_scale + 0.5;
    }
};

inline double bilinear_tap(const std::vector<float>& v, int size, double px, double py,
                           double fill) {
    if (px < -0.5 || px > size - 0.5 || py < -0.5 || py > size - 0.5) return fill;
    px = std::clamp(px, 0.0, size - 1.0);
    py = std::clamp(py, 0.0, size - 1.0);
    const int x0 = std::min(static_cast<int>(px), size - 2 >= 0 ? size - 2 : 0);
    const int y0 = std::min(static_cast<int>(py), size - 2 >= 0 ? size - 2 : 0);
    const int x1 = std::min(x0 + 1, size - 1);
    const int y1 = std::min(y0 + 1, size - 1);
    const double ax = px - x0, ay = py - y0;
    auto at = [&](int x, int y) {
        return static_cast<double>(v[static_cast<size_t>(y) * size + x]);
    };
    return (1 - ax) * (1 - ay) * at(x0, y0) + ax * (1 - ay) * at(x1, y0) +
           (1 - ax) * ay * at(x0, y1) + ax * ay * at(x1, y1);
}

template <typename T>
inline T nearest_tap(const std::vector<T>& v, int size, double px, double py, T fill) {
    const int x = static_cast<int>(std::floor(px + 0.5));
    const int y = static_cast<int>(std::floor(py + 0.5));
    if (x < 0 || x >= size || y < 0 || y >= size) return fill;
    return v[static_cast<size_t>(y) * size + x];
}

inline void box_blur3(const std::vector<double>& src, std::vector<double>& dst, int size) {
    dst.resize(src.size());
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double s = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = std::clamp(x + dx, 0, size - 1);
                    const int yy = std::clamp(y + dy, 0, size - 1);
                    s += src[static_cast<size_t>(yy) * size + xx];
                }
            dst[static_cast<size_t>(y) * size + x] = s / 9.0;
        }
    }
}

/// Photometric chain for one image: contrast about the mean, brightness,
/// saturation toward per-pixel gray, unsharp mask, additive noise, clamp.
inline void jitter_image(std::vector<double>& x, int bands, int size, const AugSpec& spec,
                         Rng& rng) {
    const size_t plane = static_cast<size_t>(size) * size;
    if (spec.enable_radiometric) {
        const double c = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast);
        const double b = rng.uniform(-spec.brightness, spec.brightness);
        const double s = rng.uniform(1.0 - spec.saturation, 1.0 + spec.saturation);
        const double k = rng.uniform(-spec.blur_sharpen, spec.blur_sharpen);
        double mean = 0.0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(x.size());
        for (double& v : x) v = (v - mean) * c + mean + b;
        if (bands > 1) {
            for (size_t i = 0; i < plane; ++i) {
                double gray = 0.0;
                for (int bb = 0; bb < bands; ++bb) gray += x[bb * plane + i];
                gray /= bands;
                for (int bb = 0; bb < bands; ++bb)
                    x[bb * plane + i] = gray + (x[bb * plane + i] - gray) * s;
            }
        }
        std::vector<double> blurred;
        for (int bb = 0; bb < bands; ++bb) {
            std::vector<double> band(x.begin() + bb * plane, x.begin() + (bb + 1) * plane);
            box_blur3(band, blurred, size);
            for (size_t i = 0; i < plane; ++i)
                x[bb * plane + i] = band[i] + k * (band[i] - blurred[i]);
        }
    }
    if (spec.enable_noise && spec.noise_sigma > 0.0)
        for (double& v : x) v += rng.normal(0.0, spec.noise_sigma);
    for (double& v : x) v = std::clamp(v, 0.0, 1.0);
}

inline std::vector<double> warp_image(const ImageF32& img, const detail::InverseMap& map,
                                      int out) {
    const int bands = img.band_count();
    const size_t plane = static_cast<size_t>(out) * out;
    std::vector<double> x(bands * plane);
    for (int b = 0; b < bands; ++b) {
        const auto& band = img.bands[static_cast<size_t>(b)];
        double fill = 0.0;
        for (float v : band.values) fill += v;
        fill /= static_cast<double>(band.size());
        for (int oy = 0; oy < out; ++oy)
            for (int ox = 0; ox < out; ++ox) {
                double sx, sy;
                map(ox, oy, sx, sy);
                x[b * plane + static_cast<size_t>(oy) * out + ox] = bilinear_tap(
                    band.values, band.width, sx * band.width - 0.5, sy * band.height - 0.5, fill);
            }
    }
    return x;
}

}  // namespace detail

/// Plain resize of a raster; bilinear with half-pixel centers for images,
/// nearest for labels.  Identity transforms route through the same sampler as
/// apply_paired, so "no augmentation" and "identity augmentation" agree
/// bit-for-bit.
inline RasterF32 resize_bilinear(const RasterF32& r, int out_size) {
    if (out_size <= 0) throw std::invalid_argument("resize: out_size must be positive");
    detail::InverseMap map(GeomTransform{}, out_size);
    RasterF32 o(out_size, out_size);
    for (int oy = 0; oy < out_size; ++oy)
        for (int ox = 0; ox < out_size; ++ox) {
            double sx, sy;
            map(ox, oy, sx, sy);
            o.at(ox, oy) = static_cast<float>(detail::bilinear_tap(
                r.values, r.width, sx * r.width - 0.5, sy * r.height - 0.5, 0.0));
        }
    return o;
}

inline RasterF32 resize_nearest(const RasterF32& r, int out_size) {
    if (out_size <= 0) throw std::invalid_argument("resize: out_size must be positive");
    detail::InverseMap map(GeomTransform{}, out_size);
    RasterF32 o(out_size, out_size);
    for (int oy = 0; oy < out_size; ++oy)
        for (int ox = 0; ox < out_size; ++ox) {
            double sx, sy;
            map(ox, oy, sx, sy);
            o.at(ox, oy) = detail::nearest_tap(r.values, r.width, sx * r.width - 0.5,
                                               sy * r.height - 0.5, 0.0f);
        }
    return o;
}

inline Mask8 resize_nearest(const Mask8& m, int out_size) {
    if (out_size <= 0) throw std::invalid_argument("resize: out_size must be positive");
    detail::InverseMap map(GeomTransform{}, out_size);
    Mask8 o(out_size, out_size);
    for (int oy = 0; oy < out_size; ++oy)
        for (int ox = 0; ox < out_size; ++ox) {
            double sx, sy;
            map(ox, oy, sx, sy);
            o.at(ox, oy) = detail::nearest_tap(m.values, m.width, sx * m.width - 0.5,
                                               sy * m.height - 0.5, std::uint8_t{0});
        }
    return o;
}

/// Applies one shared geometric transform to the pair and both targets, then
/// independent photometrics per image.  Out-of-canvas fill is 0 for targets
/// (no phantom change) and the band mean for images.
inline ModelSample apply_paired(const Tile& t, const GeomTransform& g, const AugSpec& spec,
                                double h_scale, Rng& rng) {
    spec.validate();
    const int out = spec.target_size;
    detail::InverseMap map(g, out);

    ModelSample s;
    s.size = out;
    s.bands = t.img1.band_count();
    s.x1 = detail::warp_image(t.img1, map, out);
    s.x2 = detail::warp_image(t.img2, map, out);
    detail::jitter_image(s.x1, s.bands, out, spec, rng);
    detail::jitter_image(s.x2, s.bands, out, spec, rng);

    s.y2d.resize(static_cast<size_t>(out) * out);
    s.y3d.resize(static_cast<size_t>(out) * out);
    for (int oy = 0; oy < out; ++oy)
        for (int ox = 0; ox < out; ++ox) {
            double sx, sy;
            map(ox, oy, sx, sy);
            const size_t i = static_cast<size_t>(oy) * out + ox;
            s.y2d[i] = detail::nearest_tap(t.mask2d.values, t.mask2d.width,
                                           sx * t.mask2d.width - 0.5, sy * t.mask2d.height - 0.5,
                                           std::uint8_t{0});
            const float dh = detail::nearest_tap(t.delta3d.values, t.delta3d.width,
                                                 sx * t.delta3d.width - 0.5,
                                                 sy * t.delta3d.height - 0.5, 0.0f);
            s.y3d[i] = normalize_delta(dh, h_scale);
        }
    return s;
}

/// The val/test path: plain resize, no jitter.  Equals apply_paired with an
/// identity transform and all augmentations disabled.
inline ModelSample plain_sample(const Tile& t, int target_size, double h_scale) {
    AugSpec off;
    off.target_size = target_size;
    off.enable_flip = off.enable_geom = off.enable_radiometric = off.enable_noise = false;
    Rng rng(0);
    return apply_paired(t, GeomTransform{}, off, h_scale, rng);
}

}  // namespace mtbit
