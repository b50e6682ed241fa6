#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtbit/metrics.hpp"
#include "mtbit/raster.hpp"
#include "mtbit/rng.hpp"
#include "mtbit/tile.hpp"

namespace mtbit {

/// Recipe for a deterministic synthetic bitemporal dataset: shaded-relief
/// renderings of procedurally built DSM pairs, with ground truth derived from
/// the exact elevation edits.
struct SynthSpec {
    std::uint64_t seed = 7;
    int n_tiles = 8;
    int buildings_min = 2, buildings_max = 6;     // persistent buildings per tile
    int footprint_min = 10, footprint_max = 40;   // rectangle side, DSM pixels
    double dh_min = -30.0, dh_max = 35.0;         // elevation-change sampling range, meters
    double change_frac_min = 0.04, change_frac_max = 0.05;
    double noise_level = 0.02;                    // per-epoch image noise sigma
    double frac_val = 0.09, frac_test = 0.23;     // remainder is train

    void validate() const {
        if (n_tiles < 1) throw std::invalid_argument("n_tiles must be >= 1");
        if (buildings_min < 0 || buildings_max < buildings_min)
            throw std::invalid_argument("building count range empty");
        if (footprint_min < 1 || footprint_max < footprint_min || footprint_max > kDsmSize)
            throw std::invalid_argument("footprint range invalid");
        if (dh_max < dh_min || dh_min < kDeltaFloor || dh_max > kDeltaCeil)
            throw std::invalid_argument("delta-h range invalid");
        if (dh_min > -kMinAbsDelta && dh_max < kMinAbsDelta)
            throw std::invalid_argument("delta-h range lies entirely below the 1 m threshold");
        if (!(change_frac_min > 0.0) || change_frac_max < change_frac_min || change_frac_max >= 1.0)
            throw std::invalid_argument("change fraction range invalid");
        if (noise_level < 0.0) throw std::invalid_argument("noise level negative");
        if (frac_val < 0.0 || frac_test < 0.0 || frac_val + frac_test >= 1.0)
            throw std::invalid_argument("split fractions invalid");
    }
};

namespace detail {

struct Rect {
    int x, y, w, h;
    bool overlaps(const Rect& o) const {
        return x < o.x + o.w && o.x < x + w && y < o.y + o.h && o.y < y + h;
    }
};

/// Uniform draw from [dh_min, dh_max] with the sub-threshold band (-1, 1)
/// excluded, weighting the two admissible intervals by their length.
inline double sample_dh(Rng& rng, double dh_min, double dh_max) {
    const bool has_neg = dh_min <= -kMinAbsDelta;
    const bool has_pos = dh_max >= kMinAbsDelta;
    const double neg_lo = dh_min, neg_hi = std::min(dh_max, -double(kMinAbsDelta));
    const double pos_lo = std::max(dh_min, double(kMinAbsDelta)), pos_hi = dh_max;
    const double len_neg = has_neg ? std::max(0.0, neg_hi - neg_lo) : 0.0;
    const double len_pos = has_pos ? std::max(0.0, pos_hi - pos_lo) : 0.0;
    if (len_neg + len_pos == 0.0) {
        if (has_neg && has_pos) return rng.bernoulli(0.5) ? neg_lo : pos_lo;
        return has_neg ? neg_lo : pos_lo;
    }
    if (rng.uniform() * (len_neg + len_pos) < len_neg) return rng.uniform(neg_lo, neg_hi);
    return rng.uniform(pos_lo, pos_hi);
}

inline std::vector<double> smooth_field(Rng& rng, int size, int waves, double amplitude) {
    std::vector<double> f(static_cast<size_t>(size) * size, 0.0);
    for (int k = 0; k < waves; ++k) {
        const double fx = rng.uniform(0.5, 3.0) * 6.283185307179586 / size;
        const double fy = rng.uniform(0.5, 3.0) * 6.283185307179586 / size;
        const double ph = rng.uniform(0.0, 6.283185307179586);
        const double amp = amplitude * rng.uniform(0.3, 1.0);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                f[static_cast<size_t>(y) * size + x] += amp * std::sin(fx * x + fy * y + ph);
    }
    return f;
}

inline double bilinear_at(const std::vector<double>& g, int size, double x, double y) {
    x = std::clamp(x, 0.0, size - 1.0);
    y = std::clamp(y, 0.0, size - 1.0);
    const int x0 = std::min(static_cast<int>(x), size - 2);
    const int y0 = std::min(static_cast<int>(y), size - 2);
    const double ax = x - x0, ay = y - y0;
    auto v = [&](int xx, int yy) { return g[static_cast<size_t>(yy) * size + xx]; };
    return (1 - ax) * (1 - ay) * v(x0, y0) + ax * (1 - ay) * v(x0 + 1, y0) +
           (1 - ax) * ay * v(x0, y0 + 1) + ax * ay * v(x0 + 1, y0 + 1);
}

/// Renders a 400x400 multi-band top view of a DSM: Lambertian shading from the
/// surface gradient plus a relative-height cue, per-band tinting, a shared
/// albedo pattern and per-epoch noise.
inline ImageF32 render_image(const std::vector<double>& dsm, int bands,
                             const std::vector<double>& albedo, double noise_level, Rng& rng) {
    const int out = kImageSize;
    std::vector<double> up(static_cast<size_t>(out) * out);
    for (int y = 0; y < out; ++y)
        for (int x = 0; x < out; ++x)
            up[static_cast<size_t>(y) * out + x] =
                bilinear_at(dsm, kDsmSize, (x + 0.5) * 0.5 - 0.5, (y + 0.5) * 0.5 - 0.5);

    double lo = up[0], hi = up[0];
    for (double v : up) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = std::max(1e-9, hi - lo);

    const double lx = -0.57735, ly = -0.57735, lz = 0.57735;
    ImageF32 img;
    img.bands.assign(static_cast<size_t>(bands), RasterF32(out, out));
    for (int y = 0; y < out; ++y) {
        for (int x = 0; x < out; ++x) {
            auto h_at = [&](int xx, int yy) {
                return up[static_cast<size_t>(std::clamp(yy, 0, out - 1)) * out +
                          std::clamp(xx, 0, out - 1)];
            };
            const double gx = (h_at(x + 1, y) - h_at(x - 1, y)) * 0.5;
            const double gy = (h_at(x, y + 1) - h_at(x, y - 1)) * 0.5;
            const double inv = 1.0 / std::sqrt(gx * gx + gy * gy + 1.0);
            const double shade = std::max(0.0, (-gx * lx - gy * ly + lz) * inv);
            const double rel = (up[static_cast<size_t>(y) * out + x] - lo) / span;
            const double alb = albedo[static_cast<size_t>(y) * out + x];
            const double base = 0.15 + 0.45 * shade + 0.25 * rel + alb;
            for (int b = 0; b < bands; ++b) {
                const double tint = 0.9 + 0.1 * b;
                const double v = base * tint + rng.normal(0.0, noise_level);
                img.bands[static_cast<size_t>(b)].at(x, y) =
                    static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return img;
}

inline Tile make_tile(const SynthSpec& spec, int tile_index) {
    Rng rng(stream_seed(spec.seed, static_cast<std::uint64_t>(tile_index)));
    Tile t;
    t.meta.tile_id = "tile_" + std::string(4 - std::min<size_t>(4, std::to_string(tile_index).size()), '0') +
                     std::to_string(tile_index);
    t.meta.bands = 3;

    // Terrain plus persistent buildings, identical in both epochs.
    std::vector<double> d1 = smooth_field(rng, kDsmSize, 4, 2.5);
    for (auto& v : d1) v += 640.0;
    const int n_buildings = static_cast<int>(rng.uniform_int(spec.buildings_min, spec.buildings_max));
    for (int b = 0; b < n_buildings; ++b) {
        const int w = static_cast<int>(rng.uniform_int(spec.footprint_min, spec.footprint_max));
        const int h = static_cast<int>(rng.uniform_int(spec.footprint_min, spec.footprint_max));
        const int x = static_cast<int>(rng.uniform_int(0, kDsmSize - w));
        const int y = static_cast<int>(rng.uniform_int(0, kDsmSize - h));
        const double height = rng.uniform(4.0, 25.0);
        for (int yy = y; yy < y + h; ++yy)
            for (int xx = x; xx < x + w; ++xx) d1[static_cast<size_t>(yy) * kDsmSize + xx] += height;
    }
    std::vector<double> d2 = d1;

    // Elevation edits: constructions raise epoch 2, demolitions raise epoch 1
    // (the structure exists only before).  Change footprints never overlap so
    // the recorded delta stays exact.
    t.delta3d = RasterF32(kDsmSize, kDsmSize, 0.0f);
    std::vector<Rect> placed;
    const std::uint64_t total_px = static_cast<std::uint64_t>(kDsmSize) * kDsmSize;
    const auto budget_lo = static_cast<std::uint64_t>(spec.change_frac_min * total_px);
    const auto budget_hi = static_cast<std::uint64_t>(spec.change_frac_max * total_px);
    std::uint64_t changed = 0;
    int stuck = 0;
    while (changed < budget_lo) {
        if (++stuck > 2000)
            throw std::runtime_error("change-fraction target unsatisfiable for " + t.meta.tile_id);
        int w = static_cast<int>(rng.uniform_int(spec.footprint_min, spec.footprint_max));
        int h = static_cast<int>(rng.uniform_int(spec.footprint_min, spec.footprint_max));
        // Shrink the proposal so the upper fraction bound cannot be crossed.
        const std::uint64_t remaining = budget_hi - changed;
        while (static_cast<std::uint64_t>(w) * h > remaining && (w > 1 || h > 1)) {
            if (h >= w)
                h = std::max(1, h - 1);
            else
                w = std::max(1, w - 1);
        }
        if (static_cast<std::uint64_t>(w) * h > remaining) break;
        Rect r{static_cast<int>(rng.uniform_int(0, kDsmSize - w)),
               static_cast<int>(rng.uniform_int(0, kDsmSize - h)), w, h};
        bool clash = false;
        for (const auto& p : placed)
            if (r.overlaps(p)) {
                clash = true;
                break;
            }
        if (clash) continue;
        const double dh = sample_dh(rng, spec.dh_min, spec.dh_max);
        for (int yy = r.y; yy < r.y + r.h; ++yy) {
            for (int xx = r.x; xx < r.x + r.w; ++xx) {
                const size_t i = static_cast<size_t>(yy) * kDsmSize + xx;
                if (dh > 0)
                    d2[i] += dh;
                else
                    d1[i] += -dh;
                t.delta3d.values[i] = static_cast<float>(dh);
            }
        }
        placed.push_back(r);
        changed += static_cast<std::uint64_t>(w) * h;
        stuck = 0;
    }

    t.dsm1 = RasterF32(kDsmSize, kDsmSize);
    t.dsm2 = RasterF32(kDsmSize, kDsmSize);
    for (size_t i = 0; i < d1.size(); ++i) {
        t.dsm1.values[i] = static_cast<float>(d1[i]);
        t.dsm2.values[i] = static_cast<float>(d2[i]);
    }

    t.mask2d = Mask8(kImageSize, kImageSize);
    for (int y = 0; y < kDsmSize; ++y)
        for (int x = 0; x < kDsmSize; ++x)
            if (t.delta3d.at(x, y) != 0.0f) {
                t.mask2d.at(2 * x, 2 * y) = 1;
                t.mask2d.at(2 * x + 1, 2 * y) = 1;
                t.mask2d.at(2 * x, 2 * y + 1) = 1;
                t.mask2d.at(2 * x + 1, 2 * y + 1) = 1;
            }

    std::vector<double> albedo_small = smooth_field(rng, kDsmSize, 3, 0.05);
    std::vector<double> albedo(static_cast<size_t>(kImageSize) * kImageSize);
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            albedo[static_cast<size_t>(y) * kImageSize + x] =
                bilinear_at(albedo_small, kDsmSize, (x + 0.5) * 0.5 - 0.5, (y + 0.5) * 0.5 - 0.5);

    Rng rng_img1(stream_seed(spec.seed, static_cast<std::uint64_t>(tile_index), 1));
    Rng rng_img2(stream_seed(spec.seed, static_cast<std::uint64_t>(tile_index), 2));
    t.img1 = render_image(d1, t.meta.bands, albedo, spec.noise_level, rng_img1);
    t.img2 = render_image(d2, t.meta.bands, albedo, spec.noise_level, rng_img2);
    return t;
}

}  // namespace detail

/// Deterministically generates `spec.n_tiles` tiles under `root` and writes a
/// manifest whose h_scale is the maximum |delta-H| produced (35 m fallback when
/// nothing changed).
inline DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& root) {
    spec.validate();
    std::filesystem::create_directories(root);

    DatasetManifest m;
    m.root = root;
    float max_abs = 0.0f;
    std::vector<std::string> ids;
    for (int i = 0; i < spec.n_tiles; ++i) {
        Tile t = detail::make_tile(spec, i);
        for (float v : t.delta3d.values) max_abs = std::max(max_abs, std::abs(v));
        save_tile(t, root);
        ids.push_back(t.meta.tile_id);
    }
    m.h_scale = max_abs > 0.0f ? static_cast<double>(max_abs) : 35.0;

    const int n = spec.n_tiles;
    int n_val = static_cast<int>(std::lround(spec.frac_val * n));
    int n_test = static_cast<int>(std::lround(spec.frac_test * n));
    if (n_val + n_test >= n) {
        n_val = std::min(n_val, std::max(0, n - 1));
        n_test = std::max(0, n - 1 - n_val);
    }
    const int n_train = n - n_val - n_test;
    m.train.assign(ids.begin(), ids.begin() + n_train);
    m.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    m.test.assign(ids.begin() + n_train + n_val, ids.end());
    m.validate();
    save_manifest(m, root);
    return m;
}

struct SplitStats {
    std::uint64_t mask_pixels = 0;
    std::uint64_t change_pixels = 0;
    Histogram delta_hist;  // zero_bin counts unchanged delta pixels

    double change_fraction() const {
        return mask_pixels == 0 ? 0.0
                                : static_cast<double>(change_pixels) / static_cast<double>(mask_pixels);
    }
};

inline std::map<std::string, SplitStats> split_stats(const DatasetManifest& m) {
    std::map<std::string, SplitStats> out;
    for (const std::string name : {"train", "val", "test"}) {
        SplitStats s;
        for (const auto& id : m.split(name)) {
            const Tile t = load_tile(m.root, id, &m);
            s.mask_pixels += t.mask2d.size();
            for (auto v : t.mask2d.values) s.change_pixels += v;
            s.delta_hist += histogram(t.delta3d.values);
        }
        out[name] = s;
    }
    return out;
}

}  // namespace mtbit
