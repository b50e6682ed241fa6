#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbit/raster.hpp"

namespace mtbit {

// Dataset schema constants: image/mask grids are 400x400 at 0.5 m GSD,
// DSM / elevation-difference grids 200x200 at 1.0 m GSD.  Elevation changes
// below one meter in magnitude are defined away as no-change.
inline constexpr int kImageSize = 400;
inline constexpr int kDsmSize = 200;
inline constexpr double kGsdImage = 0.5;
inline constexpr double kGsdDsm = 1.0;
inline constexpr float kMinAbsDelta = 1.0f;
inline constexpr float kDeltaFloor = -30.0f;
inline constexpr float kDeltaCeil = 35.0f;

struct TileMeta {
    std::string tile_id;
    double gsd_image = kGsdImage;
    double gsd_dsm = kGsdDsm;
    int bands = 3;
    int epoch_1 = 2010;
    int epoch_2 = 2017;
};

struct Tile {
    TileMeta meta;
    ImageF32 img1, img2;
    RasterF32 dsm1, dsm2;
    Mask8 mask2d;
    RasterF32 delta3d;
};

struct Violation {
    std::string code;
    std::string message;
    bool warning = false;
};

inline bool has_errors(const std::vector<Violation>& vs) {
    return std::any_of(vs.begin(), vs.end(), [](const Violation& v) { return !v.warning; });
}

/// Checks a tile against the dataset schema.  In non-strict mode the
/// mask / delta consistency requirement is reported as a warning only, since
/// imported survey data can disagree at footprint edges after resampling.
inline std::vector<Violation> validate_tile(const Tile& t, bool strict = true) {
    std::vector<Violation> out;
    auto bad = [&](std::string code, std::string msg) {
        out.push_back({std::move(code), std::move(msg), false});
    };

    if (t.meta.bands < 1) bad("bands", "band count must be >= 1");
    if (t.img1.band_count() != t.meta.bands || t.img2.band_count() != t.meta.bands)
        bad("bands", "image band count does not match metadata");
    if (t.meta.gsd_image <= 0 || std::abs(t.meta.gsd_dsm - 2.0 * t.meta.gsd_image) > 1e-9)
        bad("gsd", "DSM GSD must be exactly twice the image GSD");

    auto check_size = [&](int w, int h, int want, const char* what) {
        if (w != want || h != want)
            bad("size", std::string(what) + " is " + std::to_string(w) + "x" + std::to_string(h) +
                            ", expected " + std::to_string(want) + "x" + std::to_string(want));
    };
    for (const auto* img : {&t.img1, &t.img2}) {
        check_size(img->width(), img->height(), kImageSize, "image");
        for (const auto& b : img->bands)
            if (!b.finite()) bad("finite", "non-finite image band value");
    }
    check_size(t.dsm1.width, t.dsm1.height, kDsmSize, "dsm1");
    check_size(t.dsm2.width, t.dsm2.height, kDsmSize, "dsm2");
    check_size(t.mask2d.width, t.mask2d.height, kImageSize, "mask2d");
    check_size(t.delta3d.width, t.delta3d.height, kDsmSize, "delta3d");
    if (!t.dsm1.finite() || !t.dsm2.finite()) bad("finite", "non-finite DSM value");
    if (!t.delta3d.finite()) bad("finite", "non-finite delta3d value");
    if (!t.mask2d.binary()) bad("mask", "mask2d contains values outside {0,1}");

    for (float v : t.delta3d.values) {
        if (v < kDeltaFloor || v > kDeltaCeil) {
            bad("delta-range", "delta3d value " + std::to_string(v) + " outside [-30, 35]");
            break;
        }
    }
    for (float v : t.delta3d.values) {
        if (v != 0.0f && std::abs(v) < kMinAbsDelta) {
            bad("sub-threshold", "sub-threshold delta3d value " + std::to_string(v) +
                                     " in (-1, 0) U (0, 1)");
            break;
        }
    }

    // Every delta pixel corresponds to a 2x2 mask block; the block must flag
    // change exactly when the elevation difference is nonzero.
    if (t.delta3d.width == kDsmSize && t.delta3d.height == kDsmSize &&
        t.mask2d.width == kImageSize && t.mask2d.height == kImageSize) {
        int mismatches = 0;
        for (int y = 0; y < kDsmSize; ++y) {
            for (int x = 0; x < kDsmSize; ++x) {
                const bool changed = t.delta3d.at(x, y) != 0.0f;
                const bool flagged = t.mask2d.at(2 * x, 2 * y) || t.mask2d.at(2 * x + 1, 2 * y) ||
                                     t.mask2d.at(2 * x, 2 * y + 1) ||
                                     t.mask2d.at(2 * x + 1, 2 * y + 1);
                if (changed != flagged) ++mismatches;
            }
        }
        if (mismatches > 0)
            out.push_back({"mask-delta",
                           "mask2d/delta3d disagree on " + std::to_string(mismatches) + " blocks",
                           !strict});
    }
    return out;
}

// --- elevation-change normalization -----------------------------------------

/// Maps meters into the tanh output range by symmetric division, so that zero
/// change stays exactly at zero.
inline double normalize_delta(double v, double h_scale) {
    if (h_scale <= 0) throw std::invalid_argument("h_scale must be positive");
    if (std::abs(v) > h_scale)
        throw std::out_of_range("delta " + std::to_string(v) + " exceeds h_scale " +
                                std::to_string(h_scale));
    return v / h_scale;
}

inline double denormalize_delta(double u, double h_scale) {
    if (h_scale <= 0) throw std::invalid_argument("h_scale must be positive");
    return u * h_scale;
}

// --- manifest ----------------------------------------------------------------

struct DatasetManifest {
    std::filesystem::path root;  // directory containing the manifest, not serialized
    int format_version = 1;
    double h_scale = 35.0;
    double gsd_image = kGsdImage;
    double gsd_dsm = kGsdDsm;
    std::vector<std::string> train, val, test;

    const std::vector<std::string>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw std::invalid_argument("unknown split: " + name);
    }

    void validate() const {
        if (h_scale <= 0) throw std::runtime_error("manifest h_scale must be positive");
        std::set<std::string> seen;
        for (const auto* split : {&train, &val, &test})
            for (const auto& id : *split)
                if (!seen.insert(id).second)
                    throw std::runtime_error("tile id " + id + " appears in multiple splits");
    }
};

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
    nlohmann::json j;
    j["format_version"] = m.format_version;
    j["h_scale"] = m.h_scale;
    j["gsd_image"] = m.gsd_image;
    j["gsd_dsm"] = m.gsd_dsm;
    j["splits"]["train"] = m.train;
    j["splits"]["val"] = m.val;
    j["splits"]["test"] = m.test;
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    out << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    if (!in) throw std::runtime_error("cannot open manifest in " + dir.string());
    nlohmann::json j = nlohmann::json::parse(in);
    DatasetManifest m;
    m.root = dir;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1)
        throw std::runtime_error("unsupported manifest format_version " +
                                 std::to_string(m.format_version));
    m.h_scale = j.at("h_scale").get<double>();
    m.gsd_image = j.at("gsd_image").get<double>();
    m.gsd_dsm = j.at("gsd_dsm").get<double>();
    m.train = j.at("splits").at("train").get<std::vector<std::string>>();
    m.val = j.at("splits").at("val").get<std::vector<std::string>>();
    m.test = j.at("splits").at("test").get<std::vector<std::string>>();
    m.validate();
    return m;
}

// --- tile directory layout ----------------------------------------------------
// <root>/<tile_id>/{t1.img, t2.img, dsm1.r32, dsm2.r32, mask2d.msk, delta3d.r32}

inline void save_tile(const Tile& t, const std::filesystem::path& root) {
    const auto dir = root / t.meta.tile_id;
    std::filesystem::create_directories(dir);
    write_image(t.img1, dir / "t1.img");
    write_image(t.img2, dir / "t2.img");
    write_raster(t.dsm1, dir / "dsm1.r32");
    write_raster(t.dsm2, dir / "dsm2.r32");
    write_raster(t.mask2d, dir / "mask2d.msk");
    write_raster(t.delta3d, dir / "delta3d.r32");
}

inline Tile load_tile(const std::filesystem::path& root, const std::string& tile_id,
                      const DatasetManifest* manifest = nullptr) {
    const auto dir = root / tile_id;
    Tile t;
    t.meta.tile_id = tile_id;
    if (manifest) {
        t.meta.gsd_image = manifest->gsd_image;
        t.meta.gsd_dsm = manifest->gsd_dsm;
    }
    t.img1 = read_image(dir / "t1.img");
    t.img2 = read_image(dir / "t2.img");
    t.meta.bands = t.img1.band_count();
    t.dsm1 = read_raster(dir / "dsm1.r32");
    t.dsm2 = read_raster(dir / "dsm2.r32");
    t.mask2d = read_mask(dir / "mask2d.msk");
    t.delta3d = read_raster(dir / "delta3d.r32");
    return t;
}

}  // namespace mtbit
