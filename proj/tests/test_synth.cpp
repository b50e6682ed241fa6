#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "mtbit/synth.hpp"
#include "test_util.hpp"

using namespace mtbit;
using testutil::fresh_dir;

namespace {

/// Small spec used for file-level tests so each case stays well under a second.
SynthSpec quick_spec() {
    SynthSpec s;
    s.seed = 42;
    s.n_tiles = 3;
    s.frac_val = 0.0;
    s.frac_test = 0.34;  // rounds to one test tile out of three
    return s;
}

std::uint64_t count_nonzero(const RasterF32& r) {
    std::uint64_t n = 0;
    for (float v : r.values)
        if (v != 0.0f) ++n;
    return n;
}

}  // namespace

TEST_CASE("spec validation rejects inconsistent ranges", "[synth]") {
    CHECK_NOTHROW(SynthSpec{}.validate());

    auto broken = [](auto mutate) {
        SynthSpec s;
        mutate(s);
        return s;
    };
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.n_tiles = 0; }).validate(), std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.buildings_max = s.buildings_min - 1; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.footprint_min = 0; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.footprint_max = kDsmSize + 1; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.dh_min = -31.0; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.dh_max = 36.0; }).validate(), std::invalid_argument);
    // A range living entirely inside the sub-threshold band cannot be sampled.
    CHECK_THROWS_AS(broken([](SynthSpec& s) {
                        s.dh_min = -0.5;
                        s.dh_max = 0.5;
                    }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.change_frac_min = 0.0; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.change_frac_max = 1.0; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) { s.noise_level = -0.1; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](SynthSpec& s) {
                        s.frac_val = 0.6;
                        s.frac_test = 0.5;
                    }).validate(),
                    std::invalid_argument);
}

TEST_CASE("sampled elevation changes avoid the sub-threshold band", "[synth]") {
    Rng rng(123);
    bool saw_neg = false, saw_pos = false;
    for (int i = 0; i < 4000; ++i) {
        const double dh = detail::sample_dh(rng, -30.0, 35.0);
        REQUIRE(dh >= -30.0);
        REQUIRE(dh <= 35.0);
        REQUIRE(std::abs(dh) >= 1.0);
        (dh < 0 ? saw_neg : saw_pos) = true;
    }
    CHECK(saw_neg);
    CHECK(saw_pos);

    // One-sided ranges stay one-sided.
    for (int i = 0; i < 200; ++i) {
        const double dh = detail::sample_dh(rng, 2.0, 8.0);
        CHECK(dh >= 2.0);
        CHECK(dh <= 8.0);
    }
    // Degenerate range collapses to its endpoint.
    CHECK(detail::sample_dh(rng, 5.0, 5.0) == 5.0);
    CHECK(detail::sample_dh(rng, -3.0, -3.0) == -3.0);
}

TEST_CASE("generated tiles satisfy the schema strictly", "[synth]") {
    const SynthSpec spec = quick_spec();
    for (int i = 0; i < spec.n_tiles; ++i) {
        const Tile t = detail::make_tile(spec, i);
        const auto vs = validate_tile(t, true);
        for (const auto& v : vs) UNSCOPED_INFO(v.code << ": " << v.message);
        CHECK(vs.empty());

        // Image bands land in [0, 1] reflectance.
        for (const auto* img : {&t.img1, &t.img2})
            for (const auto& b : img->bands)
                for (float x : b.values) {
                    REQUIRE(x >= 0.0f);
                    REQUIRE(x <= 1.0f);
                }
    }
}

TEST_CASE("per-tile change fraction lands inside the requested window", "[synth]") {
    const SynthSpec spec = quick_spec();
    const auto total = static_cast<std::uint64_t>(kDsmSize) * kDsmSize;
    const auto lo = static_cast<std::uint64_t>(spec.change_frac_min * total);
    const auto hi = static_cast<std::uint64_t>(spec.change_frac_max * total);
    for (int i = 0; i < spec.n_tiles; ++i) {
        const Tile t = detail::make_tile(spec, i);
        const std::uint64_t changed = count_nonzero(t.delta3d);
        CHECK(changed >= lo);
        CHECK(changed <= hi);
        // The full-resolution mask covers exactly four pixels per changed
        // delta pixel (footprints replicate into 2x2 blocks).
        std::uint64_t mask_on = 0;
        for (auto v : t.mask2d.values) mask_on += v;
        CHECK(mask_on == 4 * changed);
    }
}

TEST_CASE("delta equals the epoch DSM difference", "[synth]") {
    const Tile t = detail::make_tile(quick_spec(), 0);
    // DSM heights live near 640 m, so float rounding of the difference can
    // reach a few 1e-4 m; the recorded delta stores the exact edit instead.
    for (size_t i = 0; i < t.delta3d.values.size(); ++i) {
        const double diff =
            static_cast<double>(t.dsm2.values[i]) - static_cast<double>(t.dsm1.values[i]);
        CHECK(std::abs(diff - t.delta3d.values[i]) < 1e-3);
    }
    // Changes come in both construction and demolition flavors over the tiles.
    for (float v : t.delta3d.values)
        if (v != 0.0f) CHECK(std::abs(v) >= 1.0f);
}

TEST_CASE("generation is deterministic in the seed", "[synth]") {
    const auto dir_a = fresh_dir("synth_a");
    const auto dir_b = fresh_dir("synth_b");
    const SynthSpec spec = quick_spec();
    const DatasetManifest ma = generate_synthetic(spec, dir_a);
    const DatasetManifest mb = generate_synthetic(spec, dir_b);

    REQUIRE(ma.train == mb.train);
    REQUIRE(ma.val == mb.val);
    REQUIRE(ma.test == mb.test);
    CHECK(ma.h_scale == mb.h_scale);

    std::vector<std::string> all = ma.train;
    all.insert(all.end(), ma.val.begin(), ma.val.end());
    all.insert(all.end(), ma.test.begin(), ma.test.end());
    for (const auto& id : all)
        for (const char* name :
             {"t1.img", "t2.img", "dsm1.r32", "dsm2.r32", "mask2d.msk", "delta3d.r32"}) {
            const auto ba = detail::read_file_bytes(dir_a / id / name);
            const auto bb = detail::read_file_bytes(dir_b / id / name);
            CHECK(ba == bb);
        }

    // A different seed changes the pixels.
    SynthSpec other = spec;
    other.seed = 43;
    const auto dir_c = fresh_dir("synth_c");
    generate_synthetic(other, dir_c);
    CHECK(detail::read_file_bytes(dir_a / all[0] / "delta3d.r32") !=
          detail::read_file_bytes(dir_c / all[0] / "delta3d.r32"));

    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
    std::filesystem::remove_all(dir_c);
}

TEST_CASE("manifest splits partition the tiles and h_scale tracks the max change", "[synth]") {
    const auto dir = fresh_dir("synth_manifest");
    const SynthSpec spec = quick_spec();
    const DatasetManifest m = generate_synthetic(spec, dir);

    CHECK(m.train.size() + m.val.size() + m.test.size() == static_cast<size_t>(spec.n_tiles));
    CHECK(m.train.size() == 2);
    CHECK(m.val.empty());
    CHECK(m.test.size() == 1);
    std::set<std::string> ids(m.train.begin(), m.train.end());
    ids.insert(m.val.begin(), m.val.end());
    ids.insert(m.test.begin(), m.test.end());
    CHECK(ids.size() == static_cast<size_t>(spec.n_tiles));

    float max_abs = 0.0f;
    for (const auto& id : ids) {
        const Tile t = load_tile(dir, id, &m);
        for (float v : t.delta3d.values) max_abs = std::max(max_abs, std::abs(v));
    }
    CHECK(m.h_scale == static_cast<double>(max_abs));
    CHECK(m.h_scale >= 1.0);
    CHECK(m.h_scale <= 35.0);

    // Reload from disk round trips the split assignment.
    const DatasetManifest back = load_manifest(dir);
    CHECK(back.train == m.train);
    CHECK(back.val == m.val);
    CHECK(back.test == m.test);
    CHECK(back.h_scale == m.h_scale);
    std::filesystem::remove_all(dir);
}

TEST_CASE("split statistics add up", "[synth]") {
    const auto dir = fresh_dir("synth_stats");
    const SynthSpec spec = quick_spec();
    const DatasetManifest m = generate_synthetic(spec, dir);
    const auto stats = split_stats(m);

    const auto img_px = static_cast<std::uint64_t>(kImageSize) * kImageSize;
    const auto dsm_px = static_cast<std::uint64_t>(kDsmSize) * kDsmSize;
    std::uint64_t mask_total = 0, hist_total = 0;
    for (const auto& name : {"train", "val", "test"}) {
        const SplitStats& s = stats.at(name);
        const auto n = m.split(name).size();
        CHECK(s.mask_pixels == n * img_px);
        CHECK(s.delta_hist.total() == n * dsm_px);
        // Change fraction at mask resolution equals the delta-pixel fraction.
        if (n > 0) {
            CHECK(s.change_fraction() >= spec.change_frac_min - 1e-4);
            CHECK(s.change_fraction() <= spec.change_frac_max + 1e-4);
            CHECK(s.delta_hist.zero_bin == n * dsm_px - s.change_pixels / 4);
        } else {
            CHECK(s.change_fraction() == 0.0);
        }
        mask_total += s.mask_pixels;
        hist_total += s.delta_hist.total();
    }
    CHECK(mask_total == static_cast<std::uint64_t>(spec.n_tiles) * img_px);
    CHECK(hist_total == static_cast<std::uint64_t>(spec.n_tiles) * dsm_px);
    std::filesystem::remove_all(dir);
}
