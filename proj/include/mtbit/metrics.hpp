#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtbit/raster.hpp"

namespace mtbit {

struct Confusion {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    Confusion& operator+=(const Confusion& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

/// Per-pixel argmax over the two change scores; ties resolve to no-change.
inline Mask8 binarize(const std::vector<double>& scores_no, const std::vector<double>& scores_yes,
                      int width, int height) {
    if (scores_no.size() != scores_yes.size() ||
        scores_no.size() != static_cast<size_t>(width) * height)
        throw std::invalid_argument("binarize: score plane size mismatch");
    Mask8 out(width, height);
    for (size_t i = 0; i < scores_no.size(); ++i)
        out.values[i] = scores_yes[i] > scores_no[i] ? 1 : 0;
    return out;
}

inline Confusion confusion(const Mask8& pred, const Mask8& gt) {
    if (pred.width != gt.width || pred.height != gt.height)
        throw std::invalid_argument("confusion: size mismatch");
    Confusion c;
    for (size_t i = 0; i < pred.values.size(); ++i) {
        const bool p = pred.values[i] != 0;
        const bool g = gt.values[i] != 0;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

// IoU = TP / (TP+FN+FP), F1 = 2TP / (2TP+FP+FN).  A confusion with no change
// pixels on either side counts as perfect agreement.
inline double iou(const Confusion& c) {
    const std::uint64_t denom = c.tp + c.fn + c.fp;
    if (denom == 0) return 1.0;
    return static_cast<double>(c.tp) / static_cast<double>(denom);
}

inline double f1(const Confusion& c) {
    const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
    if (denom == 0) return 1.0;
    return static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

struct SquaredErrorAccum {
    double sum_sq_all = 0.0;
    double sum_sq_changed = 0.0;
    std::uint64_t n = 0;
    std::uint64_t n_changed = 0;

    void add(double pred_m, double gt_m) {
        const double d = pred_m - gt_m;
        sum_sq_all += d * d;
        ++n;
        if (gt_m != 0.0) {
            sum_sq_changed += d * d;
            ++n_changed;
        }
    }
    SquaredErrorAccum& operator+=(const SquaredErrorAccum& o) {
        sum_sq_all += o.sum_sq_all;
        sum_sq_changed += o.sum_sq_changed;
        n += o.n;
        n_changed += o.n_changed;
        return *this;
    }
    double rmse() const { return n == 0 ? 0.0 : std::sqrt(sum_sq_all / static_cast<double>(n)); }
    std::optional<double> crmse() const {
        if (n_changed == 0) return std::nullopt;
        return std::sqrt(sum_sq_changed / static_cast<double>(n_changed));
    }
};

/// RMSE over all pixels, in meters.  Inputs must already be denormalized.
inline double rmse(const std::vector<double>& pred_m, const std::vector<double>& gt_m) {
    if (pred_m.size() != gt_m.size()) throw std::invalid_argument("rmse: size mismatch");
    SquaredErrorAccum acc;
    for (size_t i = 0; i < pred_m.size(); ++i) acc.add(pred_m[i], gt_m[i]);
    return acc.rmse();
}

/// RMSE restricted to pixels with nonzero ground-truth change; absent when the
/// ground truth has no changed pixels.
inline std::optional<double> crmse(const std::vector<double>& pred_m,
                                   const std::vector<double>& gt_m) {
    if (pred_m.size() != gt_m.size()) throw std::invalid_argument("crmse: size mismatch");
    SquaredErrorAccum acc;
    for (size_t i = 0; i < pred_m.size(); ++i) acc.add(pred_m[i], gt_m[i]);
    return acc.crmse();
}

// --- elevation-change histogram ----------------------------------------------

struct Histogram {
    // 1 m bins spanning [-30, 35) plus a dedicated bin for exact zeros, so the
    // change/no-change mass stays distinguishable.
    static constexpr int kLo = -30;
    static constexpr int kHi = 35;
    std::vector<std::uint64_t> bins = std::vector<std::uint64_t>(kHi - kLo, 0);
    std::uint64_t zero_bin = 0;

    std::uint64_t total() const {
        std::uint64_t t = zero_bin;
        for (auto b : bins) t += b;
        return t;
    }
    Histogram& operator+=(const Histogram& o) {
        for (size_t i = 0; i < bins.size(); ++i) bins[i] += o.bins[i];
        zero_bin += o.zero_bin;
        return *this;
    }
};

template <typename ValueRange>
inline Histogram histogram(const ValueRange& values) {
    Histogram h;
    for (double v : values) {
        if (!std::isfinite(v)) throw std::invalid_argument("histogram: non-finite value");
        if (v == 0.0) {
            ++h.zero_bin;
            continue;
        }
        int bin = static_cast<int>(std::floor(v)) - Histogram::kLo;
        bin = std::max(0, std::min(static_cast<int>(h.bins.size()) - 1, bin));
        ++h.bins[static_cast<size_t>(bin)];
    }
    return h;
}

/// CSV rows: bin_left, bin_right, count_gt, count_pred.  The zero bin is the
/// degenerate row with bin_left == bin_right == 0.
inline void write_histogram_csv(const Histogram& gt, const Histogram& pred,
                                const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write histogram csv " + path.string());
    out << "bin_left,bin_right,count_gt,count_pred\n";
    out << "0,0," << gt.zero_bin << "," << pred.zero_bin << "\n";
    for (size_t i = 0; i < gt.bins.size(); ++i) {
        const int left = Histogram::kLo + static_cast<int>(i);
        out << left << "," << left + 1 << "," << gt.bins[i] << "," << pred.bins[i] << "\n";
    }
}

// --- split-level report -------------------------------------------------------

struct TileMetrics {
    std::string tile_id;
    Confusion conf;
    SquaredErrorAccum err;
};

struct MetricReport {
    double f1 = 0.0;
    double iou = 0.0;
    double rmse_m = 0.0;
    std::optional<double> crmse_m;
    std::uint64_t n = 0;
    std::uint64_t n_changed = 0;
    Confusion conf;
    std::vector<TileMetrics> per_tile;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["f1"] = f1;
        j["iou"] = iou;
        j["rmse_m"] = rmse_m;
        if (crmse_m)
            j["crmse_m"] = *crmse_m;
        else
            j["crmse_m"] = nullptr;
        j["pixels"] = n;
        j["changed_pixels"] = n_changed;
        j["confusion"] = {{"tp", conf.tp}, {"fp", conf.fp}, {"fn", conf.fn}, {"tn", conf.tn}};
        auto& tiles = j["tiles"] = nlohmann::json::array();
        for (const auto& t : per_tile) {
            nlohmann::json r;
            r["tile_id"] = t.tile_id;
            r["f1"] = mtbit::f1(t.conf);
            r["iou"] = mtbit::iou(t.conf);
            r["rmse_m"] = t.err.rmse();
            auto c = t.err.crmse();
            if (c)
                r["crmse_m"] = *c;
            else
                r["crmse_m"] = nullptr;
            tiles.push_back(std::move(r));
        }
        return j;
    }
};

/// Pools per-tile confusion counts and squared errors before computing the
/// ratio metrics (micro-averaging).
inline MetricReport micro_average(std::vector<TileMetrics> per_tile) {
    MetricReport rep;
    for (const auto& t : per_tile) {
        rep.conf += t.conf;
        rep.n += t.err.n;
        rep.n_changed += t.err.n_changed;
    }
    SquaredErrorAccum pooled;
    for (const auto& t : per_tile) pooled += t.err;
    rep.f1 = f1(rep.conf);
    rep.iou = iou(rep.conf);
    rep.rmse_m = pooled.rmse();
    rep.crmse_m = pooled.crmse();
    rep.per_tile = std::move(per_tile);
    return rep;
}

}  // namespace mtbit
