#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mtbit/augment.hpp"
#include "mtbit/metrics.hpp"
#include "mtbit/model.hpp"
#include "mtbit/tile.hpp"

namespace mtbit {

/// Prediction for one tile at the model's working resolution: a binary change
/// mask and an elevation-change map in meters.
struct TilePrediction {
    Mask8 change;        // target_size^2
    RasterF32 delta_m;   // target_size^2, meters
    std::vector<double> scores_no, scores_yes;  // raw sigmoid scores
};

/// Runs the network on one tile (plain resize path, eval-mode normalization)
/// and converts outputs to reportable units.
inline TilePrediction predict_tile(ParamSet& ps, const Tile& tile, double h_scale) {
    const int S = ps.cfg.input_size;
    const ModelSample s = plain_sample(tile, S, h_scale);
    ad::Tape tape;
    const ForwardResult fr = forward(tape, ps, s.x1, s.x2, /*training=*/false);
    const auto& m2d = tape.val(fr.trace.m2d);  // {2, S, S}
    const auto& m3d = tape.val(fr.trace.m3d);  // {1, S, S}
    const std::size_t plane = static_cast<std::size_t>(S) * S;

    TilePrediction p;
    p.scores_no.assign(m2d.begin(), m2d.begin() + static_cast<std::ptrdiff_t>(plane));
    p.scores_yes.assign(m2d.begin() + static_cast<std::ptrdiff_t>(plane), m2d.end());
    p.change = binarize(p.scores_no, p.scores_yes, S, S);
    p.delta_m = RasterF32(S, S);
    for (std::size_t i = 0; i < plane; ++i)
        p.delta_m.values[i] = static_cast<float>(denormalize_delta(m3d[i], h_scale));
    return p;
}

/// Evaluates one split at the model resolution: micro-averaged F1/IoU against
/// the nearest-resized mask, RMSE/cRMSE in meters against the nearest-resized
/// elevation change. When histogram pointers are given, the ground-truth and
/// predicted elevation changes of the whole split are binned into them.
inline MetricReport evaluate_split(const DatasetManifest& m, const std::string& split_name,
                                   ParamSet& ps, Histogram* gt_hist = nullptr,
                                   Histogram* pred_hist = nullptr) {
    const int S = ps.cfg.input_size;
    std::vector<TileMetrics> per_tile;
    for (const auto& id : m.split(split_name)) {
        const Tile tile = load_tile(m.root, id, &m);
        const ModelSample s = plain_sample(tile, S, m.h_scale);
        const TilePrediction pred = predict_tile(ps, tile, m.h_scale);

        TileMetrics tm;
        tm.tile_id = id;
        Mask8 gt(S, S);
        for (std::size_t i = 0; i < gt.values.size(); ++i) gt.values[i] = s.y2d[i];
        tm.conf = confusion(pred.change, gt);
        std::vector<double> gt_m(s.y3d.size());
        for (std::size_t i = 0; i < s.y3d.size(); ++i) {
            gt_m[i] = denormalize_delta(s.y3d[i], m.h_scale);
            tm.err.add(static_cast<double>(pred.delta_m.values[i]), gt_m[i]);
        }
        if (gt_hist) *gt_hist += histogram(gt_m);
        if (pred_hist) *pred_hist += histogram(pred.delta_m.values);
        per_tile.push_back(std::move(tm));
    }
    return micro_average(std::move(per_tile));
}

/// Writes the tokenizer attention map of each token as an R32F raster
/// (`attn_e<epoch>_t<l>.r32`). Each raster is a softmax over the feature grid
/// and sums to 1. Returns the written paths in token order.
inline std::vector<std::filesystem::path> export_attention_maps(const ad::Tape& tape,
                                                                const ForwardTrace& trace,
                                                                const ModelConfig& cfg,
                                                                const std::filesystem::path& dir,
                                                                int epoch = 1) {
    if (epoch != 1 && epoch != 2) throw std::invalid_argument("epoch must be 1 or 2");
    const int attn = epoch == 1 ? trace.attn1 : trace.attn2;
    if (attn < 0) throw std::runtime_error("forward trace has no attention maps");
    const int f = cfg.feat_size();
    const auto& a = tape.val(attn);  // {L, f*f}, rows sum to 1
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> paths;
    for (int l = 0; l < cfg.token_len; ++l) {
        RasterF32 r(f, f);
        for (int i = 0; i < f * f; ++i)
            r.values[static_cast<std::size_t>(i)] =
                static_cast<float>(a[static_cast<std::size_t>(l) * (f * f) + i]);
        const auto path =
            dir / ("attn_e" + std::to_string(epoch) + "_t" + std::to_string(l) + ".r32");
        write_raster(r, path);
        paths.push_back(path);
    }
    return paths;
}

}  // namespace mtbit
