#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtbit/augment.hpp"
#include "mtbit/checkpoint.hpp"
#include "mtbit/eval.hpp"
#include "mtbit/loss.hpp"
#include "mtbit/optim.hpp"
#include "mtbit/synth.hpp"

namespace mtbit {

struct EpochLog {
    int epoch = 0;
    LossBreakdown train_loss;
    MetricReport val;
};

struct TrainCallbacks {
    std::function<void(int step, const LossBreakdown&)> on_step;
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
    Checkpoint final;
    std::vector<EpochLog> log;
};

namespace detail {

/// Lazily loads tiles and keeps them in memory; training revisits every tile
/// each epoch and re-reading rasters from disk would dominate the step time.
class TileCache {
  public:
    explicit TileCache(const DatasetManifest& m) : manifest_(m) {}
    const Tile& get(const std::string& id) {
        auto it = cache_.find(id);
        if (it == cache_.end())
            it = cache_.emplace(id, load_tile(manifest_.root, id, &manifest_)).first;
        return it->second;
    }

  private:
    const DatasetManifest& manifest_;
    std::unordered_map<std::string, Tile> cache_;
};

inline void write_log_row(std::ofstream& out, const EpochLog& e) {
    out << e.epoch << ',' << std::setprecision(10) << e.train_loss.l2d << ','
        << e.train_loss.l3d << ',' << e.train_loss.total << ',' << e.val.f1 << ',' << e.val.iou
        << ',' << e.val.rmse_m << ',';
    if (e.val.crmse_m) out << *e.val.crmse_m;
    out << '\n';
    out.flush();
}

}  // namespace detail

/// The full optimization loop: per-epoch shuffling with the run seed,
/// counter-based augmentation streams per (tile, epoch), fixed-order batch
/// gradients, validation metrics after every epoch, periodic checkpoints.
/// Identical seed and data give byte-identical final checkpoints; a resumed
/// run replays the uninterrupted one exactly.
inline TrainResult train_loop(const DatasetManifest& manifest, const ModelConfig& mcfg,
                              const TrainConfig& tc, const std::filesystem::path& out_dir,
                              const TrainCallbacks& cb = {},
                              const Checkpoint* resume = nullptr) {
    mcfg.validate();
    tc.validate();
    if (manifest.train.empty()) throw std::runtime_error("train split is empty");
    if (tc.aug.target_size != mcfg.input_size)
        throw std::runtime_error("augment target_size must equal the model input_size");
    std::filesystem::create_directories(out_dir);

    ParamSet ps(mcfg);
    OptState st(ps.layout.n_params);
    Rng rng(stream_seed(tc.seed, "train_loop"));
    std::int64_t start_epoch = 0, start_step = 0;
    std::vector<std::uint64_t> perm;

    if (resume) {
        if (!(resume->model_cfg == mcfg))
            throw std::runtime_error("resume checkpoint was written for a different model config");
        restore_state(*resume, ps, st);
        rng.set_state(resume->rng_state);
        start_epoch = resume->epoch;
        start_step = resume->step_in_epoch;
        perm = resume->permutation;
    } else {
        ps.init(tc.seed);
    }

    const auto& train_ids = manifest.train;
    const std::int64_t n_train = static_cast<std::int64_t>(train_ids.size());
    const std::int64_t batches_per_epoch = (n_train + tc.batch_size - 1) / tc.batch_size;
    detail::TileCache cache(manifest);

    std::ofstream log_csv(out_dir / "train_log.csv",
                          std::ios::binary | (resume ? std::ios::app : std::ios::trunc));
    if (!log_csv) throw std::runtime_error("cannot open train log in " + out_dir.string());
    if (!resume) log_csv << "epoch,l2d,l3d,total,F1,IoU,RMSE,cRMSE\n";

    auto make_ckpt = [&](std::int64_t next_epoch, std::int64_t next_step,
                         std::vector<std::uint64_t> p) {
        Checkpoint c;
        c.model_cfg = mcfg;
        c.train_cfg = tc;
        c.params = ps.data;
        c.buffers = ps.buffers;
        c.opt_m = st.m;
        c.opt_v = st.v;
        c.opt_step = st.step;
        c.rng_state = rng.state();
        c.epoch = next_epoch;
        c.step_in_epoch = next_step;
        c.permutation = std::move(p);
        c.h_scale = manifest.h_scale;
        return c;
    };

    TrainResult result;
    std::int64_t epoch = start_epoch;
    bool stopped_mid_epoch = false;
    for (; epoch < tc.epochs; ++epoch) {
        std::int64_t batch0 = 0;
        if (epoch == start_epoch && start_step > 0 && !perm.empty()) {
            batch0 = start_step;  // continue the interrupted epoch with its stored shuffle
        } else {
            perm.resize(static_cast<std::size_t>(n_train));
            for (std::int64_t i = 0; i < n_train; ++i)
                perm[static_cast<std::size_t>(i)] = static_cast<std::uint64_t>(i);
            for (std::int64_t i = n_train - 1; i > 0; --i) {
                const auto j = rng.uniform_int(0, i);
                std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
            }
        }

        LossBreakdown epoch_loss;
        std::int64_t steps_this_epoch = 0;
        std::int64_t b = batch0;
        for (; b < batches_per_epoch; ++b) {
            if (tc.max_steps > 0 && st.step >= tc.max_steps) {
                stopped_mid_epoch = true;
                break;
            }
            const std::int64_t lo = b * tc.batch_size;
            const std::int64_t hi = std::min(n_train, lo + tc.batch_size);
            std::vector<ModelSample> batch;
            batch.reserve(static_cast<std::size_t>(hi - lo));
            for (std::int64_t i = lo; i < hi; ++i) {
                const std::string& id = train_ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
                Rng aug_rng(stream_seed(tc.seed, fnv1a64(id), static_cast<std::uint64_t>(epoch)));
                const GeomTransform g = sample_transform(tc.aug, aug_rng);
                batch.push_back(apply_paired(cache.get(id), g, tc.aug, manifest.h_scale, aug_rng));
            }
            const LossBreakdown lb = train_step(ps, st, batch, tc);
            epoch_loss += lb;
            ++steps_this_epoch;
            if (cb.on_step) cb.on_step(static_cast<int>(st.step), lb);
        }
        if (stopped_mid_epoch) {
            // Preserve the loop position so a resumed run finishes this epoch.
            result.final = make_ckpt(epoch, b, perm);
            break;
        }

        EpochLog el;
        el.epoch = static_cast<int>(epoch);
        el.train_loss = epoch_loss;
        if (steps_this_epoch > 0) el.train_loss /= static_cast<double>(steps_this_epoch);
        el.val = evaluate_split(manifest, "val", ps);
        detail::write_log_row(log_csv, el);
        if (cb.on_epoch) cb.on_epoch(el);
        result.log.push_back(std::move(el));

        if (tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 &&
            epoch + 1 < tc.epochs) {
            const Checkpoint c = make_ckpt(epoch + 1, 0, {});
            save_checkpoint(c, out_dir / ("ckpt_epoch_" + std::to_string(epoch + 1) + ".ckpt"));
        }
    }
    if (!stopped_mid_epoch) result.final = make_ckpt(tc.epochs, 0, {});
    save_checkpoint(result.final, out_dir / "checkpoint_final.ckpt");
    return result;
}

}  // namespace mtbit
