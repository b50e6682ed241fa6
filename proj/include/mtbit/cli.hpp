#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtbit/checkpoint.hpp"
#include "mtbit/config_io.hpp"
#include "mtbit/eval.hpp"
#include "mtbit/gradcheck.hpp"
#include "mtbit/synth.hpp"
#include "mtbit/tile.hpp"
#include "mtbit/trainer.hpp"

namespace mtbit {

namespace detail {

/// Writes the fully resolved configuration next to the run's artifacts so any
/// result directory documents exactly how it was produced.
inline void echo_config(const RunConfig& rc, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir / "effective_config.json", std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("cannot write effective_config.json in " + out_dir.string());
    out << to_json(rc).dump(2) << "\n";
}

inline std::string fmt_metrics(const MetricReport& r) {
    std::ostringstream os;
    os << std::setprecision(6) << "F1=" << r.f1 << " IoU=" << r.iou << " RMSE=" << r.rmse_m
       << " m cRMSE=";
    if (r.crmse_m)
        os << *r.crmse_m << " m";
    else
        os << "n/a";
    os << " (" << r.n << " px, " << r.n_changed << " changed)";
    return os.str();
}

/// Loads a checkpoint and rebuilds the parameter set (and optimizer state)
/// it describes.
struct LoadedModel {
    Checkpoint ckpt;
    ParamSet ps;
    OptState st;

    explicit LoadedModel(const std::filesystem::path& path)
        : ckpt(load_checkpoint(path)), ps(ckpt.model_cfg), st(ps.layout.n_params) {
        restore_state(ckpt, ps, st);
    }
};

/// Builds a tile either from a dataset (--data/--tile) or from two standalone
/// image files (--img1/--img2). Standalone tiles carry empty targets.
struct TileSource {
    std::string data_dir;
    std::string tile_id;
    std::string img1_path, img2_path;

    bool from_dataset() const { return !data_dir.empty(); }

    void check() const {
        const bool ds = !data_dir.empty() || !tile_id.empty();
        const bool raw = !img1_path.empty() || !img2_path.empty();
        if (ds == raw)
            throw CLI::ValidationError(
                "input", "give either --data with --tile, or --img1 with --img2");
        if (ds && (data_dir.empty() || tile_id.empty()))
            throw CLI::ValidationError("input", "--data and --tile must be given together");
        if (raw && (img1_path.empty() || img2_path.empty()))
            throw CLI::ValidationError("input", "--img1 and --img2 must be given together");
    }

    /// The manifest when reading from a dataset, nothing otherwise.
    std::optional<DatasetManifest> manifest() const {
        if (!from_dataset()) return std::nullopt;
        return load_manifest(data_dir);
    }

    Tile load(const DatasetManifest* m) const {
        if (from_dataset()) return load_tile(data_dir, tile_id, m);
        Tile t;
        t.meta.tile_id = "input";
        t.img1 = read_image(img1_path);
        t.img2 = read_image(img2_path);
        if (t.img1.width() != t.img2.width() || t.img1.height() != t.img2.height() ||
            t.img1.band_count() != t.img2.band_count())
            throw std::runtime_error("input images disagree in size or band count");
        t.meta.bands = t.img1.band_count();
        const int s = t.img1.width();
        t.mask2d = Mask8(s, s);
        t.delta3d = RasterF32(std::max(1, s / 2), std::max(1, s / 2));
        return t;
    }
};

inline void add_tile_source_flags(CLI::App* cmd, TileSource& src) {
    cmd->add_option("--data", src.data_dir, "dataset root directory");
    cmd->add_option("--tile", src.tile_id, "tile id within the dataset");
    cmd->add_option("--img1", src.img1_path, "epoch-1 image file (standalone mode)");
    cmd->add_option("--img2", src.img2_path, "epoch-2 image file (standalone mode)");
}

}  // namespace detail

/// The full command-line surface; separated from main() so tests can drive it
/// in-process. Returns the process exit code: 0 success, 1 runtime failure,
/// 2 usage error.
inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"mtbit: multitask 2D/3D change detection from bitemporal image pairs"};
    app.require_subcommand(1);

    // ---- dataset ------------------------------------------------------------
    auto* dataset = app.add_subcommand("dataset", "generate, validate or summarize datasets");
    dataset->require_subcommand(1);

    struct {
        std::string out, config;
        std::int64_t seed = -1;
        int tiles = -1;
    } gen_args;
    auto* gen = dataset->add_subcommand("gen", "write a synthetic dataset");
    gen->add_option("--out", gen_args.out, "output dataset directory");
    gen->add_option("--config", gen_args.config, "run config file (synth section)");
    gen->add_option("--seed", gen_args.seed, "generator seed (overrides config)");
    gen->add_option("--tiles", gen_args.tiles, "number of tiles (overrides config)");
    gen->callback([&] {
        RunConfig rc;
        if (!gen_args.config.empty()) rc = load_run_config(gen_args.config);
        if (gen_args.seed >= 0) rc.synth.seed = static_cast<std::uint64_t>(gen_args.seed);
        if (gen_args.tiles >= 0) rc.synth.n_tiles = gen_args.tiles;
        if (!gen_args.out.empty()) rc.out = gen_args.out;
        if (rc.out.empty()) throw CLI::ValidationError("--out", "output directory is required");
        rc.synth.validate();

        const DatasetManifest m = generate_synthetic(rc.synth, rc.out);
        detail::echo_config(rc, rc.out);
        std::cout << "wrote " << (m.train.size() + m.val.size() + m.test.size()) << " tiles to "
                  << rc.out << " (train " << m.train.size() << ", val " << m.val.size()
                  << ", test " << m.test.size() << "), h_scale " << m.h_scale << "\n";
    });

    struct {
        std::string data;
    } val_args;
    auto* vali = dataset->add_subcommand("validate", "strict-check every tile of a dataset");
    vali->add_option("--data", val_args.data, "dataset root directory")->required();
    vali->callback([&] {
        const DatasetManifest m = load_manifest(val_args.data);
        std::size_t n_tiles = 0, n_bad = 0;
        for (const std::string split : {"train", "val", "test"})
            for (const auto& id : m.split(split)) {
                const Tile t = load_tile(m.root, id, &m);
                ++n_tiles;
                for (const auto& v : validate_tile(t, /*strict=*/true)) {
                    std::cerr << (v.warning ? "warning" : "error") << " [" << id
                              << "]: " << v.code << ": " << v.message << "\n";
                    if (!v.warning) ++n_bad;
                }
            }
        if (n_bad > 0)
            throw std::runtime_error("validation failed with " + std::to_string(n_bad) +
                                     " violation(s)");
        std::cout << "OK: " << n_tiles << " tiles valid\n";
    });

    struct {
        std::string data, out;
    } stats_args;
    auto* stats = dataset->add_subcommand("stats", "per-split change statistics");
    stats->add_option("--data", stats_args.data, "dataset root directory")->required();
    stats->add_option("--out", stats_args.out, "directory for stats.json (optional)");
    stats->callback([&] {
        const DatasetManifest m = load_manifest(stats_args.data);
        const auto per_split = split_stats(m);
        nlohmann::json j;
        for (const auto& [name, s] : per_split) {
            std::cout << name << ": " << m.split(name).size() << " tiles, change fraction "
                      << std::setprecision(4) << s.change_fraction() << " (" << s.change_pixels
                      << "/" << s.mask_pixels << " px)\n";
            nlohmann::json js;
            js["tiles"] = m.split(name).size();
            js["mask_pixels"] = s.mask_pixels;
            js["change_pixels"] = s.change_pixels;
            js["change_fraction"] = s.change_fraction();
            js["delta_zero_count"] = s.delta_hist.zero_bin;
            js["delta_bin_counts"] = s.delta_hist.bins;
            j[name] = std::move(js);
        }
        if (!stats_args.out.empty()) {
            std::filesystem::create_directories(stats_args.out);
            std::ofstream out(std::filesystem::path(stats_args.out) / "stats.json",
                              std::ios::binary | std::ios::trunc);
            if (!out) throw std::runtime_error("cannot write stats.json in " + stats_args.out);
            out << j.dump(2) << "\n";
        }
    });

    // ---- train --------------------------------------------------------------
    struct {
        std::string data, out, config, preset, resume;
        std::int64_t seed = -1;
        int epochs = -1, batch = -1;
        double lr = -1.0, alpha = -1.0, beta = -1.0;
        std::int64_t max_steps = -1;
        bool quiet = false;
    } tr_args;
    auto* train = app.add_subcommand("train", "train a model on a dataset");
    train->add_option("--data", tr_args.data, "dataset root directory");
    train->add_option("--out", tr_args.out, "run output directory");
    train->add_option("--config", tr_args.config, "run config file (model/train sections)");
    train->add_option("--preset", tr_args.preset, "model preset: paper or tiny")
        ->check(CLI::IsMember({"paper", "tiny"}));
    train->add_option("--seed", tr_args.seed, "training seed (overrides config)");
    train->add_option("--epochs", tr_args.epochs, "number of epochs (overrides config)");
    train->add_option("--batch", tr_args.batch, "batch size (overrides config)");
    train->add_option("--lr", tr_args.lr, "learning rate (overrides config)");
    train->add_option("--alpha", tr_args.alpha, "2D loss weight (overrides config)");
    train->add_option("--beta", tr_args.beta, "3D loss weight (overrides config)");
    train->add_option("--max-steps", tr_args.max_steps,
                      "stop after this many optimizer steps (0 = run all epochs)");
    train->add_option("--resume", tr_args.resume, "checkpoint to resume from");
    train->add_flag("--quiet", tr_args.quiet, "suppress per-epoch progress lines");
    train->callback([&] {
        RunConfig rc;
        if (tr_args.preset == "tiny") rc.model = ModelConfig::tiny();
        if (!tr_args.config.empty()) {
            std::ifstream in(tr_args.config, std::ios::binary);
            if (!in) throw std::runtime_error("cannot open config file " + tr_args.config);
            const nlohmann::json raw = nlohmann::json::parse(in);
            if (!tr_args.preset.empty() && raw.contains("model"))
                throw CLI::ValidationError(
                    "--preset", "conflicts with the config file's model section");
            const RunConfig file = run_config_from_json(raw);
            if (raw.contains("model")) rc.model = file.model;
            rc.train = file.train;
            rc.data = file.data;
            rc.out = file.out;
        }
        if (!tr_args.data.empty()) rc.data = tr_args.data;
        if (!tr_args.out.empty()) rc.out = tr_args.out;
        if (tr_args.seed >= 0) rc.train.seed = static_cast<std::uint64_t>(tr_args.seed);
        if (tr_args.epochs >= 0) rc.train.epochs = tr_args.epochs;
        if (tr_args.batch >= 0) rc.train.batch_size = tr_args.batch;
        if (tr_args.lr >= 0) rc.train.lr = tr_args.lr;
        if (tr_args.alpha >= 0) rc.train.alpha = tr_args.alpha;
        if (tr_args.beta >= 0) rc.train.beta = tr_args.beta;
        if (tr_args.max_steps >= 0) rc.train.max_steps = tr_args.max_steps;
        if (rc.data.empty()) throw CLI::ValidationError("--data", "dataset root is required");
        if (rc.out.empty()) throw CLI::ValidationError("--out", "output directory is required");

        // The augmentation grid must match the model input; an untouched
        // default follows the model, an explicit mismatch is an error.
        if (rc.train.aug.target_size != rc.model.input_size) {
            if (rc.train.aug.target_size == AugSpec{}.target_size)
                rc.train.aug.target_size = rc.model.input_size;
            else
                throw std::runtime_error("config aug.target_size disagrees with model input_size");
        }

        std::optional<Checkpoint> resume;
        if (!tr_args.resume.empty()) resume.emplace(load_checkpoint(tr_args.resume));

        const DatasetManifest m = load_manifest(rc.data);
        detail::echo_config(rc, rc.out);

        TrainCallbacks cb;
        if (!tr_args.quiet)
            cb.on_epoch = [](const EpochLog& e) {
                std::cout << "epoch " << e.epoch << ": total " << std::setprecision(6)
                          << e.train_loss.total << " (l2d " << e.train_loss.l2d << ", l3d "
                          << e.train_loss.l3d << "), val " << detail::fmt_metrics(e.val) << "\n";
            };
        const TrainResult res = train_loop(m, rc.model, rc.train, rc.out, cb,
                                           resume ? &*resume : nullptr);
        std::cout << "final checkpoint: "
                  << (std::filesystem::path(rc.out) / "checkpoint_final.ckpt").string() << "\n";
        if (!res.log.empty())
            std::cout << "last val: " << detail::fmt_metrics(res.log.back().val) << "\n";
    });

    // ---- eval ---------------------------------------------------------------
    struct {
        std::string data, ckpt, split = "test", out;
    } ev_args;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
    eval->add_option("--data", ev_args.data, "dataset root directory")->required();
    eval->add_option("--ckpt", ev_args.ckpt, "checkpoint file")->required();
    eval->add_option("--split", ev_args.split, "split: train, val or test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--out", ev_args.out, "directory for report.json and histogram CSV");
    eval->callback([&] {
        const DatasetManifest m = load_manifest(ev_args.data);
        detail::LoadedModel lm(ev_args.ckpt);
        Histogram gt_hist, pred_hist;
        const MetricReport rep =
            evaluate_split(m, ev_args.split, lm.ps, &gt_hist, &pred_hist);
        std::cout << ev_args.split << ": " << detail::fmt_metrics(rep) << "\n";
        if (!ev_args.out.empty()) {
            std::filesystem::create_directories(ev_args.out);
            const std::filesystem::path dir(ev_args.out);
            std::ofstream out(dir / "report.json", std::ios::binary | std::ios::trunc);
            if (!out) throw std::runtime_error("cannot write report.json in " + ev_args.out);
            out << rep.to_json().dump(2) << "\n";
            write_histogram_csv(gt_hist, pred_hist, dir / "delta_hist.csv");
        }
    });

    // ---- predict ------------------------------------------------------------
    struct {
        std::string ckpt, out;
        detail::TileSource src;
        bool trace = false;
        int epoch = 1;
    } pr_args;
    auto* predict = app.add_subcommand("predict", "run inference on one tile or image pair");
    predict->add_option("--ckpt", pr_args.ckpt, "checkpoint file")->required();
    predict->add_option("--out", pr_args.out, "output directory")->required();
    detail::add_tile_source_flags(predict, pr_args.src);
    predict->add_flag("--trace", pr_args.trace, "also write tokenizer attention rasters");
    predict->add_option("--epoch", pr_args.epoch, "epoch whose attention to trace (1 or 2)")
        ->check(CLI::IsMember({1, 2}));
    predict->callback([&] {
        pr_args.src.check();
        detail::LoadedModel lm(pr_args.ckpt);
        const auto manifest = pr_args.src.manifest();
        const Tile tile = pr_args.src.load(manifest ? &*manifest : nullptr);
        const double h_scale = manifest ? manifest->h_scale : lm.ckpt.h_scale;

        const TilePrediction pred = predict_tile(lm.ps, tile, h_scale);
        const std::filesystem::path dir(pr_args.out);
        std::filesystem::create_directories(dir);
        write_raster(pred.change, dir / "m2d.msk");
        write_raster(pred.delta_m, dir / "m3d.r32");
        std::cout << "wrote " << (dir / "m2d.msk").string() << " and "
                  << (dir / "m3d.r32").string() << "\n";

        // Ground truth travels with dataset tiles; score the prediction when
        // it is available.
        if (manifest) {
            const int S = lm.ps.cfg.input_size;
            const ModelSample s = plain_sample(tile, S, h_scale);
            TileMetrics tm;
            tm.tile_id = tile.meta.tile_id;
            Mask8 gt(S, S);
            for (std::size_t i = 0; i < gt.values.size(); ++i) gt.values[i] = s.y2d[i];
            tm.conf = confusion(pred.change, gt);
            for (std::size_t i = 0; i < s.y3d.size(); ++i)
                tm.err.add(static_cast<double>(pred.delta_m.values[i]),
                           denormalize_delta(s.y3d[i], h_scale));
            const MetricReport rep = micro_average({tm});
            std::ofstream out(dir / "report.json", std::ios::binary | std::ios::trunc);
            if (!out) throw std::runtime_error("cannot write report.json in " + pr_args.out);
            out << rep.to_json().dump(2) << "\n";
            std::cout << tile.meta.tile_id << ": " << detail::fmt_metrics(rep) << "\n";
        }

        if (pr_args.trace) {
            const ModelSample s = plain_sample(tile, lm.ps.cfg.input_size, h_scale);
            ad::Tape tape;
            const ForwardResult fr = forward(tape, lm.ps, s.x1, s.x2, /*training=*/false);
            const auto paths =
                export_attention_maps(tape, fr.trace, lm.ps.cfg, dir, pr_args.epoch);
            std::cout << "wrote " << paths.size() << " attention rasters\n";
        }
    });

    // ---- gradcheck ----------------------------------------------------------
    struct {
        std::int64_t seed = 0;
        double step = 1e-4, tol = 1e-4;
    } gc_args;
    auto* gc = app.add_subcommand(
        "gradcheck", "verify analytic gradients against finite differences (tiny config)");
    gc->add_option("--seed", gc_args.seed, "sample and init seed");
    gc->add_option("--step", gc_args.step, "finite-difference step");
    gc->add_option("--tol", gc_args.tol, "relative-error tolerance");
    gc->callback([&] {
        const ModelConfig cfg = ModelConfig::tiny();
        ParamSet ps(cfg);
        ps.init(static_cast<std::uint64_t>(gc_args.seed));
        const ModelSample s = gradcheck_sample(cfg, static_cast<std::uint64_t>(gc_args.seed));
        TrainConfig tc;
        tc.aug.target_size = cfg.input_size;
        const GradCheckReport rep = gradcheck(ps, s, tc, gc_args.step, gc_args.tol);
        std::cout << "checked " << rep.n_compared << "/" << rep.n_params << " coordinates ("
                  << rep.n_skipped << " skipped), max relative error " << std::scientific
                  << std::setprecision(3) << rep.max_rel_err << "\n";
        for (const auto& f : rep.failures)
            std::cerr << "  mismatch at " << f.tensor << "[" << f.index << "]: analytic "
                      << f.analytic << " vs fd " << f.fd << " (rel " << f.rel_err << ")\n";
        if (!rep.pass())
            throw std::runtime_error(std::to_string(rep.n_failed) +
                                     " coordinate(s) exceeded tolerance");
    });

    // ---- export-attn --------------------------------------------------------
    struct {
        std::string ckpt, out;
        detail::TileSource src;
        int epoch = 1;
    } ea_args;
    auto* ea = app.add_subcommand("export-attn", "write tokenizer attention maps as rasters");
    ea->add_option("--ckpt", ea_args.ckpt, "checkpoint file")->required();
    ea->add_option("--out", ea_args.out, "output directory")->required();
    detail::add_tile_source_flags(ea, ea_args.src);
    ea->add_option("--epoch", ea_args.epoch, "epoch whose attention to export (1 or 2)")
        ->check(CLI::IsMember({1, 2}));
    ea->callback([&] {
        ea_args.src.check();
        detail::LoadedModel lm(ea_args.ckpt);
        const auto manifest = ea_args.src.manifest();
        const Tile tile = ea_args.src.load(manifest ? &*manifest : nullptr);
        const double h_scale = manifest ? manifest->h_scale : lm.ckpt.h_scale;
        const ModelSample s = plain_sample(tile, lm.ps.cfg.input_size, h_scale);
        ad::Tape tape;
        const ForwardResult fr = forward(tape, lm.ps, s.x1, s.x2, /*training=*/false);
        const auto paths =
            export_attention_maps(tape, fr.trace, lm.ps.cfg, ea_args.out, ea_args.epoch);
        std::cout << "wrote " << paths.size() << " attention rasters to " << ea_args.out << "\n";
    });

    // ---- dispatch -----------------------------------------------------------
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n"
                  << "run with --help for the command list\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace mtbit
