#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mtbit/cli.hpp"
#include "test_util.hpp"

using namespace mtbit;
using Catch::Matchers::ContainsSubstring;
using testutil::fresh_dir;

namespace {

struct CliResult {
    int code = -1;
    std::string out, err;
};

/// Drives the CLI in-process with captured streams, as a shell user would.
CliResult run(const std::vector<std::string>& args) {
    std::vector<const char*> argv = {"mtbit"};
    for (const auto& a : args) argv.push_back(a.c_str());

    std::ostringstream out, err;
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    CliResult r;
    try {
        r.code = run_cli(static_cast<int>(argv.size()), argv.data());
    } catch (...) {
        std::cout.rdbuf(old_out);
        std::cerr.rdbuf(old_err);
        throw;
    }
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("usage errors exit with code 2", "[cli]") {
    CHECK(run({}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"dataset"}).code == 2);                       // missing sub-subcommand
    CHECK(run({"dataset", "gen"}).code == 2);                // missing --out
    CHECK(run({"dataset", "validate"}).code == 2);           // missing required --data
    CHECK(run({"eval", "--data", "x"}).code == 2);           // missing required --ckpt
    CHECK(run({"train", "--data", "x", "--out", "y", "--preset", "resnet"}).code == 2);
    CHECK(run({"train", "--bogus"}).code == 2);
    const CliResult r = run({"predict", "--ckpt", "x", "--out", "y"});
    CHECK(r.code == 2);  // neither dataset nor standalone inputs
    CHECK_THAT(r.err, ContainsSubstring("usage error"));
}

TEST_CASE("help is not an error", "[cli]") {
    CHECK(run({"--help"}).code == 0);
    CHECK_THAT(run({"--help"}).out, ContainsSubstring("train"));
}

TEST_CASE("runtime failures exit with code 1", "[cli]") {
    const auto dir = fresh_dir("cli_fail");
    CHECK(run({"dataset", "validate", "--data", (dir / "nope").string()}).code == 1);

    const auto bad_cfg = dir / "bad.json";
    std::ofstream(bad_cfg) << R"({"train": {"learning_rate": 0.1}})";
    const CliResult r =
        run({"train", "--data", "x", "--out", (dir / "o").string(), "--config", bad_cfg.string()});
    CHECK(r.code == 1);
    CHECK_THAT(r.err, ContainsSubstring("unknown key"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("a model preset conflicts with a config file model section", "[cli]") {
    const auto dir = fresh_dir("cli_conflict");
    const auto with_model = dir / "with_model.json";
    std::ofstream(with_model) << R"({"model": {"input_size": 16}})"
                              << "";
    CHECK(run({"train", "--data", "x", "--out", (dir / "o").string(), "--preset", "tiny",
               "--config", with_model.string()})
              .code == 2);

    // A config without a model section composes with the preset fine, but an
    // explicit augment grid that disagrees with the model is a hard error.
    const auto bad_aug = dir / "bad_aug.json";
    std::ofstream(bad_aug) << R"({"train": {"aug": {"target_size": 32}}})";
    const CliResult r = run({"train", "--data", "x", "--out", (dir / "o").string(), "--preset",
                             "tiny", "--config", bad_aug.string()});
    CHECK(r.code == 1);
    CHECK_THAT(r.err, ContainsSubstring("target_size"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("the full pipeline runs end to end", "[cli]") {
    const auto root = fresh_dir("cli_pipe");
    const auto data = root / "data";
    const auto cfg_path = root / "run.json";
    {
        nlohmann::json synth;
        synth["seed"] = 21;
        synth["n_tiles"] = 4;
        synth["frac_val"] = 0.25;
        synth["frac_test"] = 0.25;
        nlohmann::json j;
        j["synth"] = synth;
        std::ofstream(cfg_path) << j.dump(2);
    }

    // --- generate ---
    const CliResult gen =
        run({"dataset", "gen", "--config", cfg_path.string(), "--out", data.string()});
    CAPTURE(gen.err);
    REQUIRE(gen.code == 0);
    CHECK_THAT(gen.out, ContainsSubstring("wrote 4 tiles"));
    CHECK(std::filesystem::exists(data / "manifest.json"));
    CHECK(std::filesystem::exists(data / "effective_config.json"));
    const DatasetManifest m = load_manifest(data);
    REQUIRE(m.train.size() == 2);
    REQUIRE(m.val.size() == 1);
    REQUIRE(m.test.size() == 1);

    SECTION("generation is reproducible and flag overrides work") {
        const auto data2 = root / "data2";
        REQUIRE(run({"dataset", "gen", "--config", cfg_path.string(), "--out", data2.string()})
                    .code == 0);
        const std::string rel = m.train[0] + "/t1.img";
        CHECK(file_bytes(data2 / rel) == file_bytes(data / rel));

        const auto data3 = root / "data3";
        const CliResult gen3 = run({"dataset", "gen", "--config", cfg_path.string(), "--out",
                                    data3.string(), "--tiles", "1", "--seed", "5"});
        REQUIRE(gen3.code == 0);
        CHECK_THAT(gen3.out, ContainsSubstring("wrote 1 tiles"));
    }

    // --- validate + stats ---
    const CliResult val = run({"dataset", "validate", "--data", data.string()});
    CAPTURE(val.err);
    CHECK(val.code == 0);
    CHECK_THAT(val.out, ContainsSubstring("OK: 4 tiles valid"));

    const auto stats_dir = root / "stats";
    const CliResult st =
        run({"dataset", "stats", "--data", data.string(), "--out", stats_dir.string()});
    CHECK(st.code == 0);
    {
        std::ifstream in(stats_dir / "stats.json");
        REQUIRE(in.good());
        const nlohmann::json j = nlohmann::json::parse(in);
        REQUIRE(j.contains("train"));
        CHECK(j["train"]["tiles"] == 2);
        CHECK(j["train"]["mask_pixels"] == 2 * 400 * 400);
        CHECK(j["train"]["change_fraction"].get<double>() > 0.0);
    }

    // --- train (tiny, a couple of epochs) ---
    const auto run_dir = root / "run";
    const CliResult tr = run({"train", "--data", data.string(), "--out", run_dir.string(),
                              "--preset", "tiny", "--epochs", "2", "--batch", "2", "--lr", "0.01",
                              "--seed", "1", "--quiet"});
    CAPTURE(tr.err);
    REQUIRE(tr.code == 0);
    const auto ckpt = run_dir / "checkpoint_final.ckpt";
    REQUIRE(std::filesystem::exists(ckpt));
    CHECK(std::filesystem::exists(run_dir / "train_log.csv"));
    {
        std::ifstream in(run_dir / "effective_config.json");
        const nlohmann::json j = nlohmann::json::parse(in);
        CHECK(j["model"]["input_size"] == 16);
        // The untouched augment grid followed the model preset.
        CHECK(j["train"]["aug"]["target_size"] == 16);
        CHECK(j["train"]["epochs"] == 2);
    }

    // --- eval ---
    const auto eval_dir = root / "eval";
    const CliResult ev = run({"eval", "--data", data.string(), "--ckpt", ckpt.string(), "--split",
                              "val", "--out", eval_dir.string()});
    CAPTURE(ev.err);
    REQUIRE(ev.code == 0);
    CHECK_THAT(ev.out, ContainsSubstring("val: F1="));
    {
        std::ifstream in(eval_dir / "report.json");
        REQUIRE(in.good());
        const nlohmann::json j = nlohmann::json::parse(in);
        CHECK(j.contains("f1"));
        CHECK(j.contains("rmse_m"));
        CHECK(j["pixels"] == 16 * 16);
        std::ifstream csv(eval_dir / "delta_hist.csv");
        std::string header;
        std::getline(csv, header);
        CHECK(header == "bin_left,bin_right,count_gt,count_pred");
    }

    // --- predict on a dataset tile, with attention trace ---
    const auto pred_dir = root / "pred";
    const CliResult pr = run({"predict", "--ckpt", ckpt.string(), "--data", data.string(),
                              "--tile", m.val[0], "--out", pred_dir.string(), "--trace"});
    CAPTURE(pr.err);
    REQUIRE(pr.code == 0);
    {
        const Mask8 change = read_mask(pred_dir / "m2d.msk");
        CHECK(change.width == 16);
        CHECK(change.height == 16);
        const RasterF32 delta = read_raster(pred_dir / "m3d.r32");
        CHECK(delta.width == 16);
        for (float v : delta.values) CHECK(std::isfinite(v));
        CHECK(std::filesystem::exists(pred_dir / "report.json"));

        // Two tokens at epoch 1; each attention raster is a distribution
        // over the 8x8 feature grid.
        for (const char* name : {"attn_e1_t0.r32", "attn_e1_t1.r32"}) {
            const RasterF32 a = read_raster(pred_dir / name);
            CHECK(a.width == 8);
            CHECK(a.height == 8);
            double sum = 0.0;
            for (float v : a.values) {
                CHECK(v >= 0.0f);
                sum += v;
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-4));
        }
    }

    // --- export-attn in standalone mode, second epoch ---
    const auto attn_dir = root / "attn";
    const auto img = data / m.train[0] / "t1.img";
    const CliResult ex = run({"export-attn", "--ckpt", ckpt.string(), "--img1", img.string(),
                              "--img2", img.string(), "--out", attn_dir.string(), "--epoch", "2"});
    CAPTURE(ex.err);
    REQUIRE(ex.code == 0);
    CHECK(std::filesystem::exists(attn_dir / "attn_e2_t0.r32"));
    CHECK(std::filesystem::exists(attn_dir / "attn_e2_t1.r32"));

    // --- standalone predict: identical epochs through an untrained model
    // (zero head biases, both epochs sharing one temporal embedding) mean no
    // detected change ---
    const auto fresh_ckpt = root / "fresh.ckpt";
    {
        Checkpoint c;
        c.model_cfg = ModelConfig::tiny();
        c.train_cfg.aug.target_size = c.model_cfg.input_size;
        ParamSet fresh(c.model_cfg);
        fresh.init(0);
        // Copy each head's epoch-1 temporal embedding onto the epoch-2 rows;
        // otherwise the encoder tells the epochs apart even on equal images.
        for (const auto& ti : fresh.layout.tensors) {
            if (!ti.name.ends_with(".pe")) continue;
            const std::size_t half = static_cast<std::size_t>(ti.shape[0] / 2) *
                                     static_cast<std::size_t>(ti.shape[1]);
            double* p = fresh.data.data() + ti.offset;
            std::copy(p, p + half, p + half);
        }
        c.params = fresh.data;
        c.buffers = fresh.buffers;
        c.opt_m.assign(fresh.layout.n_params, 0.0);
        c.opt_v.assign(fresh.layout.n_params, 0.0);
        save_checkpoint(c, fresh_ckpt);
    }
    const auto same_dir = root / "same";
    const CliResult same = run({"predict", "--ckpt", fresh_ckpt.string(), "--img1", img.string(),
                                "--img2", img.string(), "--out", same_dir.string()});
    CAPTURE(same.err);
    REQUIRE(same.code == 0);
    {
        const Mask8 change = read_mask(same_dir / "m2d.msk");
        for (auto v : change.values) CHECK(v == 0);
        const RasterF32 delta = read_raster(same_dir / "m3d.r32");
        for (float v : delta.values) CHECK(v == 0.0f);
        // No ground truth travels with raw images, so no report is written.
        CHECK_FALSE(std::filesystem::exists(same_dir / "report.json"));
    }

    // --- mixing dataset and standalone inputs is a usage error ---
    CHECK(run({"predict", "--ckpt", ckpt.string(), "--data", data.string(), "--tile", m.val[0],
               "--img1", img.string(), "--img2", img.string(), "--out",
               (root / "bad").string()})
              .code == 2);

    std::filesystem::remove_all(root);
}

TEST_CASE("the gradient checker subcommand passes on the tiny model", "[cli]") {
    const CliResult r = run({"gradcheck", "--seed", "0"});
    CAPTURE(r.err);
    CHECK(r.code == 0);
    CHECK_THAT(r.out, ContainsSubstring("max relative error"));
}
