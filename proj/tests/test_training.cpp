#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mtbit/gradcheck.hpp"
#include "mtbit/synth.hpp"
#include "mtbit/trainer.hpp"
#include "test_util.hpp"

using namespace mtbit;
using testutil::fresh_dir;

namespace {

/// Constant-prediction loss fixture: m2d and m3d are constants on a fresh
/// tape, so the expected numbers are reachable by hand.
LossBreakdown constant_loss(double p, double m3, const std::vector<std::uint8_t>& y2d,
                            const std::vector<double>& y3d, const TrainConfig& tc, int S) {
    ad::Tape t;
    const int m2d = t.constant({2, S, S}, p);
    const int m3d = t.constant({1, S, S}, m3);
    ModelSample s;
    s.size = S;
    s.bands = 3;
    s.y2d = y2d;
    s.y3d = y3d;
    return read_loss(t, loss_graph(t, m2d, m3d, s, tc));
}

ModelSample tiny_sample(std::uint64_t seed = 0) {
    return gradcheck_sample(ModelConfig::tiny(), seed);
}

TrainConfig overfit_tc() {
    TrainConfig tc;
    tc.aug.target_size = ModelConfig::tiny().input_size;
    tc.aug.enable_flip = tc.aug.enable_geom = false;
    tc.aug.enable_radiometric = tc.aug.enable_noise = false;
    return tc;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("hand-checked loss values", "[training]") {
    TrainConfig tc;
    tc.alpha = 1.0;
    tc.beta = 3.0;
    const int S = 2;

    SECTION("all change, uniform prediction") {
        // p = 0.5 on both channels gives BCE ln2 per channel; the per-pixel
        // term halves the channel sum back to ln2, and every pixel carries
        // the change weight 0.95.
        const auto lb = constant_loss(0.5, 0.5, {1, 1, 1, 1}, {1.0, 1.0, 1.0, 1.0}, tc, S);
        CHECK(lb.l2d == Catch::Approx(0.95 * std::log(2.0)).epsilon(1e-12));
        CHECK(lb.l3d == Catch::Approx(0.25).epsilon(1e-12));
        CHECK(lb.total == Catch::Approx(0.95 * std::log(2.0) + 3.0 * 0.25).epsilon(1e-12));
    }
    SECTION("mixed targets weight the two classes differently") {
        // One change pixel (0.95) and three no-change pixels (0.05 each).
        const auto lb = constant_loss(0.5, 0.0, {1, 0, 0, 0}, {1.0, 0.0, 0.0, 0.0}, tc, S);
        const double want = std::log(2.0) * (0.95 + 3 * 0.05) / 4.0;
        CHECK(lb.l2d == Catch::Approx(want).epsilon(1e-12));
        CHECK(lb.l3d == Catch::Approx(0.25).epsilon(1e-12));
    }
    SECTION("perfect continuous prediction zeroes the 3d term") {
        const auto lb = constant_loss(0.5, 1.0, {1, 1, 1, 1}, {1.0, 1.0, 1.0, 1.0}, tc, S);
        CHECK(lb.l3d == 0.0);
    }
    SECTION("saturated probabilities stay finite through the clamp") {
        const auto lb = constant_loss(1.0, 0.0, {0, 0, 0, 0}, {0.0, 0.0, 0.0, 0.0}, tc, S);
        CHECK(std::isfinite(lb.l2d));
        CHECK(lb.l2d > 0.0);  // clamped log(1e-7) on the wrong channel
    }
}

TEST_CASE("loss weights recompose the total exactly", "[training]") {
    const ModelConfig cfg = ModelConfig::tiny();
    ParamSet ps(cfg);
    ps.init(3);
    const ModelSample s = tiny_sample(3);

    TrainConfig tc = overfit_tc();
    tc.alpha = 1.0;
    tc.beta = 0.0;
    const double l2d = loss_value(ps, s, tc);
    tc.alpha = 0.0;
    tc.beta = 1.0;
    const double l3d = loss_value(ps, s, tc);

    const double pairs[][2] = {{0, 1}, {1, 0}, {1, 1}, {1, 3}, {3, 1}, {1, 5}, {5, 1}};
    for (const auto& ab : pairs) {
        tc.alpha = ab[0];
        tc.beta = ab[1];
        const double total = loss_value(ps, s, tc);
        CAPTURE(ab[0], ab[1]);
        CHECK(std::abs(total - (ab[0] * l2d + ab[1] * l3d)) <= 1e-9);
    }
}

TEST_CASE("zero loss weights silence exactly one head", "[training]") {
    const ModelConfig cfg = ModelConfig::tiny();
    ParamSet ps(cfg);
    ps.init(4);
    const ModelSample s = tiny_sample(4);

    auto tensor_grads = [&](const std::vector<double>& g, const std::string& name) {
        const auto& t = ps.layout.tensor(name);
        const std::size_t n = ad::numel_of(t.shape);
        return std::vector<double>(g.begin() + static_cast<std::ptrdiff_t>(t.offset),
                                   g.begin() + static_cast<std::ptrdiff_t>(t.offset + n));
    };
    auto all_zero = [](const std::vector<double>& v) {
        for (double x : v)
            if (x != 0.0) return false;
        return true;
    };

    TrainConfig tc = overfit_tc();
    tc.alpha = 1.0;
    tc.beta = 0.0;
    const auto g_2donly = analytic_grad(ps, s, tc);
    CHECK(all_zero(tensor_grads(g_2donly, "f2.w")));
    CHECK(all_zero(tensor_grads(g_2donly, "f2.b")));
    CHECK_FALSE(all_zero(tensor_grads(g_2donly, "f1.w")));

    tc.alpha = 0.0;
    tc.beta = 1.0;
    const auto g_3donly = analytic_grad(ps, s, tc);
    CHECK(all_zero(tensor_grads(g_3donly, "f1.w")));
    CHECK(all_zero(tensor_grads(g_3donly, "f1.b")));
    CHECK_FALSE(all_zero(tensor_grads(g_3donly, "f2.w")));
}

TEST_CASE("analytic gradients match finite differences on sampled coordinates", "[training]") {
    const ModelConfig cfg = ModelConfig::tiny();
    ParamSet ps(cfg);
    ps.init(5);
    const ModelSample s = tiny_sample(5);
    const TrainConfig tc = overfit_tc();
    const auto g = analytic_grad(ps, s, tc);

    Rng rng(6);
    const double step = 1e-4;
    int compared = 0;
    for (int k = 0; k < 25; ++k) {
        const auto i =
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(g.size()) - 1));
        const double saved = ps.data[i];
        ps.data[i] = saved + step;
        const double up = loss_value(ps, s, tc);
        ps.data[i] = saved - step;
        const double dn = loss_value(ps, s, tc);
        ps.data[i] = saved;
        const double fd = (up - dn) / (2.0 * step);
        if (std::abs(g[i]) < 1e-8 && std::abs(fd) < 1e-8) continue;
        ++compared;
        const double rel = std::abs(g[i] - fd) / std::max(std::abs(g[i]), std::abs(fd));
        CAPTURE(i, g[i], fd);
        CHECK(rel < 1e-3);
    }
    CHECK(compared > 0);
}

TEST_CASE("adamw follows the update formula and respects decay flags", "[training]") {
    const ModelConfig cfg = ModelConfig::tiny();
    ParamSet ps(cfg);
    OptState st(ps.layout.n_params);
    std::vector<double> grad(ps.layout.n_params, 0.0);

    // One decayed coordinate (stem conv weight) and one undecayed (stem bn
    // scale), both with gradient 1 and weight 0.5.
    const std::size_t wi = ps.layout.tensor("stem.conv.w").offset;
    const std::size_t gi = ps.layout.tensor("stem.bn.g").offset;
    ps.data[wi] = 0.5;
    ps.data[gi] = 0.5;
    grad[wi] = 1.0;
    grad[gi] = 1.0;

    const double lr = 0.1, wd = 0.01;
    adamw_step(ps, st, grad, lr, wd);
    CHECK(st.step == 1);

    // First step: mhat = g, vhat = g^2, so the adaptive term is g/(|g|+eps).
    const double adapt = 1.0 / (1.0 + 1e-8);
    CHECK(ps.data[wi] == Catch::Approx(0.5 - lr * (adapt + wd * 0.5)).epsilon(1e-15));
    CHECK(ps.data[gi] == Catch::Approx(0.5 - lr * adapt).epsilon(1e-15));

    // Zero learning rate freezes everything even with nonzero decay.
    ParamSet ps2(cfg);
    ps2.init(7);
    const std::vector<double> before = ps2.data;
    OptState st2(ps2.layout.n_params);
    std::vector<double> g2(ps2.layout.n_params, 0.25);
    adamw_step(ps2, st2, g2, 0.0, 0.5);
    CHECK(ps2.data == before);

    std::vector<double> wrong(3, 0.0);
    CHECK_THROWS_AS(adamw_step(ps, st, wrong, lr, wd), std::invalid_argument);
}

TEST_CASE("repeated steps on one sample descend", "[training]") {
    const ModelConfig cfg = ModelConfig::tiny();
    ParamSet ps(cfg);
    ps.init(8);
    OptState st(ps.layout.n_params);
    TrainConfig tc = overfit_tc();
    tc.lr = 0.01;

    const std::vector<ModelSample> batch = {tiny_sample(8)};
    const double first = train_step(ps, st, batch, tc).total;
    double last = first;
    for (int i = 0; i < 39; ++i) last = train_step(ps, st, batch, tc).total;
    CAPTURE(first, last);
    CHECK(last < first);
    CHECK(last < 0.5 * first);
    CHECK(st.step == 40);
}

TEST_CASE("training config validation", "[training]") {
    CHECK_NOTHROW(TrainConfig{}.validate());
    auto broken = [](auto mutate) {
        TrainConfig tc;
        mutate(tc);
        return tc;
    };
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.alpha = -1; }).validate(), std::invalid_argument);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.w_change = 1.0; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.lr = 0.0; }).validate(), std::invalid_argument);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.batch_size = 0; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.weight_decay = -0.1; }).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS(broken([](TrainConfig& c) { c.max_steps = -1; }).validate(),
                    std::invalid_argument);
}

TEST_CASE("checkpoints round trip bitwise and detect corruption", "[training]") {
    Checkpoint c;
    c.model_cfg = ModelConfig::tiny();
    c.train_cfg = overfit_tc();
    const ModelLayout layout = build_layout(c.model_cfg);
    Rng rng(9);
    c.params.resize(layout.n_params);
    c.opt_m.resize(layout.n_params);
    c.opt_v.resize(layout.n_params);
    c.buffers.resize(layout.n_buffers);
    for (auto* v : {&c.params, &c.opt_m, &c.opt_v, &c.buffers})
        for (auto& x : *v) x = rng.uniform(-2.0, 2.0);
    c.opt_step = 1234;
    c.rng_state = {1, 2, 3, 4};
    c.epoch = 7;
    c.step_in_epoch = 2;
    c.permutation = {3, 0, 2, 1};
    c.h_scale = 21.25;

    const std::string bytes = serialize_checkpoint(c);
    const Checkpoint back = parse_checkpoint(bytes);
    CHECK(back == c);
    CHECK(serialize_checkpoint(back) == bytes);

    const auto dir = fresh_dir("ckpt");
    save_checkpoint(c, dir / "a.ckpt");
    CHECK(load_checkpoint(dir / "a.ckpt") == c);

    SECTION("flipped payload byte fails the checksum") {
        std::string bad = bytes;
        bad[bytes.size() / 2] ^= 0x40;
        CHECK_THROWS_WITH(parse_checkpoint(bad), Catch::Matchers::ContainsSubstring("checksum"));
    }
    SECTION("truncation is rejected") {
        CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 9)), std::runtime_error);
        CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, 6)), std::runtime_error);
    }
    SECTION("foreign magic and versions are rejected") {
        std::string bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_WITH(parse_checkpoint(bad), Catch::Matchers::ContainsSubstring("magic"));
        std::string vbad = bytes;
        vbad[4] = 9;
        CHECK_THROWS_WITH(parse_checkpoint(vbad), Catch::Matchers::ContainsSubstring("version"));
    }
    SECTION("restore refuses a different architecture") {
        ModelConfig other = ModelConfig::tiny();
        other.token_len = 3;
        ParamSet ps(other);
        OptState st(ps.layout.n_params);
        CHECK_THROWS_AS(restore_state(c, ps, st), std::runtime_error);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("the training loop is deterministic and resumable", "[training]") {
    const auto data_dir = fresh_dir("train_data");
    SynthSpec spec;
    spec.seed = 77;
    spec.n_tiles = 4;
    spec.frac_val = 0.25;  // one validation tile
    spec.frac_test = 0.0;
    const DatasetManifest manifest = generate_synthetic(spec, data_dir);
    REQUIRE(manifest.train.size() == 3);
    REQUIRE(manifest.val.size() == 1);

    const ModelConfig mcfg = ModelConfig::tiny();
    TrainConfig tc = overfit_tc();
    tc.lr = 0.01;
    tc.batch_size = 2;
    tc.epochs = 3;
    tc.checkpoint_every = 1;

    const auto run_a = fresh_dir("train_a");
    int steps_seen = 0;
    TrainCallbacks cb;
    cb.on_step = [&](int, const LossBreakdown&) { ++steps_seen; };
    const TrainResult ra = train_loop(manifest, mcfg, tc, run_a, cb);

    // ceil(3/2) = 2 batches per epoch over 3 epochs.
    CHECK(steps_seen == 6);
    REQUIRE(ra.log.size() == 3);
    CHECK(ra.final.epoch == 3);
    CHECK(ra.final.step_in_epoch == 0);
    CHECK(ra.final.h_scale == manifest.h_scale);
    // Validation runs on the one val tile at model resolution.
    CHECK(ra.log.back().val.n == 16u * 16u);
    // Normalization buffers moved away from their mean0/var1 start.
    CHECK(ra.final.buffers != ParamSet(mcfg).buffers);

    CHECK(std::filesystem::exists(run_a / "checkpoint_final.ckpt"));
    CHECK(std::filesystem::exists(run_a / "ckpt_epoch_1.ckpt"));
    CHECK(std::filesystem::exists(run_a / "ckpt_epoch_2.ckpt"));
    CHECK_FALSE(std::filesystem::exists(run_a / "ckpt_epoch_3.ckpt"));

    std::ifstream log(run_a / "train_log.csv");
    std::string line;
    std::getline(log, line);
    CHECK(line == "epoch,l2d,l3d,total,F1,IoU,RMSE,cRMSE");
    int rows = 0;
    while (std::getline(log, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);

    SECTION("same seed reproduces the checkpoint byte for byte") {
        const auto run_b = fresh_dir("train_b");
        const TrainResult rb = train_loop(manifest, mcfg, tc, run_b);
        CHECK(serialize_checkpoint(rb.final) == serialize_checkpoint(ra.final));
        CHECK(file_bytes(run_b / "train_log.csv") == file_bytes(run_a / "train_log.csv"));
        std::filesystem::remove_all(run_b);
    }

    SECTION("interrupting mid-epoch and resuming replays the full run") {
        TrainConfig tc_stop = tc;
        tc_stop.max_steps = 3;  // stops inside epoch 1
        const auto run_c = fresh_dir("train_c");
        const TrainResult rc = train_loop(manifest, mcfg, tc_stop, run_c);
        CHECK(rc.final.epoch == 1);
        CHECK(rc.final.step_in_epoch == 1);
        CHECK_FALSE(rc.final.permutation.empty());

        // Reload from disk (not memory) and finish the run.
        const Checkpoint mid = load_checkpoint(run_c / "checkpoint_final.ckpt");
        CHECK(mid == rc.final);
        const auto run_d = fresh_dir("train_d");
        const TrainResult rd = train_loop(manifest, mcfg, tc, run_d, {}, &mid);
        CHECK(serialize_checkpoint(rd.final) == serialize_checkpoint(ra.final));
        std::filesystem::remove_all(run_c);
        std::filesystem::remove_all(run_d);
    }

    SECTION("resume refuses a mismatched architecture") {
        ModelConfig other = mcfg;
        other.feat_channels = 16;
        const auto run_e = fresh_dir("train_e");
        CHECK_THROWS_AS(train_loop(manifest, other, tc, run_e, {}, &ra.final),
                        std::runtime_error);
        std::filesystem::remove_all(run_e);
    }

    std::filesystem::remove_all(run_a);
    std::filesystem::remove_all(data_dir);
}

TEST_CASE("training without a validation split leaves the crmse cell empty", "[training]") {
    const auto data_dir = fresh_dir("train_noval");
    SynthSpec spec;
    spec.seed = 78;
    spec.n_tiles = 2;
    spec.frac_val = 0.0;
    spec.frac_test = 0.0;
    const DatasetManifest manifest = generate_synthetic(spec, data_dir);
    REQUIRE(manifest.val.empty());

    TrainConfig tc = overfit_tc();
    tc.batch_size = 2;
    tc.epochs = 1;
    const auto out = fresh_dir("train_noval_out");
    const TrainResult r = train_loop(manifest, ModelConfig::tiny(), tc, out);
    // Empty-split conventions: perfect agreement scores, absent crmse.
    CHECK(r.log.at(0).val.f1 == 1.0);
    CHECK(r.log.at(0).val.rmse_m == 0.0);
    CHECK_FALSE(r.log.at(0).val.crmse_m.has_value());

    std::ifstream log(out / "train_log.csv");
    std::string header, row;
    std::getline(log, header);
    std::getline(log, row);
    CHECK(row.back() == ',');  // trailing empty cRMSE cell
    std::filesystem::remove_all(out);
    std::filesystem::remove_all(data_dir);
}

TEST_CASE("the aug target size must match the model input", "[training]") {
    const auto data_dir = fresh_dir("train_badaug");
    SynthSpec spec;
    spec.seed = 79;
    spec.n_tiles = 1;
    spec.frac_val = 0.0;
    spec.frac_test = 0.0;
    const DatasetManifest manifest = generate_synthetic(spec, data_dir);

    TrainConfig tc;  // default target_size 256 vs tiny input 16
    const auto out = fresh_dir("train_badaug_out");
    CHECK_THROWS_AS(train_loop(manifest, ModelConfig::tiny(), tc, out), std::runtime_error);
    std::filesystem::remove_all(out);
    std::filesystem::remove_all(data_dir);
}
