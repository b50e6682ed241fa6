#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "mtbit/config_io.hpp"
#include "test_util.hpp"

using namespace mtbit;
using nlohmann::json;
using Catch::Matchers::ContainsSubstring;
using testutil::fresh_dir;

TEST_CASE("config sections round trip through json", "[config]") {
    SECTION("model presets") {
        for (const ModelConfig& c : {ModelConfig::paper_default(), ModelConfig::tiny()}) {
            const ModelConfig back = model_config_from_json(to_json(c));
            CHECK(back == c);
            CHECK(to_json(back).dump() == to_json(c).dump());
        }
    }
    SECTION("non-default values survive") {
        ModelConfig c = ModelConfig::tiny();
        c.diff_mode = DiffMode::absolute_diff;
        c.fuse_mode = FuseMode::concat;
        c.upsample_mode = UpsampleMode::learnable;
        c.stages = {{8, 2, 1}, {16, 1, 2}};
        const ModelConfig back = model_config_from_json(to_json(c));
        CHECK(back == c);
        CHECK(back.stages.size() == 2);
        CHECK(back.stages[1].width == 16);
    }
    SECTION("train config with nested augmentation") {
        TrainConfig t;
        t.lr = 0.05;
        t.batch_size = 4;
        t.seed = 99;
        t.aug.target_size = 16;
        t.aug.enable_noise = false;
        t.aug.p_hflip = 0.25;
        const json j = to_json(t);
        const TrainConfig back = train_config_from_json(j);
        CHECK(back.lr == t.lr);
        CHECK(back.batch_size == 4);
        CHECK(back.seed == 99);
        CHECK(back.aug.target_size == 16);
        CHECK_FALSE(back.aug.enable_noise);
        CHECK(back.aug.p_hflip == 0.25);
        CHECK(to_json(back).dump() == j.dump());
    }
    SECTION("synth spec") {
        SynthSpec s;
        s.seed = 5;
        s.n_tiles = 12;
        s.dh_min = -20.0;
        s.noise_level = 0.002;
        const SynthSpec back = synth_spec_from_json(to_json(s));
        CHECK(to_json(back).dump() == to_json(s).dump());
    }
    SECTION("combined run config") {
        RunConfig r;
        r.model = ModelConfig::tiny();
        r.train.epochs = 2;
        r.train.aug.target_size = 16;
        r.synth.n_tiles = 3;
        r.data = "/tmp/data";
        r.out = "/tmp/out";
        const RunConfig back = run_config_from_json(to_json(r));
        CHECK(back.model == r.model);
        CHECK(back.data == "/tmp/data");
        CHECK(back.out == "/tmp/out");
        CHECK(to_json(back).dump() == to_json(r).dump());
    }
}

TEST_CASE("absent keys fall back to defaults", "[config]") {
    // A sparse section touches one knob and inherits everything else.
    const ModelConfig m = model_config_from_json(json{{"token_len", 8}});
    ModelConfig want;
    want.token_len = 8;
    CHECK(m == want);

    const TrainConfig t = train_config_from_json(json{{"lr", 0.5}});
    CHECK(t.lr == 0.5);
    CHECK(t.batch_size == TrainConfig{}.batch_size);
    CHECK(t.aug.target_size == AugSpec{}.target_size);

    const RunConfig r = run_config_from_json(json::object());
    CHECK(r.model == ModelConfig{});
    CHECK(r.data.empty());
}

TEST_CASE("unknown keys are rejected at every level", "[config]") {
    CHECK_THROWS_WITH(run_config_from_json(json{{"modle", json::object()}}),
                      ContainsSubstring("unknown key") && ContainsSubstring("modle"));
    CHECK_THROWS_WITH(model_config_from_json(json{{"input_sized", 64}}),
                      ContainsSubstring("unknown key"));
    CHECK_THROWS_WITH(train_config_from_json(json{{"learning_rate", 0.1}}),
                      ContainsSubstring("unknown key"));
    CHECK_THROWS_WITH(train_config_from_json(json{{"aug", json{{"flips", true}}}}),
                      ContainsSubstring("unknown key"));
    CHECK_THROWS_WITH(synth_spec_from_json(json{{"tiles", 4}}), ContainsSubstring("unknown key"));
    CHECK_THROWS_WITH(
        model_config_from_json(json{{"stages", json::array({json{{"widht", 8}}})}}),
        ContainsSubstring("unknown key"));
}

TEST_CASE("mode strings parse both ways and reject junk", "[config]") {
    json j = to_json(ModelConfig::tiny());
    j["diff_mode"] = "absolute";
    j["fuse_mode"] = "concat";
    j["upsample_mode"] = "learnable";
    const ModelConfig c = model_config_from_json(j);
    CHECK(c.diff_mode == DiffMode::absolute_diff);
    CHECK(c.fuse_mode == FuseMode::concat);
    CHECK(c.upsample_mode == UpsampleMode::learnable);
    CHECK(to_json(c)["diff_mode"] == "absolute");
    CHECK(to_json(c)["fuse_mode"] == "concat");
    CHECK(to_json(c)["upsample_mode"] == "learnable");

    j["diff_mode"] = "abs";
    CHECK_THROWS_WITH(model_config_from_json(j), ContainsSubstring("abs"));
    j["diff_mode"] = "signed";
    j["upsample_mode"] = "nearest";
    CHECK_THROWS_WITH(model_config_from_json(j), ContainsSubstring("nearest"));
}

TEST_CASE("malformed sections fail loudly", "[config]") {
    // Structural problems: wrong JSON shapes.
    CHECK_THROWS_WITH(model_config_from_json(json::array()), ContainsSubstring("object"));
    CHECK_THROWS_WITH(model_config_from_json(json{{"stages", 7}}), ContainsSubstring("array"));
    CHECK_THROWS_AS(model_config_from_json(json{{"input_size", "big"}}), std::exception);

    // Value problems: parsing succeeds but validation rejects.
    CHECK_THROWS_AS(train_config_from_json(json{{"lr", 0.0}}), std::invalid_argument);
    CHECK_THROWS_AS(synth_spec_from_json(json{{"n_tiles", 0}}), std::invalid_argument);
    CHECK_THROWS_AS(model_config_from_json(json{{"stem_kernel", 4}}), std::invalid_argument);
}

TEST_CASE("run configs load from disk", "[config]") {
    const auto dir = fresh_dir("config");
    const auto path = dir / "run.json";
    {
        RunConfig r;
        r.model = ModelConfig::tiny();
        r.train.aug.target_size = r.model.input_size;
        r.data = "somewhere";
        std::ofstream out(path);
        out << to_json(r).dump(2) << '\n';
    }
    const RunConfig r = load_run_config(path);
    CHECK(r.model == ModelConfig::tiny());
    CHECK(r.data == "somewhere");

    CHECK_THROWS_WITH(load_run_config(dir / "absent.json"), ContainsSubstring("cannot open"));

    std::ofstream(dir / "broken.json") << "{ not json";
    CHECK_THROWS_AS(load_run_config(dir / "broken.json"), nlohmann::json::exception);
    std::filesystem::remove_all(dir);
}
