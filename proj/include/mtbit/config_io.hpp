#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "mtbit/loss.hpp"
#include "mtbit/model.hpp"
#include "mtbit/synth.hpp"

namespace mtbit {

namespace detail {

/// Strict JSON object reader: every key must be consumed, unknown keys are a
/// hard error (silent typos in config files are worse than failures).
class StrictObject {
  public:
    StrictObject(const nlohmann::json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
        if (!j_.is_object()) throw std::runtime_error(ctx_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (j_.contains(key)) out = j_.at(key).get<T>();
    }

    bool take(const char* key, nlohmann::json& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return false;
        out = j_.at(key);
        return true;
    }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key()))
                throw std::runtime_error(ctx_ + ": unknown key \"" + item.key() + "\"");
    }

  private:
    const nlohmann::json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

inline std::string to_string(DiffMode m) {
    return m == DiffMode::signed_diff ? "signed" : "absolute";
}
inline std::string to_string(FuseMode m) {
    return m == FuseMode::difference ? "difference" : "concat";
}
inline std::string to_string(UpsampleMode m) {
    return m == UpsampleMode::bilinear ? "bilinear" : "learnable";
}
inline DiffMode diff_mode_from(const std::string& s) {
    if (s == "signed") return DiffMode::signed_diff;
    if (s == "absolute") return DiffMode::absolute_diff;
    throw std::runtime_error("diff_mode must be \"signed\" or \"absolute\", got \"" + s + "\"");
}
inline FuseMode fuse_mode_from(const std::string& s) {
    if (s == "difference") return FuseMode::difference;
    if (s == "concat") return FuseMode::concat;
    throw std::runtime_error("fuse_mode must be \"difference\" or \"concat\", got \"" + s + "\"");
}
inline UpsampleMode upsample_mode_from(const std::string& s) {
    if (s == "bilinear") return UpsampleMode::bilinear;
    if (s == "learnable") return UpsampleMode::learnable;
    throw std::runtime_error("upsample_mode must be \"bilinear\" or \"learnable\", got \"" + s +
                             "\"");
}

}  // namespace detail

// --- ModelConfig --------------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["input_size"] = c.input_size;
    j["bands"] = c.bands;
    j["stride"] = c.stride;
    j["feat_channels"] = c.feat_channels;
    j["token_len"] = c.token_len;
    j["enc_depth"] = c.enc_depth;
    j["dec_depth"] = c.dec_depth;
    j["enc_heads"] = c.enc_heads;
    j["enc_head_dim"] = c.enc_head_dim;
    j["dec_heads"] = c.dec_heads;
    j["dec_head_dim"] = c.dec_head_dim;
    j["mlp_ratio"] = c.mlp_ratio;
    j["stem_width"] = c.stem_width;
    j["stem_kernel"] = c.stem_kernel;
    j["stem_stride"] = c.stem_stride;
    j["stages"] = nlohmann::json::array();
    for (const auto& s : c.stages)
        j["stages"].push_back({{"width", s.width}, {"blocks", s.blocks}, {"stride", s.stride}});
    j["diff_mode"] = detail::to_string(c.diff_mode);
    j["fuse_mode"] = detail::to_string(c.fuse_mode);
    j["upsample_mode"] = detail::to_string(c.upsample_mode);
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    detail::StrictObject o(j, "model config");
    o.get("input_size", c.input_size);
    o.get("bands", c.bands);
    o.get("stride", c.stride);
    o.get("feat_channels", c.feat_channels);
    o.get("token_len", c.token_len);
    o.get("enc_depth", c.enc_depth);
    o.get("dec_depth", c.dec_depth);
    o.get("enc_heads", c.enc_heads);
    o.get("enc_head_dim", c.enc_head_dim);
    o.get("dec_heads", c.dec_heads);
    o.get("dec_head_dim", c.dec_head_dim);
    o.get("mlp_ratio", c.mlp_ratio);
    o.get("stem_width", c.stem_width);
    o.get("stem_kernel", c.stem_kernel);
    o.get("stem_stride", c.stem_stride);
    nlohmann::json stages;
    if (o.take("stages", stages)) {
        if (!stages.is_array()) throw std::runtime_error("model config: stages must be an array");
        c.stages.clear();
        for (const auto& sj : stages) {
            detail::StrictObject so(sj, "stage");
            StageSpec s;
            so.get("width", s.width);
            so.get("blocks", s.blocks);
            so.get("stride", s.stride);
            so.finish();
            c.stages.push_back(s);
        }
    }
    std::string str;
    str = detail::to_string(c.diff_mode);
    o.get("diff_mode", str);
    c.diff_mode = detail::diff_mode_from(str);
    str = detail::to_string(c.fuse_mode);
    o.get("fuse_mode", str);
    c.fuse_mode = detail::fuse_mode_from(str);
    str = detail::to_string(c.upsample_mode);
    o.get("upsample_mode", str);
    c.upsample_mode = detail::upsample_mode_from(str);
    o.finish();
    c.validate();
    return c;
}

// --- AugSpec ------------------------------------------------------------------

inline nlohmann::json to_json(const AugSpec& a) {
    nlohmann::json j;
    j["target_size"] = a.target_size;
    j["p_hflip"] = a.p_hflip;
    j["shift_max"] = a.shift_max;
    j["scale_min"] = a.scale_min;
    j["scale_max"] = a.scale_max;
    j["rot_max_deg"] = a.rot_max_deg;
    j["brightness"] = a.brightness;
    j["contrast"] = a.contrast;
    j["saturation"] = a.saturation;
    j["blur_sharpen"] = a.blur_sharpen;
    j["noise_sigma"] = a.noise_sigma;
    j["enable_flip"] = a.enable_flip;
    j["enable_geom"] = a.enable_geom;
    j["enable_radiometric"] = a.enable_radiometric;
    j["enable_noise"] = a.enable_noise;
    return j;
}

inline AugSpec aug_spec_from_json(const nlohmann::json& j) {
    AugSpec a;
    detail::StrictObject o(j, "augment config");
    o.get("target_size", a.target_size);
    o.get("p_hflip", a.p_hflip);
    o.get("shift_max", a.shift_max);
    o.get("scale_min", a.scale_min);
    o.get("scale_max", a.scale_max);
    o.get("rot_max_deg", a.rot_max_deg);
    o.get("brightness", a.brightness);
    o.get("contrast", a.contrast);
    o.get("saturation", a.saturation);
    o.get("blur_sharpen", a.blur_sharpen);
    o.get("noise_sigma", a.noise_sigma);
    o.get("enable_flip", a.enable_flip);
    o.get("enable_geom", a.enable_geom);
    o.get("enable_radiometric", a.enable_radiometric);
    o.get("enable_noise", a.enable_noise);
    o.finish();
    a.validate();
    return a;
}

// --- TrainConfig --------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& t) {
    nlohmann::json j;
    j["alpha"] = t.alpha;
    j["beta"] = t.beta;
    j["w_nochange"] = t.w_nochange;
    j["w_change"] = t.w_change;
    j["lr"] = t.lr;
    j["batch_size"] = t.batch_size;
    j["epochs"] = t.epochs;
    j["weight_decay"] = t.weight_decay;
    j["seed"] = t.seed;
    j["checkpoint_every"] = t.checkpoint_every;
    j["max_steps"] = t.max_steps;
    j["aug"] = to_json(t.aug);
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig t;
    detail::StrictObject o(j, "train config");
    o.get("alpha", t.alpha);
    o.get("beta", t.beta);
    o.get("w_nochange", t.w_nochange);
    o.get("w_change", t.w_change);
    o.get("lr", t.lr);
    o.get("batch_size", t.batch_size);
    o.get("epochs", t.epochs);
    o.get("weight_decay", t.weight_decay);
    o.get("seed", t.seed);
    o.get("checkpoint_every", t.checkpoint_every);
    o.get("max_steps", t.max_steps);
    nlohmann::json aj;
    if (o.take("aug", aj)) t.aug = aug_spec_from_json(aj);
    o.finish();
    t.validate();
    return t;
}

// --- SynthSpec ----------------------------------------------------------------

inline nlohmann::json to_json(const SynthSpec& s) {
    nlohmann::json j;
    j["seed"] = s.seed;
    j["n_tiles"] = s.n_tiles;
    j["buildings_min"] = s.buildings_min;
    j["buildings_max"] = s.buildings_max;
    j["footprint_min"] = s.footprint_min;
    j["footprint_max"] = s.footprint_max;
    j["dh_min"] = s.dh_min;
    j["dh_max"] = s.dh_max;
    j["change_frac_min"] = s.change_frac_min;
    j["change_frac_max"] = s.change_frac_max;
    j["noise_level"] = s.noise_level;
    j["frac_val"] = s.frac_val;
    j["frac_test"] = s.frac_test;
    return j;
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    detail::StrictObject o(j, "synth config");
    o.get("seed", s.seed);
    o.get("n_tiles", s.n_tiles);
    o.get("buildings_min", s.buildings_min);
    o.get("buildings_max", s.buildings_max);
    o.get("footprint_min", s.footprint_min);
    o.get("footprint_max", s.footprint_max);
    o.get("dh_min", s.dh_min);
    o.get("dh_max", s.dh_max);
    o.get("change_frac_min", s.change_frac_min);
    o.get("change_frac_max", s.change_frac_max);
    o.get("noise_level", s.noise_level);
    o.get("frac_val", s.frac_val);
    o.get("frac_test", s.frac_test);
    o.finish();
    s.validate();
    return s;
}

// --- combined run config ------------------------------------------------------

/// A run config file holds up to three optional sections plus the dataset and
/// output locations; each subcommand reads the parts it needs and every
/// section is strict about its keys. Command-line flags override file values.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SynthSpec synth;
    std::string data;  // dataset root directory
    std::string out;   // output directory
};

inline nlohmann::json to_json(const RunConfig& r) {
    nlohmann::json j;
    j["model"] = to_json(r.model);
    j["train"] = to_json(r.train);
    j["synth"] = to_json(r.synth);
    j["data"] = r.data;
    j["out"] = r.out;
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig r;
    detail::StrictObject o(j, "run config");
    nlohmann::json section;
    if (o.take("model", section)) r.model = model_config_from_json(section);
    if (o.take("train", section)) r.train = train_config_from_json(section);
    if (o.take("synth", section)) r.synth = synth_spec_from_json(section);
    o.get("data", r.data);
    o.get("out", r.out);
    o.finish();
    return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    return run_config_from_json(j);
}

}  // namespace mtbit
