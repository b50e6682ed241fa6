#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtbit/config_io.hpp"
#include "mtbit/model.hpp"
#include "mtbit/optim.hpp"
#include "mtbit/raster.hpp"

namespace mtbit {

/// Complete training snapshot.  Beyond parameters and optimizer moments it
/// carries the batch-norm running buffers, the loop position (epoch, step
/// within the epoch, the active shuffle permutation) and the rng state, so a
/// resumed run replays the uninterrupted one bit for bit.
struct Checkpoint {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    std::vector<double> params;
    std::vector<double> buffers;
    std::vector<double> opt_m, opt_v;
    std::int64_t opt_step = 0;
    std::array<std::uint64_t, 4> rng_state{};
    std::int64_t epoch = 0;          // next epoch to run
    std::int64_t step_in_epoch = 0;  // next batch index within that epoch
    std::vector<std::uint64_t> permutation;  // shuffle of the interrupted epoch
    double h_scale = 35.0;           // dataset normalization snapshot for standalone predict

    bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline std::uint32_t crc32(const std::string& bytes) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (unsigned char ch : bytes) crc = table[(crc ^ ch) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

inline void put_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_f64le(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64le(out, bits);
}

inline double get_f64le(const unsigned char* p) {
    const std::uint64_t bits = get_u64le(p);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

class CkptReader {
  public:
    CkptReader(const std::string& bytes, std::size_t off) : bytes_(bytes), off_(off) {}

    std::uint64_t u64() {
        need(8);
        const auto v = get_u64le(ptr());
        off_ += 8;
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64() {
        need(8);
        const double v = get_f64le(ptr());
        off_ += 8;
        return v;
    }
    std::vector<double> f64_vec() {
        const std::uint64_t n = u64();
        need(8 * n);
        std::vector<double> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = f64();
        return v;
    }
    std::vector<std::uint64_t> u64_vec() {
        const std::uint64_t n = u64();
        need(8 * n);
        std::vector<std::uint64_t> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = u64();
        return v;
    }
    std::string blob() {
        const std::uint64_t n = u64();
        need(n);
        std::string s = bytes_.substr(off_, static_cast<std::size_t>(n));
        off_ += static_cast<std::size_t>(n);
        return s;
    }
    std::size_t offset() const { return off_; }

  private:
    const unsigned char* ptr() const {
        return reinterpret_cast<const unsigned char*>(bytes_.data()) + off_;
    }
    void need(std::uint64_t n) const {
        if (off_ + n > bytes_.size()) throw std::runtime_error("checkpoint truncated");
    }
    const std::string& bytes_;
    std::size_t off_;
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Checkpoint& c) {
    std::string out;
    out += "MTCK";
    detail::put_u32le(out, kCheckpointVersion);

    nlohmann::json meta;
    meta["model"] = to_json(c.model_cfg);
    meta["train"] = to_json(c.train_cfg);
    const std::string meta_str = meta.dump();
    detail::put_u64le(out, meta_str.size());
    out += meta_str;

    auto put_vec = [&out](const std::vector<double>& v) {
        detail::put_u64le(out, v.size());
        for (double x : v) detail::put_f64le(out, x);
    };
    put_vec(c.params);
    put_vec(c.buffers);
    put_vec(c.opt_m);
    put_vec(c.opt_v);
    detail::put_u64le(out, static_cast<std::uint64_t>(c.opt_step));
    for (auto s : c.rng_state) detail::put_u64le(out, s);
    detail::put_u64le(out, static_cast<std::uint64_t>(c.epoch));
    detail::put_u64le(out, static_cast<std::uint64_t>(c.step_in_epoch));
    detail::put_u64le(out, c.permutation.size());
    for (auto p : c.permutation) detail::put_u64le(out, p);
    detail::put_f64le(out, c.h_scale);

    detail::put_u32le(out, detail::crc32(out));
    return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 12 || bytes.compare(0, 4, "MTCK") != 0)
        throw std::runtime_error("not a checkpoint file (bad magic)");
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t version = detail::get_u32le(u + 4);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t stored_crc = detail::get_u32le(u + bytes.size() - 4);
    const std::uint32_t actual_crc = detail::crc32(bytes.substr(0, bytes.size() - 4));
    if (stored_crc != actual_crc) throw std::runtime_error("checkpoint checksum mismatch");

    detail::CkptReader r(bytes, 8);
    Checkpoint c;
    {
        const std::string meta_str = r.blob();
        nlohmann::json meta = nlohmann::json::parse(meta_str);
        detail::StrictObject o(meta, "checkpoint metadata");
        nlohmann::json section;
        if (!o.take("model", section)) throw std::runtime_error("checkpoint missing model config");
        c.model_cfg = model_config_from_json(section);
        if (!o.take("train", section)) throw std::runtime_error("checkpoint missing train config");
        c.train_cfg = train_config_from_json(section);
        o.finish();
    }
    c.params = r.f64_vec();
    c.buffers = r.f64_vec();
    c.opt_m = r.f64_vec();
    c.opt_v = r.f64_vec();
    c.opt_step = r.i64();
    for (auto& s : c.rng_state) s = r.u64();
    c.epoch = r.i64();
    c.step_in_epoch = r.i64();
    c.permutation = r.u64_vec();
    c.h_scale = r.f64();
    if (r.offset() + 4 != bytes.size())
        throw std::runtime_error("checkpoint has trailing bytes");

    const ModelLayout layout = build_layout(c.model_cfg);
    if (c.params.size() != layout.n_params || c.buffers.size() != layout.n_buffers ||
        c.opt_m.size() != layout.n_params || c.opt_v.size() != layout.n_params)
        throw std::runtime_error("checkpoint payload does not match its model config");
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    detail::write_file_bytes(path, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(detail::read_file_bytes(path));
}

/// Installs checkpoint weights and optimizer state into live objects.
inline void restore_state(const Checkpoint& c, ParamSet& ps, OptState& st) {
    if (!(ps.cfg == c.model_cfg))
        throw std::runtime_error("checkpoint model config does not match the live model");
    ps.data = c.params;
    ps.buffers = c.buffers;
    st.m = c.opt_m;
    st.v = c.opt_v;
    st.step = c.opt_step;
}

}  // namespace mtbit
