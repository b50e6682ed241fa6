#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtbit/ad.hpp"
#include "mtbit/rng.hpp"

namespace mtbit {

struct StageSpec {
    int width = 64;
    int blocks = 2;
    int stride = 1;
    bool operator==(const StageSpec&) const = default;
};

enum class DiffMode { signed_diff, absolute_diff };
enum class FuseMode { difference, concat };
enum class UpsampleMode { bilinear, learnable };

/// Network hyper-parameters.  paper_default() is the full-scale configuration;
/// tiny() is a desk-scale variant small enough for finite-difference checks.
struct ModelConfig {
    int input_size = 256;
    int bands = 3;
    int stride = 4;        // feature stride s: features live at input_size/s
    int feat_channels = 32;  // C
    int token_len = 4;       // L
    int enc_depth = 1;       // N
    int dec_depth = 8;       // M
    int enc_heads = 8;
    int enc_head_dim = 8;
    int dec_heads = 8;
    int dec_head_dim = 16;
    int mlp_ratio = 2;
    int stem_width = 64;
    int stem_kernel = 7;
    int stem_stride = 2;
    std::vector<StageSpec> stages = {{64, 2, 1}, {128, 2, 2}, {256, 2, 2}, {512, 2, 2}};
    DiffMode diff_mode = DiffMode::signed_diff;
    FuseMode fuse_mode = FuseMode::difference;
    UpsampleMode upsample_mode = UpsampleMode::bilinear;

    bool operator==(const ModelConfig&) const = default;

    static ModelConfig paper_default() { return ModelConfig{}; }

    static ModelConfig tiny() {
        ModelConfig c;
        c.input_size = 16;
        c.bands = 3;
        c.stride = 2;
        c.feat_channels = 8;
        c.token_len = 2;
        c.enc_depth = 1;
        c.dec_depth = 1;
        c.enc_heads = 2;
        c.enc_head_dim = 4;
        c.dec_heads = 2;
        c.dec_head_dim = 4;
        c.mlp_ratio = 2;
        c.stem_width = 8;
        c.stem_kernel = 3;
        c.stem_stride = 1;
        c.stages = {{8, 1, 1}};
        return c;
    }

    int backbone_stride() const {
        int s = stem_stride * 2;  // stem conv, then 3x3/2 max pool
        for (const auto& st : stages) s *= st.stride;
        return s;
    }
    int feat_size() const { return input_size / stride; }
    int n_queries() const { return feat_size() * feat_size(); }
    int head_in_channels() const {
        return fuse_mode == FuseMode::concat ? 2 * feat_channels : feat_channels;
    }

    void validate() const {
        auto positive = [](int v, const char* what) {
            if (v < 1) throw std::invalid_argument(std::string(what) + " must be >= 1");
        };
        positive(input_size, "input_size");
        positive(bands, "bands");
        positive(stride, "stride");
        positive(feat_channels, "feat_channels");
        positive(token_len, "token_len");
        positive(enc_depth, "enc_depth");
        positive(dec_depth, "dec_depth");
        positive(enc_heads, "enc_heads");
        positive(enc_head_dim, "enc_head_dim");
        positive(dec_heads, "dec_heads");
        positive(dec_head_dim, "dec_head_dim");
        positive(mlp_ratio, "mlp_ratio");
        positive(stem_width, "stem_width");
        positive(stem_stride, "stem_stride");
        if (stem_kernel < 1 || stem_kernel % 2 == 0)
            throw std::invalid_argument("stem_kernel must be odd and >= 1");
        if (stages.empty()) throw std::invalid_argument("backbone needs at least one stage");
        for (const auto& st : stages) {
            positive(st.width, "stage width");
            positive(st.blocks, "stage blocks");
            positive(st.stride, "stage stride");
        }
        if (input_size % stride != 0)
            throw std::invalid_argument("input_size must be divisible by stride");
        if (input_size % backbone_stride() != 0)
            throw std::invalid_argument("input_size must be divisible by the backbone stride");
        if (backbone_stride() % stride != 0)
            throw std::invalid_argument("backbone stride must be a multiple of the feature stride");
        if (upsample_mode == UpsampleMode::learnable && stride % 2 != 0)
            throw std::invalid_argument("learnable upsampling requires an even feature stride");
    }
};

// --- parameter layout ---------------------------------------------------------

enum class InitKind { conv_he, linear_xavier, pos_enc, ones, zeros };

struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    bool decay = true;  // weight decay applies (off for norm scales and biases)
    InitKind init = InitKind::conv_he;
};

struct BufferInfo {
    std::string name;
    int size = 0;
    std::size_t offset = 0;
    double init = 0.0;
};

/// Stable flat enumeration of every learnable scalar plus the batch-norm
/// running-statistic buffers.  Both the optimizer and the checkpoint format
/// key off this ordering, so it must depend only on the configuration.
struct ModelLayout {
    std::vector<TensorInfo> tensors;
    std::vector<BufferInfo> buffers;
    std::size_t n_params = 0;
    std::size_t n_buffers = 0;
    std::unordered_map<std::string, int> tensor_index;
    std::unordered_map<std::string, int> buffer_index;

    const TensorInfo& tensor(const std::string& name) const {
        auto it = tensor_index.find(name);
        if (it == tensor_index.end()) throw std::logic_error("unknown tensor " + name);
        return tensors[static_cast<std::size_t>(it->second)];
    }
    bool has_tensor(const std::string& name) const { return tensor_index.count(name) > 0; }
    const BufferInfo& buffer(const std::string& name) const {
        auto it = buffer_index.find(name);
        if (it == buffer_index.end()) throw std::logic_error("unknown buffer " + name);
        return buffers[static_cast<std::size_t>(it->second)];
    }
};

namespace detail {

class LayoutBuilder {
  public:
    void tensor(const std::string& name, std::vector<int> shape, bool decay, InitKind init) {
        TensorInfo t{name, std::move(shape), layout.n_params, decay, init};
        layout.n_params += ad::numel_of(t.shape);
        layout.tensor_index.emplace(t.name, static_cast<int>(layout.tensors.size()));
        layout.tensors.push_back(std::move(t));
    }
    void norm_pair(const std::string& prefix, int c) {
        tensor(prefix + ".g", {c}, false, InitKind::ones);
        tensor(prefix + ".b", {c}, false, InitKind::zeros);
    }
    void bn(const std::string& prefix, int c) {
        norm_pair(prefix, c);
        buffer(prefix + ".mean", c, 0.0);
        buffer(prefix + ".var", c, 1.0);
    }
    void buffer(const std::string& name, int size, double init) {
        BufferInfo b{name, size, layout.n_buffers, init};
        layout.n_buffers += static_cast<std::size_t>(size);
        layout.buffer_index.emplace(b.name, static_cast<int>(layout.buffers.size()));
        layout.buffers.push_back(std::move(b));
    }
    ModelLayout layout;
};

}  // namespace detail

inline ModelLayout build_layout(const ModelConfig& cfg) {
    cfg.validate();
    detail::LayoutBuilder b;
    const int C = cfg.feat_channels, L = cfg.token_len;

    b.tensor("stem.conv.w", {cfg.stem_width, cfg.bands, cfg.stem_kernel, cfg.stem_kernel}, true,
             InitKind::conv_he);
    b.bn("stem.bn", cfg.stem_width);

    int cin = cfg.stem_width;
    for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
        const auto& st = cfg.stages[si];
        for (int bi = 0; bi < st.blocks; ++bi) {
            const std::string p = "s" + std::to_string(si) + ".b" + std::to_string(bi) + ".";
            const int stride = bi == 0 ? st.stride : 1;
            b.tensor(p + "conv1.w", {st.width, cin, 3, 3}, true, InitKind::conv_he);
            b.bn(p + "bn1", st.width);
            b.tensor(p + "conv2.w", {st.width, st.width, 3, 3}, true, InitKind::conv_he);
            b.bn(p + "bn2", st.width);
            if (cin != st.width || stride != 1) {
                b.tensor(p + "proj.w", {st.width, cin, 1, 1}, true, InitKind::conv_he);
                b.bn(p + "projbn", st.width);
            }
            cin = st.width;
        }
    }

    b.tensor("proj.w", {C, cin, 1, 1}, true, InitKind::conv_he);
    b.tensor("proj.b", {C}, false, InitKind::zeros);
    b.tensor("tok.w", {L, C, 1, 1}, true, InitKind::conv_he);

    const int hidden = cfg.mlp_ratio * C;
    for (int i = 0; i < cfg.enc_depth; ++i) {
        const std::string p = "enc" + std::to_string(i) + ".";
        b.norm_pair(p + "ln1", C);
        for (int h = 0; h < cfg.enc_heads; ++h) {
            const std::string hp = p + "h" + std::to_string(h) + ".";
            b.tensor(hp + "wq", {C, cfg.enc_head_dim}, true, InitKind::linear_xavier);
            b.tensor(hp + "wk", {C, cfg.enc_head_dim}, true, InitKind::linear_xavier);
            b.tensor(hp + "wv", {C, cfg.enc_head_dim}, true, InitKind::linear_xavier);
            b.tensor(hp + "pe", {2 * L, cfg.enc_head_dim}, true, InitKind::pos_enc);
        }
        b.tensor(p + "wo", {cfg.enc_heads * cfg.enc_head_dim, C}, true, InitKind::linear_xavier);
        b.norm_pair(p + "ln2", C);
        b.tensor(p + "mlp1.w", {C, hidden}, true, InitKind::linear_xavier);
        b.tensor(p + "mlp1.b", {hidden}, false, InitKind::zeros);
        b.tensor(p + "mlp2.w", {hidden, C}, true, InitKind::linear_xavier);
        b.tensor(p + "mlp2.b", {C}, false, InitKind::zeros);
    }

    for (int i = 0; i < cfg.dec_depth; ++i) {
        const std::string p = "dec" + std::to_string(i) + ".";
        b.norm_pair(p + "ln1", C);
        b.tensor(p + "peq", {cfg.n_queries(), C}, true, InitKind::pos_enc);
        for (int h = 0; h < cfg.dec_heads; ++h) {
            const std::string hp = p + "h" + std::to_string(h) + ".";
            b.tensor(hp + "wq", {C, cfg.dec_head_dim}, true, InitKind::linear_xavier);
            b.tensor(hp + "wk", {C, cfg.dec_head_dim}, true, InitKind::linear_xavier);
            b.tensor(hp + "wv", {C, cfg.dec_head_dim}, true, InitKind::linear_xavier);
        }
        b.tensor(p + "wo", {cfg.dec_heads * cfg.dec_head_dim, C}, true, InitKind::linear_xavier);
        b.norm_pair(p + "ln2", C);
        b.tensor(p + "mlp1.w", {C, hidden}, true, InitKind::linear_xavier);
        b.tensor(p + "mlp1.b", {hidden}, false, InitKind::zeros);
        b.tensor(p + "mlp2.w", {hidden, C}, true, InitKind::linear_xavier);
        b.tensor(p + "mlp2.b", {C}, false, InitKind::zeros);
    }

    const int hc = cfg.head_in_channels();
    if (cfg.upsample_mode == UpsampleMode::learnable)
        b.tensor("up.w", {hc, hc, 2 * cfg.stride, 2 * cfg.stride}, true, InitKind::conv_he);
    b.tensor("f1.w", {2, hc, 3, 3}, true, InitKind::conv_he);
    b.tensor("f1.b", {2}, false, InitKind::zeros);
    b.tensor("f2.w", {1, hc, 3, 3}, true, InitKind::conv_he);
    b.tensor("f2.b", {1}, false, InitKind::zeros);

    return std::move(b.layout);
}

inline std::size_t param_count(const ModelConfig& cfg) { return build_layout(cfg).n_params; }

/// Owns the flat parameter vector and the batch-norm running buffers.
struct ParamSet {
    ModelConfig cfg;
    ModelLayout layout;
    std::vector<double> data;
    std::vector<double> buffers;

    explicit ParamSet(const ModelConfig& c) : cfg(c), layout(build_layout(c)) {
        data.assign(layout.n_params, 0.0);
        buffers.assign(layout.n_buffers, 0.0);
        for (const auto& bi : layout.buffers)
            std::fill(buffers.begin() + static_cast<std::ptrdiff_t>(bi.offset),
                      buffers.begin() + static_cast<std::ptrdiff_t>(bi.offset) + bi.size, bi.init);
    }

    void init(std::uint64_t seed) {
        Rng rng(stream_seed(seed, 0x9e3779b97f4a7c15ull));
        for (const auto& t : layout.tensors) {
            double* p = data.data() + t.offset;
            const std::size_t n = ad::numel_of(t.shape);
            switch (t.init) {
                case InitKind::conv_he: {
                    std::size_t fan_in = 1;
                    for (std::size_t d = 1; d < t.shape.size(); ++d)
                        fan_in *= static_cast<std::size_t>(t.shape[d]);
                    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
                    for (std::size_t i = 0; i < n; ++i) p[i] = rng.normal(0.0, sigma);
                    break;
                }
                case InitKind::linear_xavier: {
                    const double a =
                        std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
                    for (std::size_t i = 0; i < n; ++i) p[i] = rng.uniform(-a, a);
                    break;
                }
                case InitKind::pos_enc:
                    for (std::size_t i = 0; i < n; ++i) p[i] = rng.normal(0.0, 0.02);
                    break;
                case InitKind::ones:
                    for (std::size_t i = 0; i < n; ++i) p[i] = 1.0;
                    break;
                case InitKind::zeros:
                    for (std::size_t i = 0; i < n; ++i) p[i] = 0.0;
                    break;
            }
        }
    }

    double* buf(const std::string& name) { return buffers.data() + layout.buffer(name).offset; }
};

// --- binding parameters onto a tape -------------------------------------------

struct Bound {
    const ModelLayout* layout = nullptr;
    std::vector<int> nodes;  // tape node per layout tensor, same order

    int operator[](const std::string& name) const {
        return nodes[static_cast<std::size_t>(layout->tensor_index.at(name))];
    }
    bool has(const std::string& name) const { return layout->has_tensor(name); }
};

inline Bound bind_params(ad::Tape& tape, const ParamSet& ps) {
    Bound b;
    b.layout = &ps.layout;
    b.nodes.reserve(ps.layout.tensors.size());
    for (const auto& t : ps.layout.tensors)
        b.nodes.push_back(tape.leaf(t.shape, ps.data.data() + t.offset, true));
    return b;
}

/// Sums tape adjoints into a flat gradient aligned with the layout.  Call
/// after backward(); accumulates (does not zero) so per-sample gradients can
/// be pooled in a fixed order.
inline void accumulate_param_grads(const ad::Tape& tape, const Bound& bound,
                                   std::vector<double>& grad) {
    const auto& layout = *bound.layout;
    if (grad.size() != layout.n_params) throw std::invalid_argument("gradient size mismatch");
    for (std::size_t k = 0; k < layout.tensors.size(); ++k) {
        const auto& t = layout.tensors[k];
        const auto& g = tape.grad(bound.nodes[k]);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw std::runtime_error("non-finite gradient at parameter " +
                                         std::to_string(t.offset + i) + " (" + t.name + ")");
            grad[t.offset + i] += g[i];
        }
    }
}

// --- forward pieces -----------------------------------------------------------

struct ForwardTrace {
    int feat1 = -1, feat2 = -1;      // {C, H', W'} backbone features
    int attn1 = -1, attn2 = -1;      // {L, H'W'} tokenizer attention maps
    int tokens1 = -1, tokens2 = -1;  // {L, C}
    int enc_tokens = -1;             // {2L, C} encoder output T*
    std::vector<int> enc_attn;       // per layer, per head: {2L, 2L}
    std::vector<int> dec_attn1, dec_attn2;  // per layer, per head: {H'W', L}
    int y1 = -1, y2 = -1;            // {C, H', W'} decoded features
    int m2d_logits = -1, m3d_pre = -1;
    int m2d = -1;  // {2, S, S} sigmoid scores
    int m3d = -1;  // {1, S, S} tanh values
};

namespace detail {

/// Residual block over a whole mini-batch: convolutions act per sample, batch
/// normalization pools its statistics across the batch (a batch of one is the
/// single-sample case exactly).
inline std::vector<int> basic_block(ad::Tape& t, ParamSet& ps, const Bound& b,
                                    std::vector<int> xs, const std::string& p, int stride,
                                    bool training) {
    std::vector<int> h(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i)
        h[i] = t.conv2d(xs[i], b[p + "conv1.w"], -1, stride, 1);
    h = t.batchnorm2d_joint(h, b[p + "bn1.g"], b[p + "bn1.b"], ps.buf(p + "bn1.mean"),
                            ps.buf(p + "bn1.var"), training);
    for (auto& n : h) n = t.relu(n);
    for (auto& n : h) n = t.conv2d(n, b[p + "conv2.w"], -1, 1, 1);
    h = t.batchnorm2d_joint(h, b[p + "bn2.g"], b[p + "bn2.b"], ps.buf(p + "bn2.mean"),
                            ps.buf(p + "bn2.var"), training);
    std::vector<int> shortcut = xs;
    if (b.has(p + "proj.w")) {
        for (auto& n : shortcut) n = t.conv2d(n, b[p + "proj.w"], -1, stride, 0);
        shortcut = t.batchnorm2d_joint(shortcut, b[p + "projbn.g"], b[p + "projbn.b"],
                                       ps.buf(p + "projbn.mean"), ps.buf(p + "projbn.var"),
                                       training);
    }
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = t.relu(t.add(h[i], shortcut[i]));
    return h;
}

}  // namespace detail

/// Backbone over a mini-batch of images (one tape node per sample). All batch
/// normalization statistics pool across the batch and each buffer pair is
/// updated once per call.
inline std::vector<int> backbone_forward_batch(ad::Tape& t, const ModelConfig& cfg, ParamSet& ps,
                                               const Bound& b, std::vector<int> xs,
                                               bool training) {
    for (int x : xs)
        if (t.shape(x) != std::vector<int>{cfg.bands, cfg.input_size, cfg.input_size})
            throw std::invalid_argument("backbone: input shape mismatch");
    std::vector<int> h(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i)
        h[i] = t.conv2d(xs[i], b["stem.conv.w"], -1, cfg.stem_stride, cfg.stem_kernel / 2);
    h = t.batchnorm2d_joint(h, b["stem.bn.g"], b["stem.bn.b"], ps.buf("stem.bn.mean"),
                            ps.buf("stem.bn.var"), training);
    for (auto& n : h) n = t.relu(n);
    for (auto& n : h) n = t.maxpool(n, 3, 2, 1);
    for (std::size_t si = 0; si < cfg.stages.size(); ++si)
        for (int bi = 0; bi < cfg.stages[si].blocks; ++bi) {
            const std::string p = "s" + std::to_string(si) + ".b" + std::to_string(bi) + ".";
            const int stride = bi == 0 ? cfg.stages[si].stride : 1;
            h = detail::basic_block(t, ps, b, h, p, stride, training);
        }
    for (auto& n : h) n = t.conv2d(n, b["proj.w"], b["proj.b"], 1, 0);
    const int factor = cfg.backbone_stride() / cfg.stride;
    if (factor > 1)
        for (auto& n : h) n = t.bilinear_up(n, factor);
    return h;
}

inline int backbone_forward(ad::Tape& t, const ModelConfig& cfg, ParamSet& ps, const Bound& b,
                            int x, bool training) {
    return backbone_forward_batch(t, cfg, ps, b, {x}, training)[0];
}

/// Returns {tokens {L,C}, attention {L,P}}.  Each attention row is a softmax
/// over the P spatial positions, so every token is a convex combination of
/// pixel features.
inline std::pair<int, int> tokenize(ad::Tape& t, const ModelConfig& cfg, const Bound& b,
                                    int feat) {
    const int P = t.shape(feat)[1] * t.shape(feat)[2];
    int logits = t.conv2d(feat, b["tok.w"], -1, 1, 0);
    logits = t.reshape(logits, {cfg.token_len, P});
    const int attn = t.softmax_rows(logits);
    const int rows = t.img_to_rows(feat);  // {P, C}
    return {t.matmul(attn, rows), attn};
}

inline int encode(ad::Tape& t, const ModelConfig& cfg, const Bound& b, int tokens,
                  ForwardTrace* trace) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.enc_head_dim));
    for (int i = 0; i < cfg.enc_depth; ++i) {
        const std::string p = "enc" + std::to_string(i) + ".";
        const int u = t.layernorm_rows(tokens, b[p + "ln1.g"], b[p + "ln1.b"]);
        int cat = -1;
        for (int h = 0; h < cfg.enc_heads; ++h) {
            const std::string hp = p + "h" + std::to_string(h) + ".";
            const int q = t.matmul(u, b[hp + "wq"]);
            const int k = t.matmul(u, b[hp + "wk"]);
            const int v = t.matmul(u, b[hp + "wv"]);
            const int scores = t.scale(t.matmul(q, t.transpose2d(k)), inv_sqrt_d);
            const int probs = t.softmax_rows(scores);
            if (trace) trace->enc_attn.push_back(probs);
            const int head = t.add(t.matmul(probs, v), b[hp + "pe"]);
            cat = h == 0 ? head : t.hstack(cat, head);
        }
        tokens = t.add(tokens, t.matmul(cat, b[p + "wo"]));
        const int n = t.layernorm_rows(tokens, b[p + "ln2.g"], b[p + "ln2.b"]);
        int m = t.add_rows(t.matmul(n, b[p + "mlp1.w"]), b[p + "mlp1.b"]);
        m = t.gelu(m);
        m = t.add_rows(t.matmul(m, b[p + "mlp2.w"]), b[p + "mlp2.b"]);
        tokens = t.add(tokens, m);
    }
    return tokens;
}

/// Cross-attention decoder: the P pixel features query the L tokens of the
/// same epoch.  Each layer adds its learnable query positional term to the
/// normed pixel features before projecting queries.
inline int decode(ad::Tape& t, const ModelConfig& cfg, const Bound& b, int feat, int tokens,
                  std::vector<int>* attn_trace) {
    const int H = t.shape(feat)[1], W = t.shape(feat)[2];
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.dec_head_dim));
    int x = t.img_to_rows(feat);  // {P, C}
    for (int i = 0; i < cfg.dec_depth; ++i) {
        const std::string p = "dec" + std::to_string(i) + ".";
        const int u = t.add(t.layernorm_rows(x, b[p + "ln1.g"], b[p + "ln1.b"]), b[p + "peq"]);
        int cat = -1;
        for (int h = 0; h < cfg.dec_heads; ++h) {
            const std::string hp = p + "h" + std::to_string(h) + ".";
            const int q = t.matmul(u, b[hp + "wq"]);
            const int k = t.matmul(tokens, b[hp + "wk"]);
            const int v = t.matmul(tokens, b[hp + "wv"]);
            const int scores = t.scale(t.matmul(q, t.transpose2d(k)), inv_sqrt_d);
            const int probs = t.softmax_rows(scores);
            if (attn_trace) attn_trace->push_back(probs);
            const int head = t.matmul(probs, v);
            cat = h == 0 ? head : t.hstack(cat, head);
        }
        x = t.add(x, t.matmul(cat, b[p + "wo"]));
        const int n = t.layernorm_rows(x, b[p + "ln2.g"], b[p + "ln2.b"]);
        int m = t.add_rows(t.matmul(n, b[p + "mlp1.w"]), b[p + "mlp1.b"]);
        m = t.gelu(m);
        m = t.add_rows(t.matmul(m, b[p + "mlp2.w"]), b[p + "mlp2.b"]);
        x = t.add(x, m);
    }
    return t.rows_to_img(x, H, W);
}

struct HeadsOut {
    int m2d = -1, m3d = -1, m2d_logits = -1, m3d_pre = -1;
};

inline HeadsOut heads_forward(ad::Tape& t, const ModelConfig& cfg, const Bound& b, int y1,
                              int y2) {
    if (t.shape(y1) != t.shape(y2)) throw std::invalid_argument("heads: feature shape mismatch");
    int d;
    if (cfg.fuse_mode == FuseMode::concat) {
        d = t.concat_ch(y1, y2);
    } else {
        d = t.sub(y2, y1);
        if (cfg.diff_mode == DiffMode::absolute_diff)
            d = t.add(t.relu(d), t.relu(t.scale(d, -1.0)));
    }
    int up;
    if (cfg.upsample_mode == UpsampleMode::learnable)
        up = t.conv2d_transpose(d, b["up.w"], cfg.stride, cfg.stride / 2);
    else
        up = t.bilinear_up(d, cfg.stride);
    HeadsOut o;
    o.m2d_logits = t.conv2d(up, b["f1.w"], b["f1.b"], 1, 1);
    o.m2d = t.sigmoid(o.m2d_logits);
    o.m3d_pre = t.conv2d(up, b["f2.w"], b["f2.b"], 1, 1);
    o.m3d = t.tanh_(o.m3d_pre);
    return o;
}

struct ForwardResult {
    Bound bound;
    ForwardTrace trace;
};

struct BatchForwardResult {
    Bound bound;
    std::vector<ForwardTrace> traces;
};

/// Full network pass on a mini-batch of bitemporal pairs (planar band-major
/// doubles in [0,1]) sharing one tape and one set of bound weights. The
/// backbone runs with batch-pooled normalization statistics, once over the
/// epoch-1 images and once over the epoch-2 images; everything after the
/// backbone is per sample. The same bound weights serve both epochs — the
/// Siamese property is sharing by construction.
inline BatchForwardResult forward_batch(ad::Tape& t, ParamSet& ps,
                                        const std::vector<const std::vector<double>*>& x1s,
                                        const std::vector<const std::vector<double>*>& x2s,
                                        bool training) {
    const auto& cfg = ps.cfg;
    if (x1s.empty() || x1s.size() != x2s.size())
        throw std::invalid_argument("forward: batch lists empty or mismatched");
    const std::size_t want =
        static_cast<std::size_t>(cfg.bands) * cfg.input_size * cfg.input_size;
    for (std::size_t i = 0; i < x1s.size(); ++i)
        if (x1s[i]->size() != want || x2s[i]->size() != want)
            throw std::invalid_argument("forward: input size mismatch");

    BatchForwardResult r;
    r.bound = bind_params(t, ps);
    const std::vector<int> in_shape{cfg.bands, cfg.input_size, cfg.input_size};
    std::vector<int> n1s, n2s;
    for (std::size_t i = 0; i < x1s.size(); ++i) {
        n1s.push_back(t.leaf(in_shape, x1s[i]->data(), false));
        n2s.push_back(t.leaf(in_shape, x2s[i]->data(), false));
    }

    const std::vector<int> feats1 = backbone_forward_batch(t, cfg, ps, r.bound, n1s, training);
    const std::vector<int> feats2 = backbone_forward_batch(t, cfg, ps, r.bound, n2s, training);

    r.traces.resize(x1s.size());
    for (std::size_t i = 0; i < x1s.size(); ++i) {
        ForwardTrace& tr = r.traces[i];
        tr.feat1 = feats1[i];
        tr.feat2 = feats2[i];
        auto [tok1, attn1] = tokenize(t, cfg, r.bound, tr.feat1);
        auto [tok2, attn2] = tokenize(t, cfg, r.bound, tr.feat2);
        tr.tokens1 = tok1;
        tr.tokens2 = tok2;
        tr.attn1 = attn1;
        tr.attn2 = attn2;

        const int tstar = t.vstack(tok1, tok2);
        tr.enc_tokens = encode(t, cfg, r.bound, tstar, &tr);
        const int s1 = t.slice_rows(tr.enc_tokens, 0, cfg.token_len);
        const int s2 = t.slice_rows(tr.enc_tokens, cfg.token_len, 2 * cfg.token_len);

        tr.y1 = decode(t, cfg, r.bound, tr.feat1, s1, &tr.dec_attn1);
        tr.y2 = decode(t, cfg, r.bound, tr.feat2, s2, &tr.dec_attn2);

        const HeadsOut h = heads_forward(t, cfg, r.bound, tr.y1, tr.y2);
        tr.m2d = h.m2d;
        tr.m3d = h.m3d;
        tr.m2d_logits = h.m2d_logits;
        tr.m3d_pre = h.m3d_pre;
    }
    return r;
}

/// Single-pair pass: a batch of one.
inline ForwardResult forward(ad::Tape& t, ParamSet& ps, const std::vector<double>& x1,
                             const std::vector<double>& x2, bool training) {
    BatchForwardResult br = forward_batch(t, ps, {&x1}, {&x2}, training);
    return ForwardResult{std::move(br.bound), std::move(br.traces[0])};
}

}  // namespace mtbit
