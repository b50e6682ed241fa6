#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtbit::ad {

inline std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

/// Reverse-mode tape over dense double tensors.  Each op appends a node with
/// its forward value and a closure that scatters adjoints into its inputs;
/// backward() replays the closures in reverse.  All loops are sequential with
/// a fixed iteration order, so gradients are bit-reproducible.
///
/// A tape is single-shot: build a graph, call backward once, then discard.
class Tape {
  public:
    struct Node {
        std::vector<int> shape;
        std::vector<double> val;
        std::vector<double> grad;
        bool needs_grad = false;
    };

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
    const std::vector<double>& val(int i) const { return node(i).val; }
    const std::vector<double>& grad(int i) const { return node(i).grad; }
    const std::vector<int>& shape(int i) const { return node(i).shape; }
    std::size_t numel(int i) const { return node(i).val.size(); }

    int leaf(const std::vector<int>& shape, const double* src, bool needs_grad) {
        const int y = alloc(shape, needs_grad);
        std::copy(src, src + nodes_[y].val.size(), nodes_[y].val.begin());
        return y;
    }
    int constant(const std::vector<int>& shape, double fill) {
        const int y = alloc(shape, false);
        std::fill(nodes_[y].val.begin(), nodes_[y].val.end(), fill);
        return y;
    }
    int constant(const std::vector<int>& shape, const std::vector<double>& values) {
        if (values.size() != numel_of(shape)) throw std::invalid_argument("constant: size mismatch");
        return leaf(shape, values.data(), false);
    }

    void backward(int loss) {
        if (numel(loss) != 1) throw std::invalid_argument("backward: loss must be scalar");
        nodes_[static_cast<std::size_t>(loss)].grad[0] = 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    // --- elementwise -----------------------------------------------------------

    int add(int a, int b) {
        check_same_shape(a, b, "add");
        const int y = alloc(shape(a), needs(a) || needs(b));
        for (std::size_t i = 0; i < numel(y); ++i)
            nodes_[y].val[i] = nodes_[a].val[i] + nodes_[b].val[i];
        record([this, a, b, y] {
            if (needs(a))
                for (std::size_t i = 0; i < numel(y); ++i) nodes_[a].grad[i] += nodes_[y].grad[i];
            if (needs(b))
                for (std::size_t i = 0; i < numel(y); ++i) nodes_[b].grad[i] += nodes_[y].grad[i];
        });
        return y;
    }

    int sub(int a, int b) {
        check_same_shape(a, b, "sub");
        const int y = alloc(shape(a), needs(a) || needs(b));
        for (std::size_t i = 0; i < numel(y); ++i)
            nodes_[y].val[i] = nodes_[a].val[i] - nodes_[b].val[i];
        record([this, a, b, y] {
            if (needs(a))
                for (std::size_t i = 0; i < numel(y); ++i) nodes_[a].grad[i] += nodes_[y].grad[i];
            if (needs(b))
                for (std::size_t i = 0; i < numel(y); ++i) nodes_[b].grad[i] -= nodes_[y].grad[i];
        });
        return y;
    }

    int mul(int a, int b) {
        check_same_shape(a, b, "mul");
        const int y = alloc(shape(a), needs(a) || needs(b));
        for (std::size_t i = 0; i < numel(y); ++i)
            nodes_[y].val[i] = nodes_[a].val[i] * nodes_[b].val[i];
        record([this, a, b, y] {
            if (needs(a))
                for (std::size_t i = 0; i < numel(y); ++i)
                    nodes_[a].grad[i] += nodes_[y].grad[i] * nodes_[b].val[i];
            if (needs(b))
                for (std::size_t i = 0; i < numel(y); ++i)
                    nodes_[b].grad[i] += nodes_[y].grad[i] * nodes_[a].val[i];
        });
        return y;
    }

    int scale(int a, double c) {
        const int y = alloc(shape(a), needs(a));
        for (std::size_t i = 0; i < numel(y); ++i) nodes_[y].val[i] = nodes_[a].val[i] * c;
        record([this, a, y, c] {
            if (needs(a))
                for (std::size_t i = 0; i < numel(y); ++i) nodes_[a].grad[i] += nodes_[y].grad[i] * c;
        });
        return y;
    }

    int add_scalar(int a, double c) {
        const int y = alloc(shape(a), needs(a));
        for (std::size_t i = 0; i < numel(y); ++i) nodes_[y].val[i] = nodes_[a].val[i] + c;
        record([this, a, y] {
            if (needs(a))
                for (std::size_t i = 0; i < numel(y); ++i) nodes_[a].grad[i] += nodes_[y].grad[i];
        });
        return y;
    }

    int relu(int a) {
        const int y = alloc(shape(a), needs(a));
        for (std::size_t i = 0; i < numel(y); ++i) nodes_[y].val[i] = std::max(0.0, nodes_[a].val[i]);
        record([this, a, y] {
            if (!needs(a)) return;
            for (std::size_t i = 0; i < numel(y); ++i)
                if (nodes_[a].val[i] > 0.0) nodes_[a].grad[i] += nodes_[y].grad[i];
        });
        return y;
    }

    int sigmoid(int a) {
        const int y = alloc(shape(a), needs(a));
        for (std::size_t i = 0; i < numel(y); ++i)
            nodes_[y].val[i] = 1.0 / (1.0 + std::exp(-nodes_[a].val[i]));
        record([this, a, y] {
            if (!needs(a)) return;
            for (std::size_t i = 0; i < numel(y); ++i) {
                const double s = nodes_[y].val[i];
                nodes_[a].grad[i] += nodes_[y].grad[i] * s * (1.0 - s);
            }
        });
        return y;
    }

    int tanh_(int a) {
        const int y = alloc(shape(a), needs(a));
        for (std::size_t i = 0; i < numel(y); ++i) nodes_[y].val[i] = std::tanh(nodes_[a].val[i]);
        record([this, a, y] {
            if (!needs(a)) return;
            for (std::size_t i = 0; i < numel(y); ++i) {
                const double t = nodes_[y].val[i];
                nodes_[a].grad[i] += nodes_[y].grad[i] * (1.0 - t * t);
            }
        });
        return y;
    }

    // Exact (erf-based) GELU.
    int gelu(int a) {
        const int y = alloc(shape(a), needs(a));
        for (std::size_t i = 0; i < numel(y); ++i) {
            const double x = nodes_[a].val[i];
            nodes_[y].val[i] = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
        }
        record([this, a, y] {
            if (!needs(a)) return;
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            for (std::size_t i = 0; i < numel(y); ++i) {
                const double x = nodes_[a].val[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                nodes_[a].grad[i] += nodes_[y].grad[i] * (cdf + x * pdf);
            }
        });
        return y;
    }

    int log_(int a) {
        const int y = alloc(shape(a), needs(a));
        for (std::size_t i = 0; i < numel(y); ++i) {
            const double x = nodes_[a].val[i];
            if (!(x > 0.0)) throw std::domain_error("log: non-positive input");
            nodes_[y].val[i] = std::log(x);
        }
        record([this, a, y] {
            if (!needs(a)) return;
            for (std::size_t i = 0; i < numel(y); ++i)
                nodes_[a].grad[i] += nodes_[y].grad[i] / nodes_[a].val[i];
        });
        return y;
    }

    // Gradient is passed inside [lo, hi] and dropped outside.
    int clamp(int a, double lo, double hi) {
        const int y = alloc(shape(a), needs(a));
        for (std::size_t i = 0; i < numel(y); ++i)
            nodes_[y].val[i] = std::clamp(nodes_[a].val[i], lo, hi);
        record([this, a, y, lo, hi] {
            if (!needs(a)) return;
            for (std::size_t i = 0; i < numel(y); ++i) {
                const double x = nodes_[a].val[i];
                if (x >= lo && x <= hi) nodes_[a].grad[i] += nodes_[y].grad[i];
            }
        });
        return y;
    }

    // --- reductions ------------------------------------------------------------

    int sum_all(int a) {
        const int y = alloc({1}, needs(a));
        double s = 0.0;
        for (std::size_t i = 0; i < numel(a); ++i) s += nodes_[a].val[i];
        nodes_[y].val[0] = s;
        record([this, a, y] {
            if (!needs(a)) return;
            const double g = nodes_[y].grad[0];
            for (std::size_t i = 0; i < numel(a); ++i) nodes_[a].grad[i] += g;
        });
        return y;
    }

    int mean_all(int a) { return scale(sum_all(a), 1.0 / static_cast<double>(numel(a))); }

    // --- matrices (row-major {rows, cols}) -------------------------------------

    int matmul(int a, int b) {
        check_rank(a, 2, "matmul lhs");
        check_rank(b, 2, "matmul rhs");
        const int m = shape(a)[0], k = shape(a)[1], k2 = shape(b)[0], n = shape(b)[1];
        if (k != k2) throw std::invalid_argument("matmul: inner dimensions disagree");
        const int y = alloc({m, n}, needs(a) || needs(b));
        {
            const auto& av = nodes_[a].val;
            const auto& bv = nodes_[b].val;
            auto& yv = nodes_[y].val;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int t = 0; t < k; ++t) s += av[i * k + t] * bv[t * n + j];
                    yv[i * n + j] = s;
                }
        }
        record([this, a, b, y, m, k, n] {
            const auto& gy = nodes_[y].grad;
            if (needs(a)) {
                auto& ga = nodes_[a].grad;
                const auto& bv = nodes_[b].val;
                for (int i = 0; i < m; ++i)
                    for (int t = 0; t < k; ++t) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += gy[i * n + j] * bv[t * n + j];
                        ga[i * k + t] += s;
                    }
            }
            if (needs(b)) {
                auto& gb = nodes_[b].grad;
                const auto& av = nodes_[a].val;
                for (int t = 0; t < k; ++t)
                    for (int j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < m; ++i) s += av[i * k + t] * gy[i * n + j];
                        gb[t * n + j] += s;
                    }
            }
        });
        return y;
    }

    int transpose2d(int a) {
        check_rank(a, 2, "transpose");
        const int m = shape(a)[0], n = shape(a)[1];
        const int y = alloc({n, m}, needs(a));
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) nodes_[y].val[j * m + i] = nodes_[a].val[i * n + j];
        record([this, a, y, m, n] {
            if (!needs(a)) return;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) nodes_[a].grad[i * n + j] += nodes_[y].grad[j * m + i];
        });
        return y;
    }

    int add_rows(int a, int b) {  // a {m,n} + bias b {n}, broadcast over rows
        check_rank(a, 2, "add_rows lhs");
        check_rank(b, 1, "add_rows bias");
        const int m = shape(a)[0], n = shape(a)[1];
        if (shape(b)[0] != n) throw std::invalid_argument("add_rows: width mismatch");
        const int y = alloc({m, n}, needs(a) || needs(b));
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                nodes_[y].val[i * n + j] = nodes_[a].val[i * n + j] + nodes_[b].val[j];
        record([this, a, b, y, m, n] {
            if (needs(a))
                for (std::size_t i = 0; i < numel(y); ++i) nodes_[a].grad[i] += nodes_[y].grad[i];
            if (needs(b))
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) nodes_[b].grad[j] += nodes_[y].grad[i * n + j];
        });
        return y;
    }

    int softmax_rows(int a) {
        check_rank(a, 2, "softmax");
        const int m = shape(a)[0], n = shape(a)[1];
        const int y = alloc({m, n}, needs(a));
        for (int i = 0; i < m; ++i) {
            double mx = nodes_[a].val[i * n];
            for (int j = 1; j < n; ++j) mx = std::max(mx, nodes_[a].val[i * n + j]);
            double z = 0.0;
            for (int j = 0; j < n; ++j) {
                const double e = std::exp(nodes_[a].val[i * n + j] - mx);
                nodes_[y].val[i * n + j] = e;
                z += e;
            }
            for (int j = 0; j < n; ++j) nodes_[y].val[i * n + j] /= z;
        }
        record([this, a, y, m, n] {
            if (!needs(a)) return;
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j)
                    dot += nodes_[y].grad[i * n + j] * nodes_[y].val[i * n + j];
                for (int j = 0; j < n; ++j) {
                    const double s = nodes_[y].val[i * n + j];
                    nodes_[a].grad[i * n + j] += s * (nodes_[y].grad[i * n + j] - dot);
                }
            }
        });
        return y;
    }

    int vstack(int a, int b) {
        check_rank(a, 2, "vstack");
        check_rank(b, 2, "vstack");
        const int ma = shape(a)[0], n = shape(a)[1], mb = shape(b)[0];
        if (shape(b)[1] != n) throw std::invalid_argument("vstack: width mismatch");
        const int y = alloc({ma + mb, n}, needs(a) || needs(b));
        std::copy(nodes_[a].val.begin(), nodes_[a].val.end(), nodes_[y].val.begin());
        std::copy(nodes_[b].val.begin(), nodes_[b].val.end(),
                  nodes_[y].val.begin() + static_cast<std::ptrdiff_t>(numel(a)));
        record([this, a, b, y] {
            const std::size_t na = numel(a);
            if (needs(a))
                for (std::size_t i = 0; i < na; ++i) nodes_[a].grad[i] += nodes_[y].grad[i];
            if (needs(b))
                for (std::size_t i = 0; i < numel(b); ++i)
                    nodes_[b].grad[i] += nodes_[y].grad[na + i];
        });
        return y;
    }

    int hstack(int a, int b) {
        check_rank(a, 2, "hstack");
        check_rank(b, 2, "hstack");
        const int m = shape(a)[0], na = shape(a)[1], nb = shape(b)[1];
        if (shape(b)[0] != m) throw std::invalid_argument("hstack: height mismatch");
        const int y = alloc({m, na + nb}, needs(a) || needs(b));
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < na; ++j)
                nodes_[y].val[i * (na + nb) + j] = nodes_[a].val[i * na + j];
            for (int j = 0; j < nb; ++j)
                nodes_[y].val[i * (na + nb) + na + j] = nodes_[b].val[i * nb + j];
        }
        record([this, a, b, y, m, na, nb] {
            for (int i = 0; i < m; ++i) {
                if (needs(a))
                    for (int j = 0; j < na; ++j)
                        nodes_[a].grad[i * na + j] += nodes_[y].grad[i * (na + nb) + j];
                if (needs(b))
                    for (int j = 0; j < nb; ++j)
                        nodes_[b].grad[i * nb + j] += nodes_[y].grad[i * (na + nb) + na + j];
            }
        });
        return y;
    }

    int slice_rows(int a, int r0, int r1) {
        check_rank(a, 2, "slice_rows");
        const int m = shape(a)[0], n = shape(a)[1];
        if (r0 < 0 || r1 > m || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
        const int y = alloc({r1 - r0, n}, needs(a));
        std::copy(nodes_[a].val.begin() + static_cast<std::ptrdiff_t>(r0) * n,
                  nodes_[a].val.begin() + static_cast<std::ptrdiff_t>(r1) * n,
                  nodes_[y].val.begin());
        record([this, a, y, r0, n] {
            if (!needs(a)) return;
            for (std::size_t i = 0; i < numel(y); ++i)
                nodes_[a].grad[static_cast<std::size_t>(r0) * n + i] += nodes_[y].grad[i];
        });
        return y;
    }

    int layernorm_rows(int a, int gamma, int beta, double eps = 1e-5) {
        check_rank(a, 2, "layernorm");
        const int m = shape(a)[0], n = shape(a)[1];
        if (shape(gamma) != std::vector<int>{n} || shape(beta) != std::vector<int>{n})
            throw std::invalid_argument("layernorm: affine shape mismatch");
        const int y = alloc({m, n}, needs(a) || needs(gamma) || needs(beta));
        std::vector<double> xhat(numel(a));
        std::vector<double> inv_std(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) {
            double mu = 0.0;
            for (int j = 0; j < n; ++j) mu += nodes_[a].val[i * n + j];
            mu /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) {
                const double d = nodes_[a].val[i * n + j] - mu;
                var += d * d;
            }
            var /= n;
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(i)] = is;
            for (int j = 0; j < n; ++j) {
                const double h = (nodes_[a].val[i * n + j] - mu) * is;
                xhat[static_cast<std::size_t>(i) * n + j] = h;
                nodes_[y].val[i * n + j] = nodes_[gamma].val[j] * h + nodes_[beta].val[j];
            }
        }
        record([this, a, gamma, beta, y, m, n, xhat = std::move(xhat),
                inv_std = std::move(inv_std)] {
            for (int i = 0; i < m; ++i) {
                if (needs(gamma) || needs(beta))
                    for (int j = 0; j < n; ++j) {
                        const double gy = nodes_[y].grad[i * n + j];
                        if (needs(beta)) nodes_[beta].grad[j] += gy;
                        if (needs(gamma))
                            nodes_[gamma].grad[j] += gy * xhat[static_cast<std::size_t>(i) * n + j];
                    }
                if (!needs(a)) continue;
                double sg = 0.0, sgx = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double g = nodes_[y].grad[i * n + j] * nodes_[gamma].val[j];
                    sg += g;
                    sgx += g * xhat[static_cast<std::size_t>(i) * n + j];
                }
                for (int j = 0; j < n; ++j) {
                    const double g = nodes_[y].grad[i * n + j] * nodes_[gamma].val[j];
                    const double h = xhat[static_cast<std::size_t>(i) * n + j];
                    nodes_[a].grad[i * n + j] +=
                        inv_std[static_cast<std::size_t>(i)] * (g - sg / n - h * sgx / n);
                }
            }
        });
        return y;
    }

    // --- image ops ({C, H, W}) -------------------------------------------------

    int conv2d(int x, int w, int bias, int stride, int pad) {
        check_rank(x, 3, "conv2d input");
        check_rank(w, 4, "conv2d weight");
        const int C = shape(x)[0], H = shape(x)[1], W = shape(x)[2];
        const int O = shape(w)[0], kh = shape(w)[2], kw = shape(w)[3];
        if (shape(w)[1] != C) throw std::invalid_argument("conv2d: channel mismatch");
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");
        bool ng = needs(x) || needs(w) || (bias >= 0 && needs(bias));
        const int y = alloc({O, Ho, Wo}, ng);
        {
            const auto& xv = nodes_[x].val;
            const auto& wv = nodes_[w].val;
            auto& yv = nodes_[y].val;
            for (int o = 0; o < O; ++o) {
                const double b = bias >= 0 ? nodes_[bias].val[o] : 0.0;
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        double s = b;
                        for (int c = 0; c < C; ++c)
                            for (int u = 0; u < kh; ++u) {
                                const int iy = oy * stride - pad + u;
                                if (iy < 0 || iy >= H) continue;
                                for (int v = 0; v < kw; ++v) {
                                    const int ix = ox * stride - pad + v;
                                    if (ix < 0 || ix >= W) continue;
                                    s += xv[(c * H + iy) * W + ix] *
                                         wv[((o * C + c) * kh + u) * kw + v];
                                }
                            }
                        yv[(o * Ho + oy) * Wo + ox] = s;
                    }
            }
        }
        record([this, x, w, bias, y, C, H, W, O, kh, kw, Ho, Wo, stride, pad] {
            const auto& gy = nodes_[y].grad;
            if (bias >= 0 && needs(bias))
                for (int o = 0; o < O; ++o) {
                    double s = 0.0;
                    for (int i = 0; i < Ho * Wo; ++i) s += gy[o * Ho * Wo + i];
                    nodes_[bias].grad[o] += s;
                }
            const bool gx = needs(x), gw = needs(w);
            if (!gx && !gw) return;
            const auto& xv = nodes_[x].val;
            const auto& wv = nodes_[w].val;
            for (int o = 0; o < O; ++o)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        const double g = gy[(o * Ho + oy) * Wo + ox];
                        if (g == 0.0) continue;
                        for (int c = 0; c < C; ++c)
                            for (int u = 0; u < kh; ++u) {
                                const int iy = oy * stride - pad + u;
                                if (iy < 0 || iy >= H) continue;
                                for (int v = 0; v < kw; ++v) {
                                    const int ix = ox * stride - pad + v;
                                    if (ix < 0 || ix >= W) continue;
                                    if (gw)
                                        nodes_[w].grad[((o * C + c) * kh + u) * kw + v] +=
                                            g * xv[(c * H + iy) * W + ix];
                                    if (gx)
                                        nodes_[x].grad[(c * H + iy) * W + ix] +=
                                            g * wv[((o * C + c) * kh + u) * kw + v];
                                }
                            }
                    }
        });
        return y;
    }

    // Transposed convolution; weight layout {Cin, Cout, kh, kw}.
    int conv2d_transpose(int x, int w, int stride, int pad) {
        check_rank(x, 3, "tconv input");
        check_rank(w, 4, "tconv weight");
        const int C = shape(x)[0], H = shape(x)[1], W = shape(x)[2];
        const int O = shape(w)[1], kh = shape(w)[2], kw = shape(w)[3];
        if (shape(w)[0] != C) throw std::invalid_argument("tconv: channel mismatch");
        const int Ho = (H - 1) * stride - 2 * pad + kh;
        const int Wo = (W - 1) * stride - 2 * pad + kw;
        if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("tconv: empty output");
        const int y = alloc({O, Ho, Wo}, needs(x) || needs(w));
        {
            const auto& xv = nodes_[x].val;
            const auto& wv = nodes_[w].val;
            auto& yv = nodes_[y].val;
            for (int c = 0; c < C; ++c)
                for (int iy = 0; iy < H; ++iy)
                    for (int ix = 0; ix < W; ++ix) {
                        const double v = xv[(c * H + iy) * W + ix];
                        if (v == 0.0) continue;
                        for (int o = 0; o < O; ++o)
                            for (int u = 0; u < kh; ++u) {
                                const int oy = iy * stride - pad + u;
                                if (oy < 0 || oy >= Ho) continue;
                                for (int t = 0; t < kw; ++t) {
                                    const int ox = ix * stride - pad + t;
                                    if (ox < 0 || ox >= Wo) continue;
                                    yv[(o * Ho + oy) * Wo + ox] +=
                                        v * wv[((c * O + o) * kh + u) * kw + t];
                                }
                            }
                    }
        }
        record([this, x, w, y, C, H, W, O, kh, kw, Ho, Wo, stride, pad] {
            const auto& gy = nodes_[y].grad;
            const bool gx = needs(x), gw = needs(w);
            if (!gx && !gw) return;
            const auto& xv = nodes_[x].val;
            const auto& wv = nodes_[w].val;
            for (int c = 0; c < C; ++c)
                for (int iy = 0; iy < H; ++iy)
                    for (int ix = 0; ix < W; ++ix)
                        for (int o = 0; o < O; ++o)
                            for (int u = 0; u < kh; ++u) {
                                const int oy = iy * stride - pad + u;
                                if (oy < 0 || oy >= Ho) continue;
                                for (int t = 0; t < kw; ++t) {
                                    const int ox = ix * stride - pad + t;
                                    if (ox < 0 || ox >= Wo) continue;
                                    const double g = gy[(o * Ho + oy) * Wo + ox];
                                    if (gx)
                                        nodes_[x].grad[(c * H + iy) * W + ix] +=
                                            g * wv[((c * O + o) * kh + u) * kw + t];
                                    if (gw)
                                        nodes_[w].grad[((c * O + o) * kh + u) * kw + t] +=
                                            g * xv[(c * H + iy) * W + ix];
                                }
                            }
        });
        return y;
    }

    // Max pooling with implicit -inf padding; ties resolve to the first index
    // in scan order, so the subgradient choice is deterministic.
    int maxpool(int x, int k, int stride, int pad) {
        check_rank(x, 3, "maxpool input");
        const int C = shape(x)[0], H = shape(x)[1], W = shape(x)[2];
        const int Ho = (H + 2 * pad - k) / stride + 1;
        const int Wo = (W + 2 * pad - k) / stride + 1;
        if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("maxpool: empty output");
        const int y = alloc({C, Ho, Wo}, needs(x));
        std::vector<int> argmax(numel(y));
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    double best = -1e300;
                    int best_i = -1;
                    for (int u = 0; u < k; ++u) {
                        const int iy = oy * stride - pad + u;
                        if (iy < 0 || iy >= H) continue;
                        for (int v = 0; v < k; ++v) {
                            const int ix = ox * stride - pad + v;
                            if (ix < 0 || ix >= W) continue;
                            const double val = nodes_[x].val[(c * H + iy) * W + ix];
                            if (val > best) {
                                best = val;
                                best_i = (c * H + iy) * W + ix;
                            }
                        }
                    }
                    nodes_[y].val[(c * Ho + oy) * Wo + ox] = best;
                    argmax[static_cast<std::size_t>((c * Ho + oy) * Wo + ox)] = best_i;
                }
        record([this, x, y, argmax = std::move(argmax)] {
            if (!needs(x)) return;
            for (std::size_t i = 0; i < numel(y); ++i)
                nodes_[x].grad[static_cast<std::size_t>(argmax[i])] += nodes_[y].grad[i];
        });
        return y;
    }

    /// Batch norm over the spatial extent of a single sample (per-channel
    /// statistics).  In training mode the externally owned running buffers are
    /// updated in place with momentum, using the unbiased variance, mirroring
    /// the usual framework semantics.
    int batchnorm2d(int x, int gamma, int beta, double* running_mean, double* running_var,
                    bool training, double momentum = 0.1, double eps = 1e-5) {
        check_rank(x, 3, "batchnorm input");
        const int C = shape(x)[0], H = shape(x)[1], W = shape(x)[2];
        const int n = H * W;
        if (shape(gamma) != std::vector<int>{C} || shape(beta) != std::vector<int>{C})
            throw std::invalid_argument("batchnorm: affine shape mismatch");
        const int y = alloc({C, H, W}, needs(x) || needs(gamma) || needs(beta));
        std::vector<double> xhat(numel(x));
        std::vector<double> inv_std(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) {
            double mu, var;
            if (training) {
                mu = 0.0;
                for (int i = 0; i < n; ++i) mu += nodes_[x].val[c * n + i];
                mu /= n;
                var = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double d = nodes_[x].val[c * n + i] - mu;
                    var += d * d;
                }
                var /= n;
                const double unbiased = n > 1 ? var * n / (n - 1.0) : var;
                running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
                running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
            } else {
                mu = running_mean[c];
                var = running_var[c];
            }
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(c)] = is;
            for (int i = 0; i < n; ++i) {
                const double h = (nodes_[x].val[c * n + i] - mu) * is;
                xhat[static_cast<std::size_t>(c) * n + i] = h;
                nodes_[y].val[c * n + i] = nodes_[gamma].val[c] * h + nodes_[beta].val[c];
            }
        }
        record([this, x, gamma, beta, y, C, n, training, xhat = std::move(xhat),
                inv_std = std::move(inv_std)] {
            for (int c = 0; c < C; ++c) {
                if (needs(gamma) || needs(beta)) {
                    double sg = 0.0, sgx = 0.0;
                    for (int i = 0; i < n; ++i) {
                        const double gy = nodes_[y].grad[c * n + i];
                        sg += gy;
                        sgx += gy * xhat[static_cast<std::size_t>(c) * n + i];
                    }
                    if (needs(beta)) nodes_[beta].grad[c] += sg;
                    if (needs(gamma)) nodes_[gamma].grad[c] += sgx;
                }
                if (!needs(x)) continue;
                const double is = inv_std[static_cast<std::size_t>(c)];
                const double gm = nodes_[gamma].val[c];
                if (training) {
                    double sg = 0.0, sgx = 0.0;
                    for (int i = 0; i < n; ++i) {
                        const double gy = nodes_[y].grad[c * n + i];
                        sg += gy;
                        sgx += gy * xhat[static_cast<std::size_t>(c) * n + i];
                    }
                    for (int i = 0; i < n; ++i) {
                        const double gy = nodes_[y].grad[c * n + i];
                        const double h = xhat[static_cast<std::size_t>(c) * n + i];
                        nodes_[x].grad[c * n + i] += gm * is * (gy - sg / n - h * sgx / n);
                    }
                } else {
                    for (int i = 0; i < n; ++i)
                        nodes_[x].grad[c * n + i] += nodes_[y].grad[c * n + i] * gm * is;
                }
            }
        });
        return y;
    }

    // Batch normalization with statistics pooled over a whole mini-batch of
    // {C,H,W} maps living on this tape. With a single map this is exactly
    // batchnorm2d; with several, gradients include the coupling through the
    // shared statistics. Buffers are updated once per call.
    std::vector<int> batchnorm2d_joint(const std::vector<int>& xs, int gamma, int beta,
                                       double* running_mean, double* running_var, bool training,
                                       double momentum = 0.1, double eps = 1e-5) {
        if (xs.empty()) throw std::invalid_argument("batchnorm joint: empty batch");
        check_rank(xs[0], 3, "batchnorm input");
        const int C = shape(xs[0])[0], H = shape(xs[0])[1], W = shape(xs[0])[2];
        for (int x : xs)
            if (shape(x) != shape(xs[0]))
                throw std::invalid_argument("batchnorm joint: ragged batch shapes");
        if (shape(gamma) != std::vector<int>{C} || shape(beta) != std::vector<int>{C})
            throw std::invalid_argument("batchnorm: affine shape mismatch");
        const int N = static_cast<int>(xs.size());
        const int n = H * W;
        const long long total = static_cast<long long>(N) * n;

        bool any_x_needs = false;
        for (int x : xs) any_x_needs = any_x_needs || needs(x);
        std::vector<int> ys;
        ys.reserve(xs.size());
        for (int x : xs) ys.push_back(alloc({C, H, W}, needs(x) || needs(gamma) || needs(beta)));

        std::vector<double> xhat(static_cast<std::size_t>(total) * C);
        std::vector<double> inv_std(static_cast<std::size_t>(C));
        auto hat = [&](int s, int c, int i) -> double& {
            return xhat[(static_cast<std::size_t>(s) * C + c) * n + i];
        };
        for (int c = 0; c < C; ++c) {
            double mu, var;
            if (training) {
                mu = 0.0;
                for (int s = 0; s < N; ++s)
                    for (int i = 0; i < n; ++i) mu += nodes_[xs[s]].val[c * n + i];
                mu /= static_cast<double>(total);
                var = 0.0;
                for (int s = 0; s < N; ++s)
                    for (int i = 0; i < n; ++i) {
                        const double d = nodes_[xs[s]].val[c * n + i] - mu;
                        var += d * d;
                    }
                var /= static_cast<double>(total);
                const double unbiased = total > 1 ? var * total / (total - 1.0) : var;
                running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
                running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
            } else {
                mu = running_mean[c];
                var = running_var[c];
            }
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(c)] = is;
            for (int s = 0; s < N; ++s)
                for (int i = 0; i < n; ++i) {
                    const double h = (nodes_[xs[s]].val[c * n + i] - mu) * is;
                    hat(s, c, i) = h;
                    nodes_[ys[static_cast<std::size_t>(s)]].val[c * n + i] =
                        nodes_[gamma].val[c] * h + nodes_[beta].val[c];
                }
        }
        record([this, xs, ys, gamma, beta, C, N, n, total, training, any_x_needs,
                xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            auto hat = [&](int s, int c, int i) {
                return xhat[(static_cast<std::size_t>(s) * C + c) * n + i];
            };
            for (int c = 0; c < C; ++c) {
                double sg = 0.0, sgx = 0.0;
                for (int s = 0; s < N; ++s)
                    for (int i = 0; i < n; ++i) {
                        const double gy = nodes_[ys[static_cast<std::size_t>(s)]].grad[c * n + i];
                        sg += gy;
                        sgx += gy * hat(s, c, i);
                    }
                if (needs(beta)) nodes_[beta].grad[c] += sg;
                if (needs(gamma)) nodes_[gamma].grad[c] += sgx;
                if (!any_x_needs) continue;
                const double is = inv_std[static_cast<std::size_t>(c)];
                const double gm = nodes_[gamma].val[c];
                for (int s = 0; s < N; ++s) {
                    if (!needs(xs[static_cast<std::size_t>(s)])) continue;
                    for (int i = 0; i < n; ++i) {
                        const double gy = nodes_[ys[static_cast<std::size_t>(s)]].grad[c * n + i];
                        if (training) {
                            const double h = hat(s, c, i);
                            nodes_[xs[static_cast<std::size_t>(s)]].grad[c * n + i] +=
                                gm * is * (gy - sg / total - h * sgx / total);
                        } else {
                            nodes_[xs[static_cast<std::size_t>(s)]].grad[c * n + i] += gy * gm * is;
                        }
                    }
                }
            }
        });
        return ys;
    }

    // Bilinear upsampling by an integer factor with half-pixel centers.
    int bilinear_up(int x, int factor) {
        check_rank(x, 3, "bilinear_up input");
        if (factor < 1) throw std::invalid_argument("bilinear_up: factor must be >= 1");
        const int C = shape(x)[0], H = shape(x)[1], W = shape(x)[2];
        const int Ho = H * factor, Wo = W * factor;
        const int y = alloc({C, Ho, Wo}, needs(x));
        // Precompute 1-D tap indices and weights (shared by both passes).
        std::vector<int> y0(static_cast<std::size_t>(Ho)), x0(static_cast<std::size_t>(Wo));
        std::vector<double> wy(static_cast<std::size_t>(Ho)), wx(static_cast<std::size_t>(Wo));
        auto taps = [](int out, int in, int factor_, std::vector<int>& i0, std::vector<double>& w) {
            for (int o = 0; o < out; ++o) {
                double src = (o + 0.5) / factor_ - 0.5;
                src = std::clamp(src, 0.0, in - 1.0);
                const int lo = std::min(static_cast<int>(src), in > 1 ? in - 2 : 0);
                i0[static_cast<std::size_t>(o)] = lo;
                w[static_cast<std::size_t>(o)] = src - lo;
            }
        };
        taps(Ho, H, factor, y0, wy);
        taps(Wo, W, factor, x0, wx);
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const int iy = y0[static_cast<std::size_t>(oy)];
                    const int ix = x0[static_cast<std::size_t>(ox)];
                    const int iy1 = std::min(iy + 1, H - 1), ix1 = std::min(ix + 1, W - 1);
                    const double ay = wy[static_cast<std::size_t>(oy)];
                    const double ax = wx[static_cast<std::size_t>(ox)];
                    nodes_[y].val[(c * Ho + oy) * Wo + ox] =
                        (1 - ay) * (1 - ax) * nodes_[x].val[(c * H + iy) * W + ix] +
                        (1 - ay) * ax * nodes_[x].val[(c * H + iy) * W + ix1] +
                        ay * (1 - ax) * nodes_[x].val[(c * H + iy1) * W + ix] +
                        ay * ax * nodes_[x].val[(c * H + iy1) * W + ix1];
                }
        record([this, x, y, C, H, W, Ho, Wo, y0 = std::move(y0), x0 = std::move(x0),
                wy = std::move(wy), wx = std::move(wx)] {
            if (!needs(x)) return;
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        const double g = nodes_[y].grad[(c * Ho + oy) * Wo + ox];
                        if (g == 0.0) continue;
                        const int iy = y0[static_cast<std::size_t>(oy)];
                        const int ix = x0[static_cast<std::size_t>(ox)];
                        const int iy1 = std::min(iy + 1, H - 1), ix1 = std::min(ix + 1, W - 1);
                        const double ay = wy[static_cast<std::size_t>(oy)];
                        const double ax = wx[static_cast<std::size_t>(ox)];
                        nodes_[x].grad[(c * H + iy) * W + ix] += g * (1 - ay) * (1 - ax);
                        nodes_[x].grad[(c * H + iy) * W + ix1] += g * (1 - ay) * ax;
                        nodes_[x].grad[(c * H + iy1) * W + ix] += g * ay * (1 - ax);
                        nodes_[x].grad[(c * H + iy1) * W + ix1] += g * ay * ax;
                    }
        });
        return y;
    }

    int concat_ch(int a, int b) {
        check_rank(a, 3, "concat_ch");
        check_rank(b, 3, "concat_ch");
        if (shape(a)[1] != shape(b)[1] || shape(a)[2] != shape(b)[2])
            throw std::invalid_argument("concat_ch: spatial mismatch");
        const int y = alloc({shape(a)[0] + shape(b)[0], shape(a)[1], shape(a)[2]},
                            needs(a) || needs(b));
        std::copy(nodes_[a].val.begin(), nodes_[a].val.end(), nodes_[y].val.begin());
        std::copy(nodes_[b].val.begin(), nodes_[b].val.end(),
                  nodes_[y].val.begin() + static_cast<std::ptrdiff_t>(numel(a)));
        record([this, a, b, y] {
            const std::size_t na = numel(a);
            if (needs(a))
                for (std::size_t i = 0; i < na; ++i) nodes_[a].grad[i] += nodes_[y].grad[i];
            if (needs(b))
                for (std::size_t i = 0; i < numel(b); ++i)
                    nodes_[b].grad[i] += nodes_[y].grad[na + i];
        });
        return y;
    }

    // {C,H,W} -> {H*W, C}: pixels become rows.
    int img_to_rows(int x) {
        check_rank(x, 3, "img_to_rows");
        const int C = shape(x)[0], H = shape(x)[1], W = shape(x)[2];
        const int P = H * W;
        const int y = alloc({P, C}, needs(x));
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < P; ++p) nodes_[y].val[p * C + c] = nodes_[x].val[c * P + p];
        record([this, x, y, C, P] {
            if (!needs(x)) return;
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < P; ++p) nodes_[x].grad[c * P + p] += nodes_[y].grad[p * C + c];
        });
        return y;
    }

    // {H*W, C} -> {C,H,W}.
    int rows_to_img(int a, int H, int W) {
        check_rank(a, 2, "rows_to_img");
        const int P = shape(a)[0], C = shape(a)[1];
        if (P != H * W) throw std::invalid_argument("rows_to_img: row count != H*W");
        const int y = alloc({C, H, W}, needs(a));
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < P; ++p) nodes_[y].val[c * P + p] = nodes_[a].val[p * C + c];
        record([this, a, y, C, P] {
            if (!needs(a)) return;
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < P; ++p) nodes_[a].grad[p * C + c] += nodes_[y].grad[c * P + p];
        });
        return y;
    }

    int reshape(int a, const std::vector<int>& new_shape) {
        if (numel_of(new_shape) != numel(a)) throw std::invalid_argument("reshape: size mismatch");
        const int y = alloc(new_shape, needs(a));
        nodes_[y].val = nodes_[a].val;
        record([this, a, y] {
            if (!needs(a)) return;
            for (std::size_t i = 0; i < numel(y); ++i) nodes_[a].grad[i] += nodes_[y].grad[i];
        });
        return y;
    }

  private:
    bool needs(int i) const { return nodes_[static_cast<std::size_t>(i)].needs_grad; }

    int alloc(const std::vector<int>& shape, bool needs_grad) {
        Node n;
        n.shape = shape;
        n.val.assign(numel_of(shape), 0.0);
        n.grad.assign(numel_of(shape), 0.0);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void record(std::function<void()> f) { ops_.push_back(std::move(f)); }

    void check_same_shape(int a, int b, const char* op) const {
        if (shape(a) != shape(b))
            throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
    void check_rank(int a, int rank, const char* what) const {
        if (static_cast<int>(shape(a).size()) != rank)
            throw std::invalid_argument(std::string(what) + ": wrong rank");
    }

    std::vector<Node> nodes_;
    std::vector<std::function<void()>> ops_;
};

}  // namespace mtbit::ad
