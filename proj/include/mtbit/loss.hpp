#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtbit/ad.hpp"
#include "mtbit/augment.hpp"
#include "mtbit/model.hpp"

namespace mtbit {

/// Optimization recipe: weighted multitask objective, optimizer settings, and
/// loop controls.  The augmentation spec rides along because the training loop
/// owns it.
struct TrainConfig {
    double alpha = 1.0;  // 2D loss weight
    double beta = 3.0;   // 3D loss weight
    double w_nochange = 0.05;
    double w_change = 0.95;
    double lr = 1e-4;
    int batch_size = 15;
    int epochs = 300;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    int checkpoint_every = 10;  // epochs; 0 disables periodic checkpoints
    int max_steps = 0;          // 0 = no cap; >0 stops after that many optimizer steps
    AugSpec aug;

    bool operator==(const TrainConfig&) const = default;

    void validate() const {
        if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("loss weights must be >= 0");
        if (!(w_nochange > 0.0) || w_nochange >= 1.0 || !(w_change > 0.0) || w_change >= 1.0)
            throw std::invalid_argument("class weights must lie in (0,1)");
        if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
        if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be >= 0");
        if (checkpoint_every < 0) throw std::invalid_argument("checkpoint cadence must be >= 0");
        if (max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
        aug.validate();
    }
};

struct LossBreakdown {
    double total = 0.0;
    double l2d = 0.0;
    double l3d = 0.0;

    LossBreakdown& operator+=(const LossBreakdown& o) {
        total += o.total;
        l2d += o.l2d;
        l3d += o.l3d;
        return *this;
    }
    LossBreakdown& operator/=(double d) {
        total /= d;
        l2d /= d;
        l3d /= d;
        return *this;
    }
};

struct LossNodes {
    int total = -1, l2d = -1, l3d = -1;
};

constexpr double kProbClampLo = 1e-7;
constexpr double kProbClampHi = 1.0 - 1e-7;

/// Builds the scalar objective on the tape:
///   l2d = mean over pixels of w(y) * 1/2 * sum_c BCE(m2d[c], onehot(y)[c])
///   l3d = mean over pixels of (m3d - y3d)^2           (normalized units)
///   total = alpha * l2d + beta * l3d
/// Probabilities are clamped away from {0,1} so the BCE stays finite; the
/// clamp also hard-zeroes gradients of saturated pixels.
inline LossNodes loss_graph(ad::Tape& t, int m2d, int m3d, const ModelSample& sample,
                            const TrainConfig& tc) {
    const int S = sample.size;
    const std::size_t plane = static_cast<std::size_t>(S) * S;
    if (t.shape(m2d) != std::vector<int>{2, S, S} || t.shape(m3d) != std::vector<int>{1, S, S})
        throw std::invalid_argument("loss: prediction shape mismatch");
    if (sample.y2d.size() != plane || sample.y3d.size() != plane)
        throw std::invalid_argument("loss: target size mismatch");

    // One-hot target and per-pixel class weight, replicated on both channels.
    std::vector<double> onehot(2 * plane), weights(2 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        const bool change = sample.y2d[i] != 0;
        onehot[i] = change ? 0.0 : 1.0;          // channel 0: no-change
        onehot[plane + i] = change ? 1.0 : 0.0;  // channel 1: change
        const double w = change ? tc.w_change : tc.w_nochange;
        weights[i] = w;
        weights[plane + i] = w;
    }
    const int target = t.constant({2, S, S}, onehot);
    const int wmask = t.constant({2, S, S}, weights);

    const int p = t.clamp(m2d, kProbClampLo, kProbClampHi);
    const int one_minus_p = t.add_scalar(t.scale(p, -1.0), 1.0);
    const int one_minus_t = t.add_scalar(t.scale(target, -1.0), 1.0);
    const int ll = t.add(t.mul(target, t.log_(p)), t.mul(one_minus_t, t.log_(one_minus_p)));
    const int bce = t.scale(ll, -1.0);
    LossNodes out;
    out.l2d = t.scale(t.sum_all(t.mul(wmask, bce)), 0.5 / static_cast<double>(plane));

    const int y3 = t.constant({1, S, S}, sample.y3d);
    const int diff = t.sub(m3d, y3);
    out.l3d = t.mean_all(t.mul(diff, diff));

    out.total = t.add(t.scale(out.l2d, tc.alpha), t.scale(out.l3d, tc.beta));
    return out;
}

inline LossBreakdown read_loss(const ad::Tape& t, const LossNodes& n) {
    LossBreakdown b;
    b.total = t.val(n.total)[0];
    b.l2d = t.val(n.l2d)[0];
    b.l3d = t.val(n.l3d)[0];
    if (!std::isfinite(b.l2d)) throw std::runtime_error("non-finite 2D loss term");
    if (!std::isfinite(b.l3d)) throw std::runtime_error("non-finite 3D loss term");
    if (!std::isfinite(b.total)) throw std::runtime_error("non-finite total loss");
    return b;
}

}  // namespace mtbit
