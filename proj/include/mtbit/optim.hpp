#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mtbit/loss.hpp"
#include "mtbit/model.hpp"

namespace mtbit {

/// Decoupled-weight-decay adaptive-moment state, aligned with the flat
/// parameter enumeration.
struct OptState {
    std::vector<double> m, v;
    std::int64_t step = 0;

    explicit OptState(std::size_t n_params = 0)
        : m(n_params, 0.0), v(n_params, 0.0) {}
};

/// One AdamW update (beta1=0.9, beta2=0.999, eps=1e-8, bias correction).
/// Weight decay is decoupled and skipped for tensors flagged decay=false
/// (normalization scales and biases).
inline void adamw_step(ParamSet& ps, OptState& st, const std::vector<double>& grad, double lr,
                       double weight_decay) {
    if (grad.size() != ps.layout.n_params || st.m.size() != ps.layout.n_params)
        throw std::invalid_argument("adamw: size mismatch");
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    st.step += 1;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (const auto& tinfo : ps.layout.tensors) {
        const std::size_t lo = tinfo.offset, hi = tinfo.offset + ad::numel_of(tinfo.shape);
        const double wd = tinfo.decay ? weight_decay : 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            const double g = grad[i];
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            ps.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * ps.data[i]);
        }
    }
}

/// One optimizer step on a batch: all samples share one tape (so batch
/// normalization pools statistics across them), the batch-mean loss is
/// differentiated in a single backward pass, and the averaged gradient is
/// applied.  Returns the batch-mean loss.
inline LossBreakdown train_step(ParamSet& ps, OptState& st, const std::vector<ModelSample>& batch,
                                const TrainConfig& tc) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    ad::Tape tape;
    std::vector<const std::vector<double>*> x1s, x2s;
    for (const auto& s : batch) {
        x1s.push_back(&s.x1);
        x2s.push_back(&s.x2);
    }
    BatchForwardResult fr = forward_batch(tape, ps, x1s, x2s, /*training=*/true);

    LossBreakdown mean;
    int total = -1;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const LossNodes ln =
            loss_graph(tape, fr.traces[i].m2d, fr.traces[i].m3d, batch[i], tc);
        mean += read_loss(tape, ln);
        total = i == 0 ? ln.total : tape.add(total, ln.total);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    total = tape.scale(total, inv);
    mean /= static_cast<double>(batch.size());

    tape.backward(total);
    std::vector<double> grad(ps.layout.n_params, 0.0);
    accumulate_param_grads(tape, fr.bound, grad);
    adamw_step(ps, st, grad, tc.lr, tc.weight_decay);
    return mean;
}

}  // namespace mtbit
