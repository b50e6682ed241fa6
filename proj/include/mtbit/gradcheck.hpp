#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mtbit/loss.hpp"
#include "mtbit/model.hpp"
#include "mtbit/optim.hpp"
#include "mtbit/synth.hpp"

namespace mtbit {

struct GradFailure {
    std::size_t index = 0;
    std::string tensor;
    double analytic = 0.0, fd = 0.0, rel_err = 0.0;
};

struct GradCheckReport {
    std::size_t n_params = 0;
    std::size_t n_compared = 0;
    std::size_t n_skipped = 0;  // both |analytic| and |fd| below the dead-zone threshold
    std::size_t n_failed = 0;
    double max_rel_err = 0.0;
    std::vector<GradFailure> failures;  // first few, for diagnostics

    bool pass() const { return n_failed == 0; }
};

/// Scalar training loss of one sample as a pure function of the parameters.
/// Batch-norm runs in training mode (per-sample statistics), so the running
/// buffers do not influence the value; they are restored afterwards anyway.
inline double loss_value(ParamSet& ps, const ModelSample& s, const TrainConfig& tc) {
    const std::vector<double> buf_snapshot = ps.buffers;
    ad::Tape tape;
    const ForwardResult fr = forward(tape, ps, s.x1, s.x2, /*training=*/true);
    const LossNodes ln = loss_graph(tape, fr.trace.m2d, fr.trace.m3d, s, tc);
    const double v = read_loss(tape, ln).total;
    ps.buffers = buf_snapshot;
    return v;
}

inline std::vector<double> analytic_grad(ParamSet& ps, const ModelSample& s,
                                         const TrainConfig& tc) {
    const std::vector<double> buf_snapshot = ps.buffers;
    ad::Tape tape;
    const ForwardResult fr = forward(tape, ps, s.x1, s.x2, /*training=*/true);
    const LossNodes ln = loss_graph(tape, fr.trace.m2d, fr.trace.m3d, s, tc);
    tape.backward(ln.total);
    std::vector<double> g(ps.layout.n_params, 0.0);
    accumulate_param_grads(tape, fr.bound, g);
    ps.buffers = buf_snapshot;
    return g;
}

/// A deterministic one-tile sample at the model's input size for gradient
/// checking: generated in memory, no dataset on disk required.
inline ModelSample gradcheck_sample(const ModelConfig& cfg, std::uint64_t seed) {
    SynthSpec spec;
    spec.seed = seed;
    spec.n_tiles = 1;
    const Tile tile = detail::make_tile(spec, 0);
    return plain_sample(tile, cfg.input_size, /*h_scale=*/35.0);
}

/// Central-difference verification of every parameter coordinate.
/// rel_err = |g - fd| / max(|g|, |fd|); coordinates where both magnitudes are
/// below 1e-8 are skipped (meaningless ratios of numerical dust).
inline GradCheckReport gradcheck(ParamSet& ps, const ModelSample& s, const TrainConfig& tc,
                                 double step = 1e-4, double tol = 1e-4,
                                 std::size_t max_failures = 10) {
    GradCheckReport rep;
    rep.n_params = ps.layout.n_params;
    const std::vector<double> g = analytic_grad(ps, s, tc);

    auto tensor_name = [&](std::size_t idx) {
        for (const auto& t : ps.layout.tensors) {
            const std::size_t n = ad::numel_of(t.shape);
            if (idx >= t.offset && idx < t.offset + n) return t.name;
        }
        return std::string("?");
    };

    for (std::size_t i = 0; i < ps.layout.n_params; ++i) {
        const double saved = ps.data[i];
        ps.data[i] = saved + step;
        const double fp = loss_value(ps, s, tc);
        ps.data[i] = saved - step;
        const double fm = loss_value(ps, s, tc);
        ps.data[i] = saved;
        const double fd = (fp - fm) / (2.0 * step);

        if (std::abs(g[i]) < 1e-8 && std::abs(fd) < 1e-8) {
            ++rep.n_skipped;
            continue;
        }
        ++rep.n_compared;
        const double rel = std::abs(g[i] - fd) / std::max(std::abs(g[i]), std::abs(fd));
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        if (rel >= tol) {
            ++rep.n_failed;
            if (rep.failures.size() < max_failures)
                rep.failures.push_back({i, tensor_name(i), g[i], fd, rel});
        }
    }
    return rep;
}

}  // namespace mtbit
