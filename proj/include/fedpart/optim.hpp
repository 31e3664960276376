#pragma once

#include <cmath>
#include <utility>

#include "fedpart/param_set.hpp"

namespace fedpart {

struct AdamHyper {
    double gamma = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam first/second moment accumulators mirroring a ParamSet, plus the step
// counter. Moments of frozen groups are never touched, not even decayed, so
// frozen groups stay bit-identical end to end.
struct OptimState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    int64_t step_count = 0;

    static OptimState zeros_like(const ParamSet& params) {
        OptimState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& t : params.slots) {
            s.m.emplace_back(t.shape);
            s.v.emplace_back(t.shape);
        }
        return s;
    }

    bool mirrors(const ParamSet& params) const {
        if (m.size() != params.size() || v.size() != params.size()) return false;
        for (size_t i = 0; i < params.size(); ++i)
            if (m[i].shape != params.slots[i].shape || v[i].shape != params.slots[i].shape) return false;
        return true;
    }
};

namespace detail {

inline void check_step_args(const ParamSet& params, const ParamSet& grads, const LayerPartition& partition,
                            const LayerMask& mask, double gamma) {
    if (!params.same_structure(grads)) throw ShapeError("masked step: gradient structure mismatch");
    if (mask.size() != partition.size()) throw ShapeError("masked step: mask arity does not match partition");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("masked step: bad learning rate");
}

}  // namespace detail

// w <- w - gamma * g on mask-1 groups; mask-0 groups are returned bit-identical.
inline ParamSet masked_sgd_step(const ParamSet& params, const ParamSet& grads, const LayerPartition& partition,
                                const LayerMask& mask, double gamma) {
    detail::check_step_args(params, grads, partition, mask, gamma);
    ParamSet out = params;
    for (size_t g = 0; g < partition.size(); ++g) {
        if (!mask.trainable(g)) continue;
        for (int s : partition.groups[g].slot_ids) {
            Tensor& w = out.slots[s];
            const Tensor& gr = grads.slots[s];
            for (size_t i = 0; i < w.data.size(); ++i) w.data[i] -= gamma * gr.data[i];
        }
    }
    return out;
}

// Adam update applied only to mask-1 groups. Frozen groups' parameters and
// moments come back bit-identical; the step counter advances by one.
inline std::pair<ParamSet, OptimState> masked_adam_step(const ParamSet& params, const ParamSet& grads,
                                                        const LayerPartition& partition, const LayerMask& mask,
                                                        const OptimState& state, const AdamHyper& hyper) {
    detail::check_step_args(params, grads, partition, mask, hyper.gamma);
    if (!state.mirrors(params)) throw ShapeError("masked adam: optimizer state does not mirror parameters");
    ParamSet out = params;
    OptimState st = state;
    st.step_count += 1;
    double t = static_cast<double>(st.step_count);
    double bc1 = 1.0 - std::pow(hyper.beta1, t);
    double bc2 = 1.0 - std::pow(hyper.beta2, t);
    for (size_t g = 0; g < partition.size(); ++g) {
        if (!mask.trainable(g)) continue;
        for (int s : partition.groups[g].slot_ids) {
            Tensor& w = out.slots[s];
            Tensor& m = st.m[s];
            Tensor& v = st.v[s];
            const Tensor& gr = grads.slots[s];
            for (size_t i = 0; i < w.data.size(); ++i) {
                double gi = gr.data[i];
                m.data[i] = hyper.beta1 * m.data[i] + (1.0 - hyper.beta1) * gi;
                v.data[i] = hyper.beta2 * v.data[i] + (1.0 - hyper.beta2) * gi * gi;
                double mhat = m.data[i] / bc1;
                double vhat = v.data[i] / bc2;
                w.data[i] -= hyper.gamma * mhat / (std::sqrt(vhat) + hyper.eps);
            }
        }
    }
    return {std::move(out), std::move(st)};
}

}  // namespace fedpart
