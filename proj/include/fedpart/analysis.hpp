#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fedpart/data.hpp"
#include "fedpart/graph.hpp"
#include "fedpart/param_set.hpp"

namespace fedpart {

// ||S (.) grad f(w)||^2 with grad f estimated full-batch over the dataset.
inline double masked_grad_metric(const Graph& g, const ParamSet& params, const Batch& pooled,
                                 const LayerPartition& partition, const LayerMask& mask,
                                 BNState* bn = nullptr) {
    if (mask.size() != partition.size()) throw ShapeError("masked_grad_metric: mask arity mismatch");
    EvalOptions opts;
    opts.bn = bn;
    opts.update_bn_stats = false;
    auto [loss, grads] = evaluate_loss_and_grads(g, params, pooled, opts);
    (void)loss;
    double acc = 0.0;
    for (size_t gi = 0; gi < partition.size(); ++gi) {
        if (!mask.trainable(gi)) continue;
        for (int s : partition.groups[gi].slot_ids)
            for (double v : grads.slots[s].data) acc += v * v;
    }
    return acc;
}

inline double masked_grad_metric(const Graph& g, const ParamSet& params, const Dataset& ds,
                                 const LayerPartition& partition, const LayerMask& mask,
                                 BNState* bn = nullptr) {
    if (ds.size() < 1) throw ConfigError("masked_grad_metric: empty dataset");
    return masked_grad_metric(g, params, ds.full_batch(), partition, mask, bn);
}

// ---- Assumption-3 ratio estimation -------------------------------------------

struct KEstimate {
    double k_hat = 1.0;
    int64_t samples = 0;
    std::string mask_family;           // descriptor of the masks compared
    std::vector<double> per_mask_norm;  // E||S_j (.) (grad L(x|w) - grad f(w))|| per mask
};

// Core estimator over an abstract per-sample deviation source. The sampler
// fills `dev` (structure of `shape_like`) with grad L(x|w) - grad f(w) for
// one drawn sample.
inline KEstimate estimate_k_from_deviations(
    const std::function<void(int64_t, ParamSet&)>& sampler, const ParamSet& shape_like,
    const std::vector<LayerMask>& family, const LayerPartition& partition, int64_t n_samples,
    const std::string& family_desc) {
    if (n_samples < 100) throw ConfigError("estimate_k: need at least 100 samples");
    if (family.empty()) throw ConfigError("estimate_k: empty mask family");
    std::vector<double> acc(family.size(), 0.0);
    ParamSet dev = shape_like.zeros_like();
    for (int64_t s = 0; s < n_samples; ++s) {
        sampler(s, dev);
        for (size_t j = 0; j < family.size(); ++j) {
            double sq = 0.0;
            for (size_t gi = 0; gi < partition.size(); ++gi) {
                if (!family[j].trainable(gi)) continue;
                for (int slot : partition.groups[gi].slot_ids)
                    for (double v : dev.slots[slot].data) sq += v * v;
            }
            acc[j] += std::sqrt(sq);
        }
    }
    KEstimate est;
    est.samples = n_samples;
    est.mask_family = family_desc;
    est.per_mask_norm.resize(family.size());
    for (size_t j = 0; j < family.size(); ++j) est.per_mask_norm[j] = acc[j] / static_cast<double>(n_samples);
    double k = 1.0;
    for (size_t a = 0; a < family.size(); ++a)
        for (size_t b = 0; b < family.size(); ++b) {
            if (est.per_mask_norm[b] <= 0.0) throw NumericError("estimate_k: zero deviation norm", -1);
            k = std::max(k, est.per_mask_norm[a] / est.per_mask_norm[b]);
        }
    est.k_hat = k;
    return est;
}

// Monte-Carlo estimate of the gradient-deviation ratio bound over the one-hot
// group-mask family, sampling single examples with replacement.
inline KEstimate estimate_k(const Graph& g, const ParamSet& params, const Dataset& ds,
                            const LayerPartition& partition, int64_t n_samples, uint64_t seed,
                            BNState* bn = nullptr) {
    if (ds.size() < 1) throw ConfigError("estimate_k: empty dataset");
    EvalOptions opts;
    opts.bn = bn;
    opts.update_bn_stats = false;
    auto [floss, full_grad] = evaluate_loss_and_grads(g, params, ds.full_batch(), opts);
    (void)floss;
    Rng rng(derive_seed(seed, "k-estimate"));
    std::vector<LayerMask> family;
    for (size_t gi = 0; gi < partition.size(); ++gi) family.push_back(LayerMask::one_hot(partition.size(), gi));
    auto sampler = [&](int64_t, ParamSet& dev) {
        int64_t pick = static_cast<int64_t>(rng.below(static_cast<uint64_t>(ds.size())));
        Batch one = ds.batch_of({pick});
        auto [l, grad] = evaluate_loss_and_grads(g, params, one, opts);
        (void)l;
        for (size_t s = 0; s < dev.size(); ++s)
            for (size_t i = 0; i < dev.slots[s].data.size(); ++i)
                dev.slots[s].data[i] = grad.slots[s].data[i] - full_grad.slots[s].data[i];
    };
    return estimate_k_from_deviations(sampler, params, family, partition, n_samples,
                                      "one-hot partition groups (" + std::to_string(partition.size()) + ")");
}

// ---- image metrics -------------------------------------------------------------

constexpr double kPsnrCap = 100.0;

// -10*log10(MSE), capped at 100 dB (the cap also applies when MSE is tiny, so
// the metric stays monotone in MSE).
inline double psnr(const Tensor& x, const Tensor& x_hat) {
    if (!x.same_shape(x_hat)) throw ShapeError("psnr: shape mismatch");
    if (x.numel() == 0) throw ShapeError("psnr: empty tensors");
    double mse = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double d = x.data[i] - x_hat.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.numel());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(-10.0 * std::log10(mse), kPsnrCap);
}

// Global-window SSIM with C1=(0.01)^2, C2=(0.03)^2 on dynamic range 1;
// population statistics over all pixels.
inline double ssim(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("ssim: shape mismatch");
    int64_t n = a.numel();
    if (n == 0) throw ShapeError("ssim: empty tensors");
    double ma = 0, mb = 0;
    for (int64_t i = 0; i < n; ++i) {
        ma += a.data[i];
        mb += b.data[i];
    }
    ma /= n;
    mb /= n;
    double va = 0, vb = 0, cov = 0;
    for (int64_t i = 0; i < n; ++i) {
        double da = a.data[i] - ma, db = b.data[i] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    va /= n;
    vb /= n;
    cov /= n;
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

// ---- gradient inversion ---------------------------------------------------------

struct AttackResult {
    Tensor reconstructed;
    double final_loss = 0.0;
    std::vector<double> loss_trace;  // best-so-far at each recording point
    double psnr_db = 0.0;            // vs ground truth when supplied
};

// Slots covered by the attack target (gradient-matching restricted to them).
struct SlotFilter {
    std::vector<uint8_t> covered;  // per slot

    static SlotFilter all(const ParamSet& p) {
        SlotFilter f;
        f.covered.assign(p.size(), 1);
        return f;
    }
    static SlotFilter from_groups(const ParamSet& p, const LayerPartition& part,
                                  const std::vector<int>& group_ids) {
        SlotFilter f;
        f.covered.assign(p.size(), 0);
        for (int g : group_ids) {
            if (g < 0 || g >= static_cast<int>(part.size())) throw ConfigError("attack: bad group index");
            for (int s : part.groups[g].slot_ids) f.covered[s] = 1;
        }
        return f;
    }
};

// Minimize || grad_w L(x_hat | w) - g_target ||^2 over the covered slots by
// projected gradient descent on x_hat in [0,1]. The input-space gradient of
// the matching objective is obtained from a central difference of the
// analytic input gradient along the residual direction in parameter space
// (the standard finite-difference Hessian-vector product).
inline AttackResult dlg_attack(const Graph& g, const ParamSet& params, const ParamSet& target_grads,
                               const SlotFilter& filter, const std::vector<int64_t>& input_shape,
                               int label, int iters, double step, uint64_t seed,
                               const Tensor* ground_truth = nullptr, BNState* bn = nullptr) {
    if (!params.same_structure(target_grads)) throw ShapeError("dlg: target gradient structure mismatch");
    if (iters < 0) throw ConfigError("dlg: negative iteration count");
    EvalOptions opts;
    opts.bn = bn;
    opts.update_bn_stats = false;

    auto objective_and_residual = [&](const Batch& b, ParamSet& residual) -> double {
        auto [l, grads] = evaluate_loss_and_grads(g, params, b, opts);
        (void)l;
        double obj = 0.0;
        for (size_t s = 0; s < params.size(); ++s) {
            auto& r = residual.slots[s];
            if (!filter.covered[s]) {
                r.fill(0.0);
                continue;
            }
            for (size_t i = 0; i < r.data.size(); ++i) {
                double d = grads.slots[s].data[i] - target_grads.slots[s].data[i];
                r.data[i] = d;
                obj += d * d;
            }
        }
        return obj;
    };

    for (int attempt = 0; attempt < 3; ++attempt) {
        Rng rng(derive_seed(seed, "dlg", attempt));
        Batch b;
        std::vector<int64_t> full_shape = {1};
        full_shape.insert(full_shape.end(), input_shape.begin(), input_shape.end());
        b.features = Tensor(full_shape);
        for (auto& v : b.features.data) v = rng.uniform();
        b.labels = {label};

        ParamSet residual = params.zeros_like();
        AttackResult res;
        bool failed = false;
        double best = std::numeric_limits<double>::infinity();
        Tensor best_x = b.features;
        for (int it = 0; it <= iters; ++it) {
            double obj = objective_and_residual(b, residual);
            if (!std::isfinite(obj)) {
                failed = true;
                break;
            }
            if (obj < best) {
                best = obj;
                best_x = b.features;
                res.loss_trace.push_back(best);
            }
            if (it == iters) break;
            // r-directed parameter perturbation; input gradient difference
            double rnorm = 0.0;
            for (const auto& t : residual.slots)
                for (double v : t.data) rnorm += v * v;
            rnorm = std::sqrt(rnorm);
            if (rnorm == 0.0) break;  // exact match found
            double eps = 1e-5 / rnorm;
            ParamSet wp = params, wm = params;
            for (size_t s = 0; s < params.size(); ++s)
                for (size_t i = 0; i < params.slots[s].data.size(); ++i) {
                    double d = eps * residual.slots[s].data[i];
                    wp.slots[s].data[i] += d;
                    wm.slots[s].data[i] -= d;
                }
            Tensor gip = Evaluator(g, wp, b, opts).input_grad_of_loss();
            Tensor gim = Evaluator(g, wm, b, opts).input_grad_of_loss();
            for (size_t i = 0; i < b.features.data.size(); ++i) {
                double dir = (gip.data[i] - gim.data[i]) / eps;  // = 2 J^T r to first order
                double nv = b.features.data[i] - step * dir;
                b.features.data[i] = std::clamp(nv, 0.0, 1.0);
            }
        }
        if (failed) continue;
        res.final_loss = best;
        res.reconstructed = best_x;
        res.reconstructed.shape = input_shape;  // drop the batch dim
        if (ground_truth) res.psnr_db = psnr(*ground_truth, res.reconstructed);
        return res;
    }
    throw NumericError("dlg attack diverged on three restarts", -1);
}

inline AttackResult dlg_attack(const Graph& g, const ParamSet& params, const ParamSet& target_grads,
                               const std::vector<int64_t>& input_shape, int label, int iters, double step,
                               uint64_t seed, const Tensor* ground_truth = nullptr, BNState* bn = nullptr) {
    return dlg_attack(g, params, target_grads, SlotFilter::all(params), input_shape, label, iters,
                      step, seed, ground_truth, bn);
}

// ---- activation maximization ----------------------------------------------------

// Projected gradient ascent on the mean activation of one output channel of
// a partition group's deepest node; the input stays clamped to [0,1].
inline Tensor activation_maximization(const Graph& g, const ParamSet& params, const LayerPartition& partition,
                                      int group_index, int channel, int iters, double step, uint64_t seed,
                                      BNState* bn = nullptr) {
    if (group_index < 0 || group_index >= static_cast<int>(partition.size()))
        throw ConfigError("activation_maximization: bad group index");
    // deepest node owning one of the group's slots
    int node_id = -1;
    for (int slot : partition.groups[group_index].slot_ids)
        for (size_t id = 0; id < g.nodes.size(); ++id)
            for (int ps : g.nodes[id].param_slots)
                if (ps == slot) node_id = std::max(node_id, static_cast<int>(id));
    if (node_id < 0) throw ConfigError("activation_maximization: group has no graph node");

    EvalOptions opts;
    opts.bn = bn;
    opts.update_bn_stats = false;

    Rng rng(derive_seed(seed, "actmax"));
    Batch b;
    std::vector<int64_t> full_shape = {1};
    full_shape.insert(full_shape.end(), g.input_shape.begin(), g.input_shape.end());
    b.features = Tensor(full_shape);
    for (auto& v : b.features.data) v = rng.uniform();
    b.labels = {0};

    double best = -std::numeric_limits<double>::infinity();
    Tensor best_x = b.features;
    for (int it = 0; it <= iters; ++it) {
        Evaluator ev(g, params, b, opts);
        const Tensor& act = ev.value(node_id);
        if (act.shape.size() < 2 || channel < 0 || channel >= act.shape[1])
            throw ConfigError("activation_maximization: channel out of range");
        int64_t spatial = act.numel() / act.shape[0] / act.shape[1];
        double objective = 0.0;
        Tensor seed_grad(act.shape);
        for (int64_t i = 0; i < spatial; ++i) {
            int64_t idx = channel * spatial + i;
            objective += act.data[idx];
            seed_grad.data[idx] = 1.0 / static_cast<double>(spatial);
        }
        objective /= static_cast<double>(spatial);
        if (objective > best) {
            best = objective;
            best_x = b.features;
        }
        if (it == iters) break;
        Tensor gi = ev.backward(node_id, seed_grad, false, true).second;
        for (size_t i = 0; i < b.features.data.size(); ++i)
            b.features.data[i] = std::clamp(b.features.data[i] + step * gi.data[i], 0.0, 1.0);
    }
    best_x.shape = g.input_shape;
    return best_x;
}

// Single-sample dump in the dataset binary format, for external rendering.
inline void save_single_sample(const Tensor& x, int label, int classes, const std::string& path) {
    Dataset ds;
    ds.classes = classes;
    std::vector<int64_t> shape = {1};
    shape.insert(shape.end(), x.shape.begin(), x.shape.end());
    ds.features = Tensor(shape, x.data);
    ds.labels = {label};
    save_dataset(ds, path);
}

}  // namespace fedpart
