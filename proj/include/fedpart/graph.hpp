#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fedpart/param_set.hpp"
#include "fedpart/tensor.hpp"

namespace fedpart {

enum class OpKind {
    Input,
    Linear,      // x[n,in] @ W[in,out] + b[out]
    Conv2d,      // x[n,Ci,H,W] * W[Co,Ci,k,k], stride/pad attrs, no bias
    BatchNorm,   // per-channel normalization, affine gamma/beta
    Relu,
    Add,         // elementwise, two equal-shape inputs
    Flatten,     // [n,...] -> [n, prod]
    SoftmaxCE,   // logits[n,K] + batch labels -> mean loss (log-sum-exp stabilized)
    SquaredLoss, // mean over rows of the squared error vs a constant target -> scalar
    CosineRows,  // rowwise cosine of input vs a constant matrix -> [n]
    Contrast,    // mean_i softplus((neg_i - pos_i)/tau) -> scalar
    L2Penalty,   // 0.5 * sum over listed param slots of ||w - ref||^2 -> scalar
    WeightedSum  // sum of coeff[k] * scalar input k -> scalar
};

struct Node {
    OpKind kind = OpKind::Input;
    std::string label;
    std::vector<int> inputs;       // upstream node ids
    std::vector<int> param_slots;  // Linear {W,b}; Conv2d {W}; BatchNorm {gamma,beta}; L2Penalty {penalized...}
    int stride = 1, pad = 0;       // Conv2d
    int bn_id = -1;                // BatchNorm: index into BNState
    double tau = 1.0;              // Contrast
    Tensor const_ref;              // CosineRows reference rows
    std::vector<Tensor> const_slots;  // L2Penalty reference values, one per param slot
    std::vector<double> coeffs;    // WeightedSum
};

// Per-client batch-norm running statistics; never part of the ParamSet and
// never transmitted.
struct BNState {
    std::vector<Tensor> running_mean;
    std::vector<Tensor> running_var;
    double momentum = 0.1;

    bool empty() const { return running_mean.empty(); }
};

struct Graph {
    std::vector<Node> nodes;
    std::vector<int64_t> input_shape;  // per-sample feature shape
    int input_node = -1;
    int loss_node = -1;         // the single scalar output
    int logits_node = -1;       // pre-softmax tap for accuracy
    int penultimate_node = -1;  // representation tap (pre-classifier)
    int num_bn = 0;

    int add(Node n) {
        for (int in : n.inputs)
            if (in < 0 || in >= static_cast<int>(nodes.size()))
                throw ConfigError("graph node '" + n.label + "' references a later or missing node");
        nodes.push_back(std::move(n));
        return static_cast<int>(nodes.size()) - 1;
    }

    BNState make_bn_state(const ParamSet& params) const {
        BNState s;
        s.running_mean.resize(num_bn);
        s.running_var.resize(num_bn);
        for (const auto& n : nodes) {
            if (n.kind != OpKind::BatchNorm) continue;
            int64_t c = params.slots[n.param_slots[0]].numel();
            s.running_mean[n.bn_id] = Tensor({c});
            s.running_var[n.bn_id] = Tensor({c});
            s.running_var[n.bn_id].fill(1.0);
        }
        return s;
    }
};

namespace detail {

constexpr double kBnEps = 1e-5;
constexpr double kCosineClamp = 1e-8;  // denominator floor, forward and backward agree

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double logistic(double z) { return z > 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace detail

struct EvalOptions {
    bool training = true;       // BatchNorm: batch statistics vs running statistics
    BNState* bn = nullptr;      // required when the graph contains BatchNorm nodes
    bool update_bn_stats = true;  // fold batch statistics into running stats while training
};

// Stateful single-evaluation context: one forward pass plus backward passes
// from the loss or from any intermediate node. Single-lane per instance.
class Evaluator {
public:
    Evaluator(const Graph& g, const ParamSet& params, const Batch& batch, EvalOptions opts = {})
        : g_(g), params_(params), batch_(batch), opts_(opts) {
        forward();
    }

    double loss() const {
        if (g_.loss_node < 0) throw ConfigError("graph has no loss node");
        return act_[g_.loss_node].data[0];
    }

    const Tensor& value(int node) const { return act_.at(node); }

    // Backward from the scalar loss; returns gradients mirroring the ParamSet.
    ParamSet loss_grads() {
        Tensor seed = Tensor::scalar(1.0);
        return backward(g_.loss_node, seed, true, false).first;
    }

    std::pair<ParamSet, Tensor> loss_grads_and_input_grad() {
        Tensor seed = Tensor::scalar(1.0);
        return backward(g_.loss_node, seed, true, true);
    }

    Tensor input_grad_of_loss() {
        Tensor seed = Tensor::scalar(1.0);
        return backward(g_.loss_node, seed, false, true).second;
    }

    // Backward from an arbitrary node with a caller-supplied seed gradient.
    std::pair<ParamSet, Tensor> backward(int from, const Tensor& seed, bool want_params, bool want_input) {
        if (from < 0 || from >= static_cast<int>(g_.nodes.size())) throw ConfigError("backward: bad node id");
        if (seed.shape != act_[from].shape) throw ShapeError("backward: seed shape mismatch");
        std::vector<Tensor> grad(g_.nodes.size());
        grad[from] = seed;
        ParamSet pgrads = want_params ? params_.zeros_like() : ParamSet{};
        Tensor igrad;
        for (int id = from; id >= 0; --id) {
            if (grad[id].data.empty()) continue;
            backward_node(id, grad, pgrads, want_params);
        }
        if (want_input) {
            igrad = grad[g_.input_node].data.empty() ? Tensor(act_[g_.input_node].shape)
                                                     : std::move(grad[g_.input_node]);
        }
        return {std::move(pgrads), std::move(igrad)};
    }

private:
    const Graph& g_;
    const ParamSet& params_;
    const Batch& batch_;
    EvalOptions opts_;
    std::vector<Tensor> act_;
    std::vector<Tensor> bn_xhat_;      // per node: normalized activations
    std::vector<Tensor> bn_invstd_;    // per node: 1/sqrt(var+eps) per channel
    std::vector<Tensor> smce_probs_;   // per node: softmax probabilities

    const Tensor& in(const Node& n, int k) const { return act_[n.inputs[k]]; }
    const Tensor& pslot(const Node& n, int k) const { return params_.slots[n.param_slots[k]]; }

    [[noreturn]] void fail_shape(int id, const std::string& what) const {
        throw ShapeError("node " + std::to_string(id) + " ('" + g_.nodes[id].label + "'): " + what);
    }

    void check_finite(int id) const {
        if (!act_[id].all_finite())
            throw NumericError("node " + std::to_string(id) + " ('" + g_.nodes[id].label +
                                   "') produced a non-finite value",
                               id);
    }

    void forward() {
        size_t nn = g_.nodes.size();
        act_.resize(nn);
        bn_xhat_.resize(nn);
        bn_invstd_.resize(nn);
        smce_probs_.resize(nn);
        for (size_t id = 0; id < nn; ++id) {
            forward_node(static_cast<int>(id));
            check_finite(static_cast<int>(id));
        }
    }

    void forward_node(int id) {
        const Node& n = g_.nodes[id];
        switch (n.kind) {
            case OpKind::Input: {
                std::vector<int64_t> expect = {batch_.features.shape.empty() ? 0 : batch_.features.shape[0]};
                expect.insert(expect.end(), g_.input_shape.begin(), g_.input_shape.end());
                if (batch_.features.shape != expect)
                    fail_shape(id, "batch features " + batch_.features.shape_str() + " do not match input slot");
                act_[id] = batch_.features;
                break;
            }
            case OpKind::Linear: {
                const Tensor& x = in(n, 0);
                const Tensor& w = pslot(n, 0);
                const Tensor& b = pslot(n, 1);
                if (x.shape.size() != 2) fail_shape(id, "linear input must be rank 2, got " + x.shape_str());
                int64_t nb = x.shape[0], din = x.shape[1];
                if (w.shape.size() != 2 || w.shape[0] != din)
                    fail_shape(id, "weight " + w.shape_str() + " vs input " + x.shape_str());
                int64_t dout = w.shape[1];
                if (b.shape != std::vector<int64_t>{dout}) fail_shape(id, "bias shape " + b.shape_str());
                Tensor y({nb, dout});
                for (int64_t r = 0; r < nb; ++r) {
                    const double* xr = &x.data[r * din];
                    double* yr = &y.data[r * dout];
                    for (int64_t o = 0; o < dout; ++o) yr[o] = b.data[o];
                    for (int64_t i = 0; i < din; ++i) {
                        double xv = xr[i];
                        const double* wr = &w.data[i * dout];
                        for (int64_t o = 0; o < dout; ++o) yr[o] += xv * wr[o];
                    }
                }
                act_[id] = std::move(y);
                break;
            }
            case OpKind::Conv2d: {
                const Tensor& x = in(n, 0);
                const Tensor& w = pslot(n, 0);
                if (x.shape.size() != 4) fail_shape(id, "conv input must be rank 4, got " + x.shape_str());
                if (w.shape.size() != 4 || w.shape[1] != x.shape[1])
                    fail_shape(id, "kernel " + w.shape_str() + " vs input " + x.shape_str());
                int64_t nb = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3];
                int64_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
                int s = n.stride, p = n.pad;
                int64_t ho = (h + 2 * p - kh) / s + 1, wo = (wd + 2 * p - kw) / s + 1;
                if (ho <= 0 || wo <= 0) fail_shape(id, "conv output would be empty");
                Tensor y({nb, co, ho, wo});
                for (int64_t bi = 0; bi < nb; ++bi)
                    for (int64_t oc = 0; oc < co; ++oc)
                        for (int64_t oy = 0; oy < ho; ++oy)
                            for (int64_t ox = 0; ox < wo; ++ox) {
                                double acc = 0.0;
                                for (int64_t ic = 0; ic < ci; ++ic)
                                    for (int64_t ky = 0; ky < kh; ++ky) {
                                        int64_t iy = oy * s - p + ky;
                                        if (iy < 0 || iy >= h) continue;
                                        for (int64_t kx = 0; kx < kw; ++kx) {
                                            int64_t ix = ox * s - p + kx;
                                            if (ix < 0 || ix >= wd) continue;
                                            acc += x.data[((bi * ci + ic) * h + iy) * wd + ix] *
                                                   w.data[((oc * ci + ic) * kh + ky) * kw + kx];
                                        }
                                    }
                                y.data[((bi * co + oc) * ho + oy) * wo + ox] = acc;
                            }
                act_[id] = std::move(y);
                break;
            }
            case OpKind::BatchNorm: {
                const Tensor& x = in(n, 0);
                const Tensor& gamma = pslot(n, 0);
                const Tensor& beta = pslot(n, 1);
                if (x.shape.size() != 2 && x.shape.size() != 4)
                    fail_shape(id, "batchnorm input must be rank 2 or 4");
                int64_t c = x.shape[1];
                if (gamma.numel() != c || beta.numel() != c) fail_shape(id, "batchnorm affine size mismatch");
                int64_t count = x.numel() / c;
                if (count == 0) fail_shape(id, "batchnorm over empty batch");
                Tensor mean({c}), var({c});
                if (opts_.training) {
                    for_each_channel(x, c, [&](int64_t ch, int64_t idx) { mean.data[ch] += x.data[idx]; });
                    for (int64_t ch = 0; ch < c; ++ch) mean.data[ch] /= static_cast<double>(count);
                    for_each_channel(x, c, [&](int64_t ch, int64_t idx) {
                        double d = x.data[idx] - mean.data[ch];
                        var.data[ch] += d * d;
                    });
                    for (int64_t ch = 0; ch < c; ++ch) var.data[ch] /= static_cast<double>(count);
                    if (opts_.bn && opts_.update_bn_stats) {
                        double mom = opts_.bn->momentum;
                        Tensor& rm = opts_.bn->running_mean[n.bn_id];
                        Tensor& rv = opts_.bn->running_var[n.bn_id];
                        for (int64_t ch = 0; ch < c; ++ch) {
                            rm.data[ch] = (1 - mom) * rm.data[ch] + mom * mean.data[ch];
                            rv.data[ch] = (1 - mom) * rv.data[ch] + mom * var.data[ch];
                        }
                    }
                } else {
                    if (!opts_.bn) throw ConfigError("batchnorm eval requires running statistics");
                    mean = opts_.bn->running_mean[n.bn_id];
                    var = opts_.bn->running_var[n.bn_id];
                }
                Tensor invstd({c});
                for (int64_t ch = 0; ch < c; ++ch) invstd.data[ch] = 1.0 / std::sqrt(var.data[ch] + detail::kBnEps);
                Tensor xhat(x.shape), y(x.shape);
                for_each_channel(x, c, [&](int64_t ch, int64_t idx) {
                    double xh = (x.data[idx] - mean.data[ch]) * invstd.data[ch];
                    xhat.data[idx] = xh;
                    y.data[idx] = gamma.data[ch] * xh + beta.data[ch];
                });
                bn_xhat_[id] = std::move(xhat);
                bn_invstd_[id] = std::move(invstd);
                act_[id] = std::move(y);
                break;
            }
            case OpKind::Relu: {
                const Tensor& x = in(n, 0);
                Tensor y(x.shape);
                for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > 0 ? x.data[i] : 0.0;
                act_[id] = std::move(y);
                break;
            }
            case OpKind::Add: {
                const Tensor& a = in(n, 0);
                const Tensor& b = in(n, 1);
                if (!a.same_shape(b))
                    fail_shape(id, "add operands " + a.shape_str() + " vs " + b.shape_str());
                Tensor y(a.shape);
                for (size_t i = 0; i < a.data.size(); ++i) y.data[i] = a.data[i] + b.data[i];
                act_[id] = std::move(y);
                break;
            }
            case OpKind::Flatten: {
                const Tensor& x = in(n, 0);
                if (x.shape.empty()) fail_shape(id, "flatten of a scalar");
                Tensor y({x.shape[0], x.numel() / x.shape[0]});
                y.data = x.data;
                act_[id] = std::move(y);
                break;
            }
            case OpKind::SoftmaxCE: {
                const Tensor& z = in(n, 0);
                if (z.shape.size() != 2) fail_shape(id, "softmax-ce expects logits [n,K]");
                int64_t nb = z.shape[0], k = z.shape[1];
                if (static_cast<int64_t>(batch_.labels.size()) != nb)
                    fail_shape(id, "label count does not match batch size");
                Tensor probs({nb, k});
                double loss = 0.0;
                for (int64_t r = 0; r < nb; ++r) {
                    int y = batch_.labels[r];
                    if (y < 0 || y >= k) fail_shape(id, "label " + std::to_string(y) + " out of range");
                    const double* zr = &z.data[r * k];
                    double mx = zr[0];
                    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, zr[j]);
                    double sum = 0.0;
                    for (int64_t j = 0; j < k; ++j) sum += std::exp(zr[j] - mx);
                    double lse = mx + std::log(sum);
                    for (int64_t j = 0; j < k; ++j) probs.data[r * k + j] = std::exp(zr[j] - lse);
                    loss += lse - zr[y];
                }
                smce_probs_[id] = std::move(probs);
                Tensor out = Tensor::scalar(loss / static_cast<double>(nb));
                act_[id] = std::move(out);
                break;
            }
            case OpKind::SquaredLoss: {
                const Tensor& z = in(n, 0);
                const Tensor& t = n.const_ref;
                if (!z.same_shape(t))
                    fail_shape(id, "squared loss " + z.shape_str() + " vs target " + t.shape_str());
                int64_t nb = z.shape.empty() ? 1 : z.shape[0];
                double acc = 0.0;
                for (size_t i = 0; i < z.data.size(); ++i) {
                    double d = z.data[i] - t.data[i];
                    acc += d * d;
                }
                Tensor out = Tensor::scalar(acc / static_cast<double>(nb));
                act_[id] = std::move(out);
                break;
            }
            case OpKind::CosineRows: {
                const Tensor& a = in(n, 0);
                const Tensor& b = n.const_ref;
                if (a.shape.size() != 2 || !a.same_shape(b))
                    fail_shape(id, "cosine rows " + a.shape_str() + " vs reference " + b.shape_str());
                int64_t nb = a.shape[0], d = a.shape[1];
                Tensor y({nb});
                for (int64_t r = 0; r < nb; ++r) {
                    double dot = 0, na = 0, nbn = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        double av = a.data[r * d + j], bv = b.data[r * d + j];
                        dot += av * bv;
                        na += av * av;
                        nbn += bv * bv;
                    }
                    y.data[r] = dot / std::max(std::sqrt(na) * std::sqrt(nbn), detail::kCosineClamp);
                }
                act_[id] = std::move(y);
                break;
            }
            case OpKind::Contrast: {
                const Tensor& pos = in(n, 0);
                const Tensor& neg = in(n, 1);
                if (!pos.same_shape(neg) || pos.shape.size() != 1) fail_shape(id, "contrast expects two [n] inputs");
                int64_t nb = pos.shape[0];
                double acc = 0.0;
                for (int64_t r = 0; r < nb; ++r)
                    acc += detail::softplus((neg.data[r] - pos.data[r]) / n.tau);
                Tensor out = Tensor::scalar(acc / static_cast<double>(nb));
                act_[id] = std::move(out);
                break;
            }
            case OpKind::L2Penalty: {
                if (n.const_slots.size() != n.param_slots.size())
                    fail_shape(id, "l2 penalty reference count mismatch");
                double acc = 0.0;
                for (size_t k = 0; k < n.param_slots.size(); ++k) {
                    const Tensor& w = pslot(n, static_cast<int>(k));
                    const Tensor& ref = n.const_slots[k];
                    if (!w.same_shape(ref)) fail_shape(id, "l2 penalty reference shape mismatch");
                    for (size_t i = 0; i < w.data.size(); ++i) {
                        double d = w.data[i] - ref.data[i];
                        acc += d * d;
                    }
                }
                Tensor out = Tensor::scalar(0.5 * acc);
                act_[id] = std::move(out);
                break;
            }
            case OpKind::WeightedSum: {
                if (n.coeffs.size() != n.inputs.size()) fail_shape(id, "weighted sum coefficient count mismatch");
                double acc = 0.0;
                for (size_t k = 0; k < n.inputs.size(); ++k) {
                    const Tensor& v = in(n, static_cast<int>(k));
                    if (v.numel() != 1) fail_shape(id, "weighted sum inputs must be scalars");
                    acc += n.coeffs[k] * v.data[0];
                }
                Tensor out = Tensor::scalar(acc);
                act_[id] = std::move(out);
                break;
            }
        }
    }

    template <typename F>
    static void for_each_channel(const Tensor& x, int64_t c, F&& f) {
        if (x.shape.size() == 2) {
            int64_t nb = x.shape[0];
            for (int64_t r = 0; r < nb; ++r)
                for (int64_t ch = 0; ch < c; ++ch) f(ch, r * c + ch);
        } else {
            int64_t nb = x.shape[0], hw = x.shape[2] * x.shape[3];
            for (int64_t r = 0; r < nb; ++r)
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t i = 0; i < hw; ++i) f(ch, (r * c + ch) * hw + i);
        }
    }

    Tensor& ensure(std::vector<Tensor>& grad, int id) {
        if (grad[id].data.empty()) grad[id] = Tensor(act_[id].shape);
        return grad[id];
    }

    void backward_node(int id, std::vector<Tensor>& grad, ParamSet& pg, bool want_params) {
        const Node& n = g_.nodes[id];
        const Tensor& gy = grad[id];
        switch (n.kind) {
            case OpKind::Input:
                break;
            case OpKind::Linear: {
                const Tensor& x = in(n, 0);
                const Tensor& w = pslot(n, 0);
                int64_t nb = x.shape[0], din = x.shape[1], dout = w.shape[1];
                Tensor& gx = ensure(grad, n.inputs[0]);
                for (int64_t r = 0; r < nb; ++r) {
                    const double* gyr = &gy.data[r * dout];
                    double* gxr = &gx.data[r * din];
                    for (int64_t i = 0; i < din; ++i) {
                        const double* wr = &w.data[i * dout];
                        double acc = 0.0;
                        for (int64_t o = 0; o < dout; ++o) acc += gyr[o] * wr[o];
                        gxr[i] += acc;
                    }
                }
                if (want_params) {
                    Tensor& gw = pg.slots[n.param_slots[0]];
                    Tensor& gb = pg.slots[n.param_slots[1]];
                    for (int64_t r = 0; r < nb; ++r) {
                        const double* xr = &x.data[r * din];
                        const double* gyr = &gy.data[r * dout];
                        for (int64_t i = 0; i < din; ++i) {
                            double xv = xr[i];
                            double* gwr = &gw.data[i * dout];
                            for (int64_t o = 0; o < dout; ++o) gwr[o] += xv * gyr[o];
                        }
                        for (int64_t o = 0; o < dout; ++o) gb.data[o] += gyr[o];
                    }
                }
                break;
            }
            case OpKind::Conv2d: {
                const Tensor& x = in(n, 0);
                const Tensor& w = pslot(n, 0);
                int64_t nb = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3];
                int64_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
                int s = n.stride, p = n.pad;
                int64_t ho = gy.shape[2], wo = gy.shape[3];
                Tensor& gx = ensure(grad, n.inputs[0]);
                Tensor* gw = want_params ? &pg.slots[n.param_slots[0]] : nullptr;
                for (int64_t bi = 0; bi < nb; ++bi)
                    for (int64_t oc = 0; oc < co; ++oc)
                        for (int64_t oy = 0; oy < ho; ++oy)
                            for (int64_t ox = 0; ox < wo; ++ox) {
                                double g = gy.data[((bi * co + oc) * ho + oy) * wo + ox];
                                if (g == 0.0) continue;
                                for (int64_t ic = 0; ic < ci; ++ic)
                                    for (int64_t ky = 0; ky < kh; ++ky) {
                                        int64_t iy = oy * s - p + ky;
                                        if (iy < 0 || iy >= h) continue;
                                        for (int64_t kx = 0; kx < kw; ++kx) {
                                            int64_t ix = ox * s - p + kx;
                                            if (ix < 0 || ix >= wd) continue;
                                            int64_t xi = ((bi * ci + ic) * h + iy) * wd + ix;
                                            int64_t wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                                            gx.data[xi] += g * w.data[wi];
                                            if (gw) gw->data[wi] += g * x.data[xi];
                                        }
                                    }
                            }
                break;
            }
            case OpKind::BatchNorm: {
                const Tensor& gamma = pslot(n, 0);
                const Tensor& xhat = bn_xhat_[id];
                const Tensor& invstd = bn_invstd_[id];
                int64_t c = gamma.numel();
                int64_t count = xhat.numel() / c;
                Tensor sum_gy({c}), sum_gy_xhat({c});
                for_each_channel(xhat, c, [&](int64_t ch, int64_t idx) {
                    sum_gy.data[ch] += gy.data[idx];
                    sum_gy_xhat.data[ch] += gy.data[idx] * xhat.data[idx];
                });
                if (want_params) {
                    Tensor& gg = pg.slots[n.param_slots[0]];
                    Tensor& gb = pg.slots[n.param_slots[1]];
                    for (int64_t ch = 0; ch < c; ++ch) {
                        gg.data[ch] += sum_gy_xhat.data[ch];
                        gb.data[ch] += sum_gy.data[ch];
                    }
                }
                Tensor& gx = ensure(grad, n.inputs[0]);
                if (opts_.training) {
                    double inv_count = 1.0 / static_cast<double>(count);
                    for_each_channel(xhat, c, [&](int64_t ch, int64_t idx) {
                        double term = gy.data[idx] - sum_gy.data[ch] * inv_count -
                                      xhat.data[idx] * sum_gy_xhat.data[ch] * inv_count;
                        gx.data[idx] += gamma.data[ch] * invstd.data[ch] * term;
                    });
                } else {
                    // eval mode normalizes with constants; the map is affine
                    for_each_channel(xhat, c, [&](int64_t ch, int64_t idx) {
                        gx.data[idx] += gamma.data[ch] * invstd.data[ch] * gy.data[idx];
                    });
                }
                break;
            }
            case OpKind::Relu: {
                const Tensor& x = in(n, 0);
                Tensor& gx = ensure(grad, n.inputs[0]);
                for (size_t i = 0; i < x.data.size(); ++i)
                    if (x.data[i] > 0) gx.data[i] += gy.data[i];
                break;
            }
            case OpKind::Add: {
                Tensor& ga = ensure(grad, n.inputs[0]);
                for (size_t i = 0; i < gy.data.size(); ++i) ga.data[i] += gy.data[i];
                Tensor& gb = ensure(grad, n.inputs[1]);
                for (size_t i = 0; i < gy.data.size(); ++i) gb.data[i] += gy.data[i];
                break;
            }
            case OpKind::Flatten: {
                Tensor& gx = ensure(grad, n.inputs[0]);
                for (size_t i = 0; i < gy.data.size(); ++i) gx.data[i] += gy.data[i];
                break;
            }
            case OpKind::SoftmaxCE: {
                const Tensor& probs = smce_probs_[id];
                int64_t nb = probs.shape[0], k = probs.shape[1];
                double scale = gy.data[0] / static_cast<double>(nb);
                Tensor& gz = ensure(grad, n.inputs[0]);
                for (int64_t r = 0; r < nb; ++r) {
                    int y = batch_.labels[r];
                    for (int64_t j = 0; j < k; ++j)
                        gz.data[r * k + j] += scale * (probs.data[r * k + j] - (j == y ? 1.0 : 0.0));
                }
                break;
            }
            case OpKind::SquaredLoss: {
                const Tensor& z = in(n, 0);
                const Tensor& t = n.const_ref;
                int64_t nb = z.shape.empty() ? 1 : z.shape[0];
                double scale = 2.0 * gy.data[0] / static_cast<double>(nb);
                Tensor& gz = ensure(grad, n.inputs[0]);
                for (size_t i = 0; i < z.data.size(); ++i) gz.data[i] += scale * (z.data[i] - t.data[i]);
                break;
            }
            case OpKind::CosineRows: {
                const Tensor& a = in(n, 0);
                const Tensor& b = n.const_ref;
                int64_t nb = a.shape[0], d = a.shape[1];
                Tensor& ga = ensure(grad, n.inputs[0]);
                for (int64_t r = 0; r < nb; ++r) {
                    double dot = 0, na2 = 0, nb2 = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        double av = a.data[r * d + j], bv = b.data[r * d + j];
                        dot += av * bv;
                        na2 += av * av;
                        nb2 += bv * bv;
                    }
                    double prod = std::sqrt(na2) * std::sqrt(nb2);
                    double g = gy.data[r];
                    if (prod > detail::kCosineClamp) {
                        double cosv = dot / prod;
                        for (int64_t j = 0; j < d; ++j) {
                            double av = a.data[r * d + j], bv = b.data[r * d + j];
                            ga.data[r * d + j] += g * (bv / prod - cosv * av / na2);
                        }
                    } else {
                        // clamped branch: the denominator is the constant floor
                        for (int64_t j = 0; j < d; ++j)
                            ga.data[r * d + j] += g * b.data[r * d + j] / detail::kCosineClamp;
                    }
                }
                break;
            }
            case OpKind::Contrast: {
                const Tensor& pos = in(n, 0);
                const Tensor& neg = in(n, 1);
                int64_t nb = pos.shape[0];
                double scale = gy.data[0] / (static_cast<double>(nb) * n.tau);
                Tensor& gp = ensure(grad, n.inputs[0]);
                Tensor& gn = ensure(grad, n.inputs[1]);
                for (int64_t r = 0; r < nb; ++r) {
                    double sig = detail::logistic((neg.data[r] - pos.data[r]) / n.tau);
                    gp.data[r] -= scale * sig;
                    gn.data[r] += scale * sig;
                }
                break;
            }
            case OpKind::L2Penalty: {
                if (!want_params) break;
                double g = gy.data[0];
                for (size_t k = 0; k < n.param_slots.size(); ++k) {
                    const Tensor& w = pslot(n, static_cast<int>(k));
                    const Tensor& ref = n.const_slots[k];
                    Tensor& gw = pg.slots[n.param_slots[k]];
                    for (size_t i = 0; i < w.data.size(); ++i)
                        gw.data[i] += g * (w.data[i] - ref.data[i]);
                }
                break;
            }
            case OpKind::WeightedSum: {
                for (size_t k = 0; k < n.inputs.size(); ++k) {
                    Tensor& gi = ensure(grad, n.inputs[k]);
                    gi.data[0] += gy.data[0] * n.coeffs[k];
                }
                break;
            }
        }
    }
};

// ---- top-level entry points -------------------------------------------------

inline std::pair<double, ParamSet> evaluate_loss_and_grads(const Graph& g, const ParamSet& params,
                                                           const Batch& batch, EvalOptions opts = {}) {
    Evaluator ev(g, params, batch, opts);
    double loss = ev.loss();
    return {loss, ev.loss_grads()};
}

inline double evaluate_loss(const Graph& g, const ParamSet& params, const Batch& batch, EvalOptions opts = {}) {
    return Evaluator(g, params, batch, opts).loss();
}

// Row-stochastic softmax of a logits matrix (log-sum-exp stabilized).
inline Tensor softmax_rows(const Tensor& logits) {
    if (logits.shape.size() != 2) throw ShapeError("softmax_rows expects [n,K]");
    int64_t nb = logits.shape[0], k = logits.shape[1];
    Tensor p(logits.shape);
    for (int64_t r = 0; r < nb; ++r) {
        const double* zr = &logits.data[r * k];
        double mx = zr[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, zr[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < k; ++j) sum += std::exp(zr[j] - mx);
        for (int64_t j = 0; j < k; ++j) p.data[r * k + j] = std::exp(zr[j] - mx) / sum;
    }
    return p;
}

// Max over all parameters of |analytic - central difference| / max(1, |central difference|).
inline double finite_difference_check(const Graph& g, ParamSet params, const Batch& batch, double eps,
                                      BNState* bn = nullptr) {
    if (eps <= 0) throw ConfigError("finite_difference_check: eps must be positive");
    EvalOptions opts;
    opts.training = true;
    opts.bn = bn;
    opts.update_bn_stats = false;
    auto [loss, grads] = evaluate_loss_and_grads(g, params, batch, opts);
    (void)loss;
    double worst = 0.0;
    for (size_t s = 0; s < params.size(); ++s) {
        for (size_t i = 0; i < params.slots[s].data.size(); ++i) {
            double saved = params.slots[s].data[i];
            params.slots[s].data[i] = saved + eps;
            double lp = evaluate_loss(g, params, batch, opts);
            params.slots[s].data[i] = saved - eps;
            double lm = evaluate_loss(g, params, batch, opts);
            params.slots[s].data[i] = saved;
            double fd = (lp - lm) / (2 * eps);
            double err = std::abs(grads.slots[s].data[i] - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace fedpart
