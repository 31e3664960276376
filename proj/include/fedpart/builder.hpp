#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fedpart/common.hpp"
#include "fedpart/graph.hpp"

namespace fedpart {

// Incremental graph construction; parameter slots are He-initialized when an
// Rng is supplied, zero-initialized otherwise.
class GraphBuilder {
public:
    explicit GraphBuilder(std::vector<int64_t> input_shape) {
        graph.input_shape = std::move(input_shape);
        Node n;
        n.kind = OpKind::Input;
        n.label = "input";
        graph.input_node = graph.add(std::move(n));
    }

    int input_node() const { return graph.input_node; }
    const std::vector<int>& last_slots() const { return last_slots_; }

    int linear(int x, int64_t in, int64_t out, const std::string& name, Rng* rng) {
        Tensor w({in, out});
        if (rng) {
            double sd = std::sqrt(2.0 / static_cast<double>(in));
            for (auto& v : w.data) v = rng->normal(0.0, sd);
        }
        int ws = params.add(name + ".w", std::move(w));
        int bs = params.add(name + ".b", Tensor({out}));
        Node n;
        n.kind = OpKind::Linear;
        n.label = name;
        n.inputs = {x};
        n.param_slots = {ws, bs};
        last_slots_ = {ws, bs};
        return graph.add(std::move(n));
    }

    int conv2d(int x, int64_t cin, int64_t cout, int k, int stride, int pad, const std::string& name, Rng* rng) {
        Tensor w({cout, cin, k, k});
        if (rng) {
            double sd = std::sqrt(2.0 / static_cast<double>(cin * k * k));
            for (auto& v : w.data) v = rng->normal(0.0, sd);
        }
        int ws = params.add(name + ".w", std::move(w));
        Node n;
        n.kind = OpKind::Conv2d;
        n.label = name;
        n.inputs = {x};
        n.param_slots = {ws};
        n.stride = stride;
        n.pad = pad;
        last_slots_ = {ws};
        return graph.add(std::move(n));
    }

    int batchnorm(int x, int64_t channels, const std::string& name) {
        Tensor gamma({channels});
        gamma.fill(1.0);
        int gs = params.add(name + ".g", std::move(gamma));
        int bs = params.add(name + ".b", Tensor({channels}));
        Node n;
        n.kind = OpKind::BatchNorm;
        n.label = name;
        n.inputs = {x};
        n.param_slots = {gs, bs};
        n.bn_id = graph.num_bn++;
        last_slots_ = {gs, bs};
        return graph.add(std::move(n));
    }

    int relu(int x, const std::string& name = "relu") {
        Node n;
        n.kind = OpKind::Relu;
        n.label = name;
        n.inputs = {x};
        return graph.add(std::move(n));
    }

    int add(int a, int b, const std::string& name = "add") {
        Node n;
        n.kind = OpKind::Add;
        n.label = name;
        n.inputs = {a, b};
        return graph.add(std::move(n));
    }

    int flatten(int x, const std::string& name = "flatten") {
        Node n;
        n.kind = OpKind::Flatten;
        n.label = name;
        n.inputs = {x};
        return graph.add(std::move(n));
    }

    int softmax_ce(int logits, const std::string& name = "loss") {
        Node n;
        n.kind = OpKind::SoftmaxCE;
        n.label = name;
        n.inputs = {logits};
        int id = graph.add(std::move(n));
        graph.logits_node = logits;
        graph.loss_node = id;
        return id;
    }

    int squared_loss(int x, Tensor target, const std::string& name = "mse") {
        Node n;
        n.kind = OpKind::SquaredLoss;
        n.label = name;
        n.inputs = {x};
        n.const_ref = std::move(target);
        int id = graph.add(std::move(n));
        graph.logits_node = x;
        graph.loss_node = id;
        return id;
    }

    int cosine_rows(int x, Tensor ref, const std::string& name) {
        Node n;
        n.kind = OpKind::CosineRows;
        n.label = name;
        n.inputs = {x};
        n.const_ref = std::move(ref);
        return graph.add(std::move(n));
    }

    int contrast(int pos, int neg, double tau, const std::string& name = "contrast") {
        Node n;
        n.kind = OpKind::Contrast;
        n.label = name;
        n.inputs = {pos, neg};
        n.tau = tau;
        return graph.add(std::move(n));
    }

    int l2_penalty(std::vector<int> slots, std::vector<Tensor> refs, const std::string& name) {
        Node n;
        n.kind = OpKind::L2Penalty;
        n.label = name;
        n.param_slots = std::move(slots);
        n.const_slots = std::move(refs);
        return graph.add(std::move(n));
    }

    int weighted_sum(std::vector<int> inputs, std::vector<double> coeffs, const std::string& name = "total") {
        Node n;
        n.kind = OpKind::WeightedSum;
        n.label = name;
        n.inputs = std::move(inputs);
        n.coeffs = std::move(coeffs);
        int id = graph.add(std::move(n));
        graph.loss_node = id;
        return id;
    }

    Graph graph;
    ParamSet params;

private:
    std::vector<int> last_slots_;
};

}  // namespace fedpart
