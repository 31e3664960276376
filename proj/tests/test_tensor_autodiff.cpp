#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "fedpart/builder.hpp"
#include "fedpart/graph.hpp"
#include "fedpart/model_zoo.hpp"
#include "fedpart/optim.hpp"

using namespace fedpart;

namespace {

// three scalar slots, one group each
struct ScalarTriple {
    ParamSet params;
    LayerPartition part;
};

ScalarTriple make_scalar_groups(const std::vector<double>& values) {
    ScalarTriple st;
    for (size_t i = 0; i < values.size(); ++i) {
        st.params.add("w" + std::to_string(i), Tensor::scalar(values[i]));
        st.part.groups.push_back({"#" + std::to_string(i + 1), {static_cast<int>(i)}});
    }
    return st;
}

ParamSet grads_of(const ParamSet& like, const std::vector<double>& values) {
    ParamSet g = like.zeros_like();
    for (size_t i = 0; i < values.size(); ++i) g.slots[i].data[0] = values[i];
    return g;
}

}  // namespace

TEST_CASE("single linear neuron, squared loss, closed form") {
    GraphBuilder b({1});
    int z = b.linear(b.input_node(), 1, 1, "fc", nullptr);
    b.params.slots[0].data[0] = 2.0;  // w
    Tensor target({1, 1});
    b.squared_loss(z, target);

    Batch batch;
    batch.features = Tensor({1, 1}, {1.0});
    batch.labels = {0};
    auto [loss, grads] = evaluate_loss_and_grads(b.graph, b.params, batch);
    CHECK(loss == Catch::Approx(4.0).epsilon(1e-14));             // (w*x - y)^2
    CHECK(grads.slots[0].data[0] == Catch::Approx(4.0).epsilon(1e-14));  // 2(w*x - y)*x
}

TEST_CASE("zero-weight linear into softmax cross-entropy gives ln K") {
    for (int k : {2, 3, 7}) {
        GraphBuilder b({4});
        int z = b.linear(b.input_node(), 4, k, "fc", nullptr);  // zero init
        b.softmax_ce(z);
        Batch batch;
        batch.features = Tensor({2, 4});
        for (auto& v : batch.features.data) v = 0.37;
        batch.labels = {0, k - 1};
        double loss = evaluate_loss(b.graph, b.params, batch);
        CHECK(loss == Catch::Approx(std::log(static_cast<double>(k))).epsilon(1e-13));
    }
}

TEST_CASE("2-layer mlp gradients match central finite differences") {
    ModelSpec spec;
    spec.kind = "mlp";
    spec.input_shape = {4};
    spec.hidden = {3};
    spec.classes = 2;
    auto model = build_mlp(spec, 77);

    Rng rng(123);
    Batch batch;
    batch.features = Tensor({5, 4});
    for (auto& v : batch.features.data) v = rng.normal();
    batch.labels = {0, 1, 1, 0, 1};
    double err = finite_difference_check(model.graph, model.params, batch, 1e-6);
    CHECK(err < 1e-6);
}

TEST_CASE("linear regression graph gradient error below 1e-9") {
    GraphBuilder b({3});
    Rng rng(5);
    int z = b.linear(b.input_node(), 3, 1, "fc", &rng);
    Tensor target({4, 1}, {0.5, -1.0, 2.0, 0.0});
    b.squared_loss(z, target);
    Batch batch;
    batch.features = Tensor({4, 3});
    for (auto& v : batch.features.data) v = rng.normal();
    batch.labels = {0, 0, 0, 0};
    CHECK(finite_difference_check(b.graph, b.params, batch, 1e-6) < 1e-9);
}

TEST_CASE("conv + batchnorm + relu micro-net gradient error below 1e-5") {
    GraphBuilder b({2, 4, 4});
    Rng rng(11);
    int y = b.conv2d(b.input_node(), 2, 3, 3, 1, 1, "c1", &rng);
    y = b.batchnorm(y, 3, "bn1");
    y = b.relu(y);
    y = b.conv2d(y, 3, 2, 1, 2, 0, "c2", &rng);
    y = b.flatten(y);
    y = b.linear(y, 2 * 2 * 2, 3, "fc", &rng);
    b.softmax_ce(y);

    Batch batch;
    batch.features = Tensor({3, 2, 4, 4});
    for (auto& v : batch.features.data) v = rng.uniform();
    batch.labels = {0, 2, 1};
    BNState bn = b.graph.make_bn_state(b.params);
    CHECK(finite_difference_check(b.graph, b.params, batch, 1e-6, &bn) < 1e-5);
}

TEST_CASE("zero input batch on a bias-free path: first-layer weight grad is exactly zero") {
    GraphBuilder b({3});
    Rng rng(9);
    int z = b.linear(b.input_node(), 3, 2, "fc1", &rng);
    z = b.relu(z);
    z = b.linear(z, 2, 2, "fc2", &rng);
    b.softmax_ce(z);
    Batch batch;
    batch.features = Tensor({4, 3});  // all zeros
    batch.labels = {0, 1, 0, 1};
    auto [loss, grads] = evaluate_loss_and_grads(b.graph, b.params, batch);
    (void)loss;
    for (double v : grads.slots[0].data) CHECK(v == 0.0);  // fc1 weight: x^T delta with x = 0
}

TEST_CASE("shape mismatch raises a structured error naming the node") {
    GraphBuilder b({4});
    int z = b.linear(b.input_node(), 4, 2, "fc", nullptr);
    b.softmax_ce(z);
    Batch batch;
    batch.features = Tensor({2, 5});
    batch.labels = {0, 1};
    CHECK_THROWS_AS(evaluate_loss(b.graph, b.params, batch), ShapeError);
    try {
        evaluate_loss(b.graph, b.params, batch);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("input") != std::string::npos);
    }
}

TEST_CASE("non-finite loss raises a numeric error carrying the node id") {
    GraphBuilder b({1});
    int z = b.linear(b.input_node(), 1, 1, "fc", nullptr);
    b.params.slots[0].data[0] = 1e308;
    Tensor target({1, 1});
    b.squared_loss(z, target);
    Batch batch;
    batch.features = Tensor({1, 1}, {1e308});
    batch.labels = {0};
    CHECK_THROWS_AS(evaluate_loss(b.graph, b.params, batch), NumericError);
}

TEST_CASE("masked sgd: direct application of the update rule") {
    auto st = make_scalar_groups({0.0, 0.0});
    ParamSet g = grads_of(st.params, {1.0, 2.0});
    LayerMask mask;
    mask.bits = {1, 0};
    ParamSet out = masked_sgd_step(st.params, g, st.part, mask, 0.1);
    CHECK(out.slots[0].data[0] == Catch::Approx(-0.1).epsilon(1e-15));
    CHECK(out.slots[1].data[0] == 0.0);
}

TEST_CASE("masked sgd: all-zero mask returns bit-identical parameters") {
    Rng rng(31);
    auto st = make_scalar_groups({rng.normal(), rng.normal(), rng.normal()});
    ParamSet g = grads_of(st.params, {rng.normal(), rng.normal(), rng.normal()});
    ParamSet out = masked_sgd_step(st.params, g, st.part, LayerMask::all_zeros(3), 0.05);
    CHECK(bit_identical(out, st.params));
}

TEST_CASE("masked sgd with all-one mask equals an unmasked reference") {
    Rng rng(42);
    auto st = make_scalar_groups({rng.normal(), rng.normal(), rng.normal()});
    ParamSet g = grads_of(st.params, {rng.normal(), rng.normal(), rng.normal()});
    double gamma = 0.07;
    ParamSet out = masked_sgd_step(st.params, g, st.part, LayerMask::all_ones(3), gamma);
    // plain unmasked loop as the oracle
    for (size_t s = 0; s < st.params.size(); ++s) {
        double expect = st.params.slots[s].data[0] - gamma * g.slots[s].data[0];
        CHECK(out.slots[s].data[0] == expect);
    }
}

TEST_CASE("masked adam: first-step magnitude property") {
    auto st = make_scalar_groups({0.5});
    ParamSet g = grads_of(st.params, {1.0});
    OptimState opt = OptimState::zeros_like(st.params);
    AdamHyper hyper;
    auto [out, st2] = masked_adam_step(st.params, g, st.part, LayerMask::all_ones(1), opt, hyper);
    double expect = 0.5 - hyper.gamma * 1.0 / (1.0 + hyper.eps);
    CHECK(out.slots[0].data[0] == Catch::Approx(expect).epsilon(1e-12));
    CHECK(st2.step_count == 1);
}

TEST_CASE("masked adam: frozen group keeps parameters and moments bit-identical") {
    auto st = make_scalar_groups({1.0, -2.0});
    ParamSet g = grads_of(st.params, {3.0, 4.0});
    OptimState opt = OptimState::zeros_like(st.params);
    opt.m[1].data[0] = 0.125;  // pre-existing moment on the frozen group
    opt.v[1].data[0] = 0.5;
    LayerMask mask;
    mask.bits = {1, 0};
    auto [out, st2] = masked_adam_step(st.params, g, st.part, mask, opt, AdamHyper{});
    CHECK(bit_identical(out.slots[1], st.params.slots[1]));
    CHECK(bit_identical(st2.m[1], opt.m[1]));
    CHECK(bit_identical(st2.v[1], opt.v[1]));
    CHECK(out.slots[0].data[0] != st.params.slots[0].data[0]);
}

TEST_CASE("masked adam: ten steps on a quadratic match a hand-rolled scalar oracle") {
    // oracle: scalar Adam on f(w) = w^2, g = 2w
    double w = 1.5, m = 0, v = 0;
    AdamHyper h;
    std::vector<double> trace;
    for (int t = 1; t <= 10; ++t) {
        double g = 2 * w;
        m = h.beta1 * m + (1 - h.beta1) * g;
        v = h.beta2 * v + (1 - h.beta2) * g * g;
        double mhat = m / (1 - std::pow(h.beta1, t));
        double vhat = v / (1 - std::pow(h.beta2, t));
        w -= h.gamma * mhat / (std::sqrt(vhat) + h.eps);
        trace.push_back(w);
    }

    auto st = make_scalar_groups({1.5});
    OptimState opt = OptimState::zeros_like(st.params);
    ParamSet cur = st.params;
    for (int t = 0; t < 10; ++t) {
        ParamSet g = grads_of(cur, {2 * cur.slots[0].data[0]});
        auto [next, opt2] = masked_adam_step(cur, g, st.part, LayerMask::all_ones(1), opt, h);
        cur = std::move(next);
        opt = std::move(opt2);
        CHECK(std::abs(cur.slots[0].data[0] - trace[t]) < 1e-12);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(100);
    Tensor logits({32, 7});
    for (auto& v : logits.data) v = rng.normal(0, 30.0);
    Tensor p = softmax_rows(logits);
    for (int64_t r = 0; r < 32; ++r) {
        double s = 0;
        for (int64_t j = 0; j < 7; ++j) s += p.data[r * 7 + j];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("gradient correctness across all node kinds (randomized micro-graphs)") {
    // cosine + contrast + l2 penalty + weighted sum combined head
    Rng rng(2024);
    GraphBuilder b({6});
    int z = b.linear(b.input_node(), 6, 4, "fc1", &rng);
    z = b.relu(z);
    int z2 = b.linear(z, 4, 4, "fc2", &rng);
    int added = b.add(z2, z);
    int logits = b.linear(added, 4, 3, "fc3", &rng);
    int task = b.softmax_ce(logits);
    Tensor ref_pos({2, 4}), ref_neg({2, 4});
    for (auto& v : ref_pos.data) v = rng.normal();
    for (auto& v : ref_neg.data) v = rng.normal();
    int cpos = b.cosine_rows(added, ref_pos, "cos_pos");
    int cneg = b.cosine_rows(added, ref_neg, "cos_neg");
    int con = b.contrast(cpos, cneg, 0.5);
    ParamSet snapshot = b.params;
    int pen = b.l2_penalty({0, 1}, {snapshot.slots[0], snapshot.slots[1]}, "prox");
    // move the penalized slots off the reference so the penalty has signal
    for (auto& v : b.params.slots[0].data) v += 0.1;
    b.weighted_sum({task, con, pen}, {1.0, 0.7, 0.3});

    Batch batch;
    batch.features = Tensor({2, 6});
    for (auto& v : batch.features.data) v = rng.normal();
    batch.labels = {2, 0};

    // the cosine is non-differentiable at a zero representation row; keep away
    {
        Evaluator ev(b.graph, b.params, batch);
        const Tensor& rep = ev.value(added);
        for (int64_t r = 0; r < rep.shape[0]; ++r) {
            double n2 = 0;
            for (int64_t j = 0; j < rep.shape[1]; ++j) n2 += rep.data[r * rep.shape[1] + j] *
                                                            rep.data[r * rep.shape[1] + j];
            REQUIRE(n2 > 1e-3);
        }
    }
    CHECK(finite_difference_check(b.graph, b.params, batch, 1e-6) < 1e-6);
}

TEST_CASE("determinism: identical seeds and inputs give bit-identical gradients") {
    ModelSpec spec;
    spec.kind = "mlp";
    spec.input_shape = {5};
    spec.hidden = {4};
    spec.classes = 3;
    auto m1 = build_mlp(spec, 9);
    auto m2 = build_mlp(spec, 9);
    REQUIRE(bit_identical(m1.params, m2.params));

    Rng rng(55);
    Batch batch;
    batch.features = Tensor({6, 5});
    for (auto& v : batch.features.data) v = rng.normal();
    batch.labels = {0, 1, 2, 0, 1, 2};
    auto [l1, g1] = evaluate_loss_and_grads(m1.graph, m1.params, batch);
    auto [l2, g2] = evaluate_loss_and_grads(m2.graph, m2.params, batch);
    CHECK(std::memcmp(&l1, &l2, sizeof(double)) == 0);
    CHECK(bit_identical(g1, g2));
}
