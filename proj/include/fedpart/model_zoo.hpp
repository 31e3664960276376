#pragma once

#include <string>
#include <vector>

#include "fedpart/builder.hpp"

namespace fedpart {

struct ModelSpec {
    std::string kind;                  // "mlp" | "micro-resnet"
    std::vector<int64_t> input_shape;  // mlp: [d]; micro-resnet: [C,H,W]
    std::vector<int> hidden;           // mlp hidden widths
    int classes = 2;
    int channels = 8;                  // micro-resnet base width

    void validate() const {
        if (kind != "mlp" && kind != "micro-resnet")
            throw ConfigError("model kind must be 'mlp' or 'micro-resnet', got '" + kind + "'");
        if (classes < 2) throw ConfigError("class count must be >= 2");
        if (kind == "mlp") {
            if (input_shape.size() != 1 || input_shape[0] < 1)
                throw ConfigError("mlp input shape must be [d], d >= 1");
            for (int w : hidden)
                if (w < 1) throw ConfigError("mlp widths must be positive");
        } else {
            if (input_shape.size() != 3 || input_shape[0] < 1)
                throw ConfigError("micro-resnet input shape must be [C,H,W]");
            int64_t h = input_shape[1], w = input_shape[2];
            if (h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0)
                throw ConfigError("micro-resnet spatial dims must be multiples of 4, >= 4");
            if (channels < 1) throw ConfigError("channel width must be positive");
        }
    }
};

struct BuiltModel {
    Graph graph;
    ParamSet params;
    LayerPartition partition;
};

// Dense stack; every weight+bias pair is one partition group.
inline BuiltModel build_mlp(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    if (spec.kind != "mlp") throw ConfigError("build_mlp: spec kind is '" + spec.kind + "'");
    Rng rng(derive_seed(seed, "mlp-init"));
    GraphBuilder b(spec.input_shape);
    int x = b.input_node();
    int64_t din = spec.input_shape[0];
    LayerPartition part;
    int layer = 0;
    auto dense = [&](int64_t out, bool last) {
        ++layer;
        std::string gname = "#" + std::to_string(layer);
        if (!last) {
            x = b.linear(x, din, out, "fc" + std::to_string(layer), &rng);
            part.groups.push_back({gname, b.last_slots()});
            x = b.relu(x);
        } else {
            b.graph.penultimate_node = x;
            x = b.linear(x, din, out, "fc" + std::to_string(layer), &rng);
            part.groups.push_back({gname, b.last_slots()});
        }
        din = out;
    };
    for (int w : spec.hidden) dense(w, false);
    dense(spec.classes, true);
    b.softmax_ce(x);
    part.validate_covers(b.params);
    return {std::move(b.graph), std::move(b.params), std::move(part)};
}

// Miniature residual network following the 10-group numbering convention:
// conv+BN pairs form #1..#9 (down-sampling shortcut convs join their block's
// second group), the final classifier is #10.
inline BuiltModel build_micro_resnet(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    if (spec.kind != "micro-resnet") throw ConfigError("build_micro_resnet: spec kind is '" + spec.kind + "'");
    Rng rng(derive_seed(seed, "resnet-init"));
    GraphBuilder b(spec.input_shape);
    LayerPartition part;
    int group_no = 0;
    int64_t width = spec.channels;

    auto conv_bn = [&](int x, int64_t cin, int64_t cout, int k, int stride, const std::string& tag,
                       std::vector<int>& slots) {
        int pad = (k == 3) ? 1 : 0;
        int y = b.conv2d(x, cin, cout, k, stride, pad, tag + ".conv", &rng);
        for (int s : b.last_slots()) slots.push_back(s);
        y = b.batchnorm(y, cout, tag + ".bn");
        for (int s : b.last_slots()) slots.push_back(s);
        return y;
    };
    auto new_group = [&]() -> std::string { return "#" + std::to_string(++group_no); };

    int x;
    {
        std::vector<int> slots;
        int y = conv_bn(b.input_node(), spec.input_shape[0], width, 3, 1, "stem", slots);
        part.groups.push_back({new_group(), slots});
        x = b.relu(y);
    }

    struct StagePlan {
        int64_t out_ch;
        int stride;
    };
    std::vector<StagePlan> blocks = {{width, 1}, {width * 2, 2}, {width * 4, 2}, {width * 4, 1}};
    int64_t cur_ch = width;
    for (size_t bi = 0; bi < blocks.size(); ++bi) {
        const auto& bp = blocks[bi];
        std::string tag = "b" + std::to_string(bi + 1);
        std::vector<int> slots_a, slots_b;
        int y = conv_bn(x, cur_ch, bp.out_ch, 3, bp.stride, tag + ".1", slots_a);
        part.groups.push_back({new_group(), slots_a});
        y = b.relu(y);
        y = conv_bn(y, bp.out_ch, bp.out_ch, 3, 1, tag + ".2", slots_b);
        int shortcut = x;
        if (bp.stride != 1 || cur_ch != bp.out_ch)
            shortcut = conv_bn(x, cur_ch, bp.out_ch, 1, bp.stride, tag + ".sc", slots_b);
        part.groups.push_back({new_group(), slots_b});
        x = b.relu(b.add(y, shortcut, tag + ".add"));
        cur_ch = bp.out_ch;
    }

    int flat = b.flatten(x);
    b.graph.penultimate_node = flat;
    int64_t feat = cur_ch * (spec.input_shape[1] / 4) * (spec.input_shape[2] / 4);
    int logits = b.linear(flat, feat, spec.classes, "fc", &rng);
    part.groups.push_back({new_group(), b.last_slots()});
    b.softmax_ce(logits);
    part.validate_covers(b.params);
    return {std::move(b.graph), std::move(b.params), std::move(part)};
}

inline BuiltModel build_model(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    return spec.kind == "mlp" ? build_mlp(spec, seed) : build_micro_resnet(spec, seed);
}

}  // namespace fedpart
