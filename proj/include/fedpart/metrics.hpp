#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fedpart/data.hpp"
#include "fedpart/graph.hpp"
#include "fedpart/param_set.hpp"
#include "fedpart/schedule.hpp"

#include "json.hpp"

namespace fedpart {

// L2 norm of the concatenated elementwise parameter delta over ALL groups.
inline double step_size(const ParamSet& prev, const ParamSet& next) {
    if (!prev.same_structure(next)) throw ShapeError("step_size: parameter structure mismatch");
    double acc = 0.0;
    for (size_t s = 0; s < prev.size(); ++s)
        for (size_t i = 0; i < prev.slots[s].data.size(); ++i) {
            double d = next.slots[s].data[i] - prev.slots[s].data[i];
            acc += d * d;
        }
    return std::sqrt(acc);
}

// Per-client upstream payload for one round: trainable parameters only.
inline uint64_t comm_bytes_for_round(const LayerMask& mask, const GroupCounts& counts, int bytes_per_param = 4) {
    if (bytes_per_param != 4 && bytes_per_param != 8)
        throw ConfigError("bytes_per_param must be 4 or 8");
    if (mask.size() != counts.per_group.size()) throw ShapeError("comm bytes: mask arity mismatch");
    uint64_t total = 0;
    for (size_t g = 0; g < mask.size(); ++g)
        if (mask.trainable(g)) total += static_cast<uint64_t>(counts.per_group[g]) * bytes_per_param;
    return total;
}

inline uint64_t comm_bytes_for_round(const LayerMask& mask, const LayerPartition& partition,
                                     const ParamSet& params, int bytes_per_param = 4) {
    return comm_bytes_for_round(mask, group_param_counts(partition, params), bytes_per_param);
}

// Forward FLOPs per sample for every node, from shape inference at batch 1.
// Multiply-add counts as 2 FLOPs; normalization/activation cost is linear in
// elements; the loss head and auxiliary regularizer nodes are not billed.
inline std::vector<uint64_t> node_forward_flops(const Graph& g, const ParamSet& params) {
    std::vector<std::vector<int64_t>> shape(g.nodes.size());
    std::vector<uint64_t> flops(g.nodes.size(), 0);
    auto numel = [](const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return static_cast<uint64_t>(n);
    };
    for (size_t id = 0; id < g.nodes.size(); ++id) {
        const Node& n = g.nodes[id];
        switch (n.kind) {
            case OpKind::Input: {
                shape[id] = {1};
                for (int64_t d : g.input_shape) shape[id].push_back(d);
                break;
            }
            case OpKind::Linear: {
                const auto& w = params.slots[n.param_slots[0]].shape;
                shape[id] = {shape[n.inputs[0]][0], w[1]};
                flops[id] = 2ull * static_cast<uint64_t>(w[0]) * static_cast<uint64_t>(w[1]);
                break;
            }
            case OpKind::Conv2d: {
                const auto& x = shape[n.inputs[0]];
                const auto& w = params.slots[n.param_slots[0]].shape;
                int64_t ho = (x[2] + 2 * n.pad - w[2]) / n.stride + 1;
                int64_t wo = (x[3] + 2 * n.pad - w[3]) / n.stride + 1;
                shape[id] = {x[0], w[0], ho, wo};
                flops[id] = 2ull * static_cast<uint64_t>(w[1] * w[2] * w[3]) *
                            static_cast<uint64_t>(w[0] * ho * wo);
                break;
            }
            case OpKind::BatchNorm:
                shape[id] = shape[n.inputs[0]];
                flops[id] = 2ull * numel(shape[id]);
                break;
            case OpKind::Relu:
                shape[id] = shape[n.inputs[0]];
                flops[id] = numel(shape[id]);
                break;
            case OpKind::Add:
                shape[id] = shape[n.inputs[0]];
                flops[id] = numel(shape[id]);
                break;
            case OpKind::Flatten: {
                const auto& x = shape[n.inputs[0]];
                shape[id] = {x[0], static_cast<int64_t>(numel(x)) / x[0]};
                break;
            }
            case OpKind::SoftmaxCE:
            case OpKind::SquaredLoss:
            case OpKind::CosineRows:
            case OpKind::Contrast:
            case OpKind::L2Penalty:
            case OpKind::WeightedSum:
                shape[id] = {1};
                break;
        }
    }
    return flops;
}

struct RoundFlops {
    uint64_t forward = 0;
    uint64_t backward = 0;
};

// Forward bills the full network; backward bills 2x forward for every node
// from the output down to the shallowest trainable group, inclusive. Nothing
// below the shallowest trainable group is billed backward.
inline RoundFlops flops_for_round(const Graph& g, const LayerMask& mask, const LayerPartition& partition,
                                  const ParamSet& params, int64_t batch_size, int64_t local_iterations) {
    if (mask.size() != partition.size()) throw ShapeError("flops: mask arity mismatch");
    std::vector<uint64_t> per_node = node_forward_flops(g, params);
    // earliest node holding a slot of any trainable group
    int start = -1;
    for (size_t gi = 0; gi < partition.size(); ++gi) {
        if (!mask.trainable(gi)) continue;
        for (int slot : partition.groups[gi].slot_ids)
            for (size_t id = 0; id < g.nodes.size(); ++id)
                for (int ps : g.nodes[id].param_slots)
                    if (ps == slot && (start < 0 || static_cast<int>(id) < start)) start = static_cast<int>(id);
    }
    RoundFlops rf;
    uint64_t scale = static_cast<uint64_t>(batch_size) * static_cast<uint64_t>(local_iterations);
    for (size_t id = 0; id < per_node.size(); ++id) {
        rf.forward += per_node[id] * scale;
        if (start >= 0 && static_cast<int>(id) >= start) rf.backward += 2 * per_node[id] * scale;
    }
    return rf;
}

// Argmax-match fraction; ties break toward the lowest class index.
inline double evaluate_accuracy(const Graph& g, const ParamSet& params, const Dataset& test,
                                BNState* bn = nullptr) {
    if (test.size() < 1) throw ConfigError("evaluate_accuracy: empty test set");
    EvalOptions opts;
    opts.training = false;
    opts.bn = bn;
    int64_t hits = 0;
    constexpr int64_t kChunk = 512;
    std::vector<int64_t> idx;
    for (int64_t base = 0; base < test.size(); base += kChunk) {
        idx.clear();
        for (int64_t i = base; i < std::min(base + kChunk, test.size()); ++i) idx.push_back(i);
        Batch b = test.batch_of(idx);
        Evaluator ev(g, params, b, opts);
        const Tensor& logits = ev.value(g.logits_node);
        int64_t k = logits.shape[1];
        for (int64_t r = 0; r < logits.shape[0]; ++r) {
            int best = 0;
            for (int64_t j = 1; j < k; ++j)
                if (logits.data[r * k + j] > logits.data[r * k + best]) best = static_cast<int>(j);
            if (best == b.labels[r]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

// ---- experiment records ------------------------------------------------------

struct CostEntry {
    int round = 0;
    uint64_t upstream_bytes_per_client = 0;
    int participants = 0;
    uint64_t flops_fwd = 0;  // summed over participating clients
    uint64_t flops_bwd = 0;
};

struct CostLedger {
    std::vector<CostEntry> rounds;

    uint64_t cumulative_bytes_per_client() const {
        uint64_t t = 0;
        for (const auto& e : rounds) t += e.upstream_bytes_per_client;
        return t;
    }
    uint64_t cumulative_flops_fwd() const {
        uint64_t t = 0;
        for (const auto& e : rounds) t += e.flops_fwd;
        return t;
    }
    uint64_t cumulative_flops_bwd() const {
        uint64_t t = 0;
        for (const auto& e : rounds) t += e.flops_bwd;
        return t;
    }
};

struct StepPoint {
    int64_t iteration = 0;  // global local-iteration index, 0-based
    int round = 0;
    double mean_step = 0.0;  // averaged over participating clients
};

struct StepSizeSeries {
    std::vector<StepPoint> points;
};

struct RoundRecord {
    int round = 0;
    std::string phase;
    std::vector<std::string> trained_groups;
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double step_first_post = 0.0;  // first local step after receiving the averaged model
    double step_last_pre = 0.0;    // last local step before this round's aggregation
    uint64_t comm_bytes = 0;       // per-client upstream
    uint64_t flops_fwd = 0;
    uint64_t flops_bwd = 0;
    double masked_grad_sq = 0.0;  // ||S_t (.) grad f(w_{t-1})||^2 over the pooled shards
    std::string bn_eval_mode = "server_running_stats";
};

struct ExperimentLog {
    std::vector<RoundRecord> records;
    StepSizeSeries steps;
    CostLedger ledger;
    double final_accuracy = 0.0;
    double best_accuracy = 0.0;
};

namespace detail {

inline std::string full_precision(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline nlohmann::json round_record_to_json(const RoundRecord& r) {
    return {{"round", r.round},
            {"phase", r.phase},
            {"trained_groups", r.trained_groups},
            {"accuracy", r.accuracy},
            {"mean_loss", r.mean_loss},
            {"step_first_post", r.step_first_post},
            {"step_last_pre", r.step_last_pre},
            {"comm_bytes", r.comm_bytes},
            {"flops_fwd", r.flops_fwd},
            {"flops_bwd", r.flops_bwd},
            {"masked_grad_sq", r.masked_grad_sq},
            {"bn_eval_mode", r.bn_eval_mode}};
}

// rounds.jsonl + summary.csv + stepsizes.csv, full-precision decimal.
inline void emit_logs(const ExperimentLog& log, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream os(out_dir + "/rounds.jsonl");
        if (!os) throw IoError("cannot write rounds.jsonl in '" + out_dir + "'");
        for (const auto& r : log.records) os << round_record_to_json(r).dump() << "\n";
    }
    {
        std::ofstream os(out_dir + "/summary.csv");
        if (!os) throw IoError("cannot write summary.csv in '" + out_dir + "'");
        os << "round,phase,acc,comm_bytes,flops_fwd,flops_bwd,step_pre,step_post\n";
        for (const auto& r : log.records)
            os << r.round << "," << r.phase << "," << detail::full_precision(r.accuracy) << "," << r.comm_bytes
               << "," << r.flops_fwd << "," << r.flops_bwd << "," << detail::full_precision(r.step_last_pre)
               << "," << detail::full_precision(r.step_first_post) << "\n";
    }
    {
        std::ofstream os(out_dir + "/stepsizes.csv");
        if (!os) throw IoError("cannot write stepsizes.csv in '" + out_dir + "'");
        os << "iteration,round,mean_step\n";
        for (const auto& p : log.steps.points)
            os << p.iteration << "," << p.round << "," << detail::full_precision(p.mean_step) << "\n";
    }
}

}  // namespace fedpart
