#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedpart/analysis.hpp"
#include "fedpart/data.hpp"
#include "fedpart/graph.hpp"
#include "fedpart/metrics.hpp"
#include "fedpart/model_zoo.hpp"
#include "fedpart/optim.hpp"
#include "fedpart/schedule.hpp"

#include "json.hpp"

namespace fedpart {

struct AlgoConfig {
    std::string algorithm = "fedavg";  // fedavg | fedprox | fedmoon
    double mu = 0.01;                  // fedprox proximal weight
    double tau = 0.5;                  // fedmoon temperature
    double mu_con = 1.0;               // fedmoon contrastive weight
    int local_epochs = 1;
    int batch_size = 32;
    std::string optimizer = "adam";  // adam | sgd
    AdamHyper adam;                  // adam.gamma doubles as the sgd learning rate
    bool reg_in_warmup = true;       // apply prox/contrastive terms during FNU phases too

    void validate() const {
        if (algorithm != "fedavg" && algorithm != "fedprox" && algorithm != "fedmoon")
            throw ConfigError("algorithm must be fedavg|fedprox|fedmoon");
        if (mu < 0) throw ConfigError("mu must be >= 0");
        if (tau <= 0) throw ConfigError("tau must be > 0");
        if (mu_con < 0) throw ConfigError("mu_con must be >= 0");
        if (local_epochs < 1) throw ConfigError("local epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("optimizer must be adam|sgd");
        if (!(adam.gamma >= 0) || !std::isfinite(adam.gamma)) throw ConfigError("bad learning rate");
    }
};

struct ClientState {
    int id = 0;
    std::vector<int64_t> shard;
    BNState bn;
    OptimState opt;
    ParamSet prev_local;  // previous-round local model, for the contrastive term
    bool has_prev = false;
};

struct ServerState {
    ParamSet global;
    BNState bn;  // evaluation statistics; never trained, never aggregated
    int round_counter = 0;
};

struct ClientUpdate {
    int id = 0;
    std::vector<std::pair<int, Tensor>> slots;  // trainable-group slots only
    int64_t sample_count = 0;
    std::vector<double> loss_trace;
    std::vector<double> step_sizes;
};

// ---- per-round training graph --------------------------------------------------

namespace detail {

struct TrainingGraph {
    Graph g;
    int cos_pos = -1;  // node whose const_ref holds the global-model representation
    int cos_neg = -1;  // node whose const_ref holds the previous local representation
    bool moon = false;
};

// Appends the algorithm-specific loss terms to a copy of the task graph.
// The proximal reference is pinned at construction; the contrastive
// representation constants are refreshed per batch.
inline TrainingGraph make_training_graph(const Graph& task, const LayerPartition& partition,
                                         const LayerMask& mask, const AlgoConfig& algo, bool apply_reg,
                                         const ParamSet& global_params, bool has_prev) {
    TrainingGraph tg;
    tg.g = task;
    if (!apply_reg) return tg;
    std::vector<int> terms = {task.loss_node};
    std::vector<double> coeffs = {1.0};
    if (algo.algorithm == "fedprox" && algo.mu > 0) {
        Node pen;
        pen.kind = OpKind::L2Penalty;
        pen.label = "prox";
        for (size_t gi = 0; gi < partition.size(); ++gi) {
            if (!mask.trainable(gi)) continue;
            for (int s : partition.groups[gi].slot_ids) {
                pen.param_slots.push_back(s);
                pen.const_slots.push_back(global_params.slots[s]);
            }
        }
        if (!pen.param_slots.empty()) {
            terms.push_back(tg.g.add(std::move(pen)));
            coeffs.push_back(algo.mu);
        }
    } else if (algo.algorithm == "fedmoon" && algo.mu_con > 0 && has_prev) {
        if (task.penultimate_node < 0) throw ConfigError("fedmoon requires a penultimate tap in the graph");
        Node cp;
        cp.kind = OpKind::CosineRows;
        cp.label = "moon.pos";
        cp.inputs = {task.penultimate_node};
        tg.cos_pos = tg.g.add(std::move(cp));
        Node cn;
        cn.kind = OpKind::CosineRows;
        cn.label = "moon.neg";
        cn.inputs = {task.penultimate_node};
        tg.cos_neg = tg.g.add(std::move(cn));
        Node ct;
        ct.kind = OpKind::Contrast;
        ct.label = "moon";
        ct.inputs = {tg.cos_pos, tg.cos_neg};
        ct.tau = algo.tau;
        terms.push_back(tg.g.add(std::move(ct)));
        coeffs.push_back(algo.mu_con);
        tg.moon = true;
    }
    if (terms.size() > 1) {
        Node ws;
        ws.kind = OpKind::WeightedSum;
        ws.label = "objective";
        ws.inputs = std::move(terms);
        ws.coeffs = std::move(coeffs);
        tg.g.loss_node = tg.g.add(std::move(ws));
    }
    return tg;
}

inline std::vector<std::vector<int64_t>> batch_plan(size_t shard_size, int batch_size,
                                                    const std::vector<int64_t>& order) {
    std::vector<std::vector<int64_t>> batches;
    for (size_t pos = 0; pos < shard_size; pos += batch_size) {
        size_t take = std::min<size_t>(batch_size, shard_size - pos);
        batches.emplace_back(order.begin() + pos, order.begin() + pos + take);
    }
    return batches;
}

template <typename F>
void parallel_over(int n, int threads, F&& body) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    int lanes = std::min(threads, n);
    for (int t = 0; t < lanes; ++t)
        pool.emplace_back([&]() {
            for (;;) {
                int i = next.fetch_add(1);
                if (i >= n) return;
                body(i);
            }
        });
    for (auto& th : pool) th.join();
}

}  // namespace detail

// Runs E masked local epochs from the broadcast model; returns only the
// trainable groups. Frozen groups of the working copy stay bit-identical to
// the broadcast values throughout.
inline ClientUpdate local_train(ClientState& client, const Graph& task_graph, const LayerPartition& partition,
                                const Dataset& data, const ParamSet& global_params, const LayerMask& mask,
                                const AlgoConfig& algo, bool apply_reg, uint64_t round_seed) {
    if (client.shard.empty()) throw ConfigError("client " + std::to_string(client.id) + " has an empty shard");
    algo.validate();

    detail::TrainingGraph tg = detail::make_training_graph(task_graph, partition, mask, algo, apply_reg,
                                                           global_params, client.has_prev);
    ParamSet working = global_params;

    EvalOptions self_opts;  // the client's own forward: batch stats + running-stat updates
    self_opts.training = true;
    self_opts.bn = &client.bn;
    self_opts.update_bn_stats = true;
    EvalOptions aux_opts = self_opts;  // other models' forwards never touch this client's stats
    aux_opts.update_bn_stats = false;

    ClientUpdate up;
    up.id = client.id;
    up.sample_count = static_cast<int64_t>(client.shard.size());

    for (int epoch = 0; epoch < algo.local_epochs; ++epoch) {
        std::vector<int64_t> order = client.shard;
        Rng shuffle_rng(derive_seed(round_seed, "shuffle", epoch));
        shuffle_rng.shuffle(order);
        for (const auto& idx : detail::batch_plan(order.size(), algo.batch_size, order)) {
            Batch batch = data.batch_of(idx);
            if (tg.moon) {
                Evaluator glob_ev(task_graph, global_params, batch, aux_opts);
                tg.g.nodes[tg.cos_pos].const_ref = glob_ev.value(task_graph.penultimate_node);
                Evaluator prev_ev(task_graph, client.prev_local, batch, aux_opts);
                tg.g.nodes[tg.cos_neg].const_ref = prev_ev.value(task_graph.penultimate_node);
            }
            auto [loss, grads] = evaluate_loss_and_grads(tg.g, working, batch, self_opts);
            ParamSet stepped;
            if (algo.optimizer == "adam") {
                auto [next, state] = masked_adam_step(working, grads, partition, mask, client.opt, algo.adam);
                stepped = std::move(next);
                client.opt = std::move(state);
            } else {
                stepped = masked_sgd_step(working, grads, partition, mask, algo.adam.gamma);
            }
            up.step_sizes.push_back(step_size(working, stepped));
            up.loss_trace.push_back(loss);
            working = std::move(stepped);
        }
    }

    for (size_t gi = 0; gi < partition.size(); ++gi) {
        if (!mask.trainable(gi)) continue;
        for (int s : partition.groups[gi].slot_ids) up.slots.emplace_back(s, working.slots[s]);
    }
    client.prev_local = std::move(working);
    client.has_prev = true;
    return up;
}

// Unweighted mean of the trainable groups over the participating clients,
// summed in ascending client-id order; frozen groups pass through untouched.
inline ParamSet aggregate(const std::vector<ClientUpdate>& updates, const ServerState& server,
                          const LayerMask& mask, const LayerPartition& partition) {
    if (updates.empty()) throw ConfigError("aggregate: no client updates");
    std::vector<const ClientUpdate*> ordered;
    ordered.reserve(updates.size());
    for (const auto& u : updates) ordered.push_back(&u);
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientUpdate* a, const ClientUpdate* b) { return a->id < b->id; });

    std::vector<int> expected;
    for (size_t gi = 0; gi < partition.size(); ++gi)
        if (mask.trainable(gi))
            for (int s : partition.groups[gi].slot_ids) expected.push_back(s);

    ParamSet out = server.global;
    for (int slot : expected) {
        Tensor acc(out.slots[slot].shape);
        for (const ClientUpdate* u : ordered) {
            const Tensor* found = nullptr;
            for (const auto& [s, t] : u->slots)
                if (s == slot) found = &t;
            if (!found)
                throw ShapeError("aggregate: client " + std::to_string(u->id) + " did not report slot " +
                                 server.global.names[slot]);
            if (!found->same_shape(acc))
                throw ShapeError("aggregate: slot " + server.global.names[slot] + " shape mismatch");
            for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += found->data[i];
        }
        for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] /= static_cast<double>(ordered.size());
        out.slots[slot] = std::move(acc);
    }
    return out;
}

// ---- experiment engine ----------------------------------------------------------

struct EngineOptions {
    double participation = 1.0;
    uint64_t master_seed = 1;
    int threads = 1;
    int bytes_per_param = 4;
    bool theorem_metric = true;  // per-round masked full-batch gradient metric

    void validate() const {
        if (!(participation > 0.0) || participation > 1.0)
            throw ConfigError("participation must be in (0,1]");
        if (threads < 1) throw ConfigError("threads must be >= 1");
        if (bytes_per_param != 4 && bytes_per_param != 8) throw ConfigError("bytes_per_param must be 4 or 8");
    }
};

class Engine {
public:
    Engine(BuiltModel model, Dataset train, ShardAssignment shards, Dataset test, RoundPlan plan,
           AlgoConfig algo, EngineOptions opts)
        : graph_(std::move(model.graph)),
          partition_(std::move(model.partition)),
          data_(std::move(train)),
          test_(std::move(test)),
          plan_(std::move(plan)),
          algo_(std::move(algo)),
          opts_(opts) {
        opts_.validate();
        algo_.validate();
        if (static_cast<int>(partition_.size()) != plan_.m)
            throw ConfigError("schedule group count " + std::to_string(plan_.m) +
                              " does not match model partition of " + std::to_string(partition_.size()));
        partition_.validate_covers(model.params);
        counts_ = group_param_counts(partition_, model.params);
        server_.global = std::move(model.params);
        server_.bn = graph_.make_bn_state(server_.global);
        shards.validate(data_.size());
        clients_.resize(shards.shards.size());
        for (size_t i = 0; i < shards.shards.size(); ++i) {
            clients_[i].id = static_cast<int>(i);
            clients_[i].shard = shards.shards[i];
            clients_[i].bn = graph_.make_bn_state(server_.global);
            clients_[i].opt = OptimState::zeros_like(server_.global);
        }
        std::vector<int64_t> pooled;
        for (const auto& s : shards.shards) pooled.insert(pooled.end(), s.begin(), s.end());
        std::sort(pooled.begin(), pooled.end());
        pooled_ = data_.batch_of(pooled);
    }

    ServerState& server() { return server_; }
    const Graph& graph() const { return graph_; }
    const LayerPartition& partition() const { return partition_; }
    const RoundPlan& plan() const { return plan_; }
    std::vector<ClientState>& clients() { return clients_; }

    RoundRecord run_round(int round_index) {
        const RoundEntry& entry = plan_.at_round(round_index);
        const LayerMask& mask = entry.mask;

        RoundRecord rec;
        rec.round = round_index;
        rec.phase = phase_name(entry.phase);
        rec.trained_groups = mask_group_names(mask);
        if (opts_.theorem_metric)
            rec.masked_grad_sq = masked_grad_metric(graph_, server_.global, pooled_, partition_, mask);

        std::vector<int> participants = sample_participants(round_index);
        bool apply_reg = algo_.reg_in_warmup || entry.phase == Phase::Pnu;
        std::vector<ClientUpdate> updates(participants.size());
        detail::parallel_over(static_cast<int>(participants.size()), opts_.threads, [&](int i) {
            ClientState& cl = clients_[participants[i]];
            uint64_t seed = derive_seed(opts_.master_seed, "train", cl.id, round_index);
            updates[i] =
                local_train(cl, graph_, partition_, data_, server_.global, mask, algo_, apply_reg, seed);
        });

        append_step_series(updates, round_index, rec);
        double loss_acc = 0.0;
        for (const auto& u : updates) {
            double m = 0.0;
            for (double l : u.loss_trace) m += l;
            loss_acc += u.loss_trace.empty() ? 0.0 : m / u.loss_trace.size();
        }
        rec.mean_loss = updates.empty() ? 0.0 : loss_acc / updates.size();

        server_.global = aggregate(updates, server_, mask, partition_);
        server_.round_counter += 1;

        rec.comm_bytes = comm_bytes_for_round(mask, counts_, opts_.bytes_per_param);
        CostEntry cost;
        cost.round = round_index;
        cost.upstream_bytes_per_client = rec.comm_bytes;
        cost.participants = static_cast<int>(participants.size());
        for (int p : participants) {
            RoundFlops rf = flops_for_round(graph_, mask, partition_, server_.global,
                                            static_cast<int64_t>(clients_[p].shard.size()),
                                            algo_.local_epochs);
            cost.flops_fwd += rf.forward;
            cost.flops_bwd += rf.backward;
        }
        rec.flops_fwd = cost.flops_fwd;
        rec.flops_bwd = cost.flops_bwd;
        ledger_.rounds.push_back(cost);

        rec.accuracy = evaluate_accuracy(graph_, server_.global, test_, &server_.bn);
        return rec;
    }

    ExperimentLog run_all() {
        ExperimentLog log;
        for (int r = 1; r <= plan_.total_rounds(); ++r) log.records.push_back(run_round(r));
        log.steps = steps_;
        log.ledger = ledger_;
        if (!log.records.empty()) {
            log.final_accuracy = log.records.back().accuracy;
            for (const auto& r : log.records) log.best_accuracy = std::max(log.best_accuracy, r.accuracy);
        }
        return log;
    }

private:
    Graph graph_;
    LayerPartition partition_;
    Dataset data_;
    Dataset test_;
    RoundPlan plan_;
    AlgoConfig algo_;
    EngineOptions opts_;
    GroupCounts counts_;
    ServerState server_;
    std::vector<ClientState> clients_;
    Batch pooled_;
    CostLedger ledger_;
    StepSizeSeries steps_;

    std::vector<int> sample_participants(int round_index) {
        int n = static_cast<int>(clients_.size());
        int k = static_cast<int>(std::ceil(opts_.participation * n - 1e-9));
        k = std::clamp(k, 1, n);
        std::vector<int> ids(n);
        std::iota(ids.begin(), ids.end(), 0);
        if (k < n) {
            Rng rng(derive_seed(opts_.master_seed, "sample", round_index));
            rng.shuffle(ids);
            ids.resize(k);
            std::sort(ids.begin(), ids.end());
        }
        return ids;
    }

    void append_step_series(const std::vector<ClientUpdate>& updates, int round_index, RoundRecord& rec) {
        size_t max_iters = 0;
        for (const auto& u : updates) max_iters = std::max(max_iters, u.step_sizes.size());
        int64_t base = steps_.points.empty() ? 0 : steps_.points.back().iteration + 1;
        for (size_t j = 0; j < max_iters; ++j) {
            double acc = 0.0;
            int cnt = 0;
            for (const auto& u : updates)
                if (j < u.step_sizes.size()) {
                    acc += u.step_sizes[j];
                    ++cnt;
                }
            steps_.points.push_back({base + static_cast<int64_t>(j), round_index, acc / cnt});
        }
        if (max_iters > 0) {
            rec.step_first_post = steps_.points[steps_.points.size() - max_iters].mean_step;
            rec.step_last_pre = steps_.points.back().mean_step;
        }
    }
};

// ---- checkpoints -----------------------------------------------------------------
//
// Little-endian: magic "FPRT", version u32=1, group count u32, then per group
// name length u16 + name bytes + param count u64 + float64 values (the
// group's slots concatenated in partition order). A JSON sidecar at
// <path>.json carries the round counter and config hash.

inline void save_checkpoint(const ParamSet& params, const LayerPartition& partition, const std::string& path,
                            const nlohmann::json& sidecar) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write("FPRT", 4);
    detail::write_le<uint32_t>(os, 1);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(partition.size()));
    for (const auto& g : partition.groups) {
        detail::write_le<uint16_t>(os, static_cast<uint16_t>(g.name.size()));
        os.write(g.name.data(), static_cast<std::streamsize>(g.name.size()));
        uint64_t count = 0;
        for (int s : g.slot_ids) count += static_cast<uint64_t>(params.slots[s].numel());
        detail::write_le<uint64_t>(os, count);
        for (int s : g.slot_ids)
            for (double v : params.slots[s].data) detail::write_le<double>(os, v);
    }
    if (!os) throw IoError("write failed for '" + path + "'");
    std::ofstream js(path + ".json");
    if (!js) throw IoError("cannot write sidecar for '" + path + "'");
    js << sidecar.dump(2) << "\n";
}

inline ParamSet load_checkpoint_params(const std::string& path, const LayerPartition& partition,
                                       const ParamSet& reference) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FPRT", 4) != 0) throw IoError("bad magic in '" + path + "'");
    uint32_t version = detail::read_le<uint32_t>(is);
    if (version != 1) throw IoError("unsupported checkpoint version");
    uint32_t groups = detail::read_le<uint32_t>(is);
    if (groups != partition.size()) throw IoError("checkpoint group count does not match the model");
    ParamSet out = reference;
    for (uint32_t gi = 0; gi < groups; ++gi) {
        uint16_t len = detail::read_le<uint16_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw IoError("truncated checkpoint");
        if (name != partition.groups[gi].name)
            throw IoError("checkpoint group '" + name + "' does not match model group '" +
                          partition.groups[gi].name + "'");
        uint64_t count = detail::read_le<uint64_t>(is);
        uint64_t expect = 0;
        for (int s : partition.groups[gi].slot_ids) expect += static_cast<uint64_t>(reference.slots[s].numel());
        if (count != expect) throw IoError("checkpoint group '" + name + "' has wrong parameter count");
        for (int s : partition.groups[gi].slot_ids)
            for (auto& v : out.slots[s].data) v = detail::read_le<double>(is);
    }
    return out;
}

}  // namespace fedpart
