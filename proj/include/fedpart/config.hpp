#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "fedpart/data.hpp"
#include "fedpart/fed.hpp"
#include "fedpart/model_zoo.hpp"
#include "fedpart/schedule.hpp"

#include "json.hpp"

namespace fedpart {

using nlohmann::json;

struct DataConfig {
    std::string kind = "blobs";  // blobs | spirals | micro-images | file
    std::string path;            // when kind == file
    SyntheticParams synth;
    int64_t test_per_class = 10;

    void validate() const {
        if (kind != "blobs" && kind != "spirals" && kind != "micro-images" && kind != "file")
            throw ConfigError("data.kind must be blobs|spirals|micro-images|file");
        if (kind == "file" && path.empty()) throw ConfigError("data.path required for file datasets");
        if (test_per_class < 1) throw ConfigError("data.test_per_class must be >= 1");
    }
};

struct ExperimentConfig {
    ModelSpec model;
    DataConfig data;
    int clients = 8;
    double participation = 1.0;
    std::string schedule_mode = "fedpart";  // fedpart | fnu
    ScheduleConfig schedule;                 // fedpart mode; schedule.m filled from the model partition
    int fnu_rounds = 10;                     // fnu mode round budget
    std::string shard_kind = "iid";          // iid | dirichlet
    double dirichlet_alpha = 1.0;
    AlgoConfig algo;
    uint64_t seed = 1;
    int repeats = 1;
    std::string out_dir = "out";
    int bytes_per_param = 4;
    int threads = 1;
    bool theorem_metric = true;

    void validate() const {
        model.validate();
        data.validate();
        if (clients < 1) throw ConfigError("clients must be >= 1");
        if (!(participation > 0.0) || participation > 1.0) throw ConfigError("participation must be in (0,1]");
        if (schedule_mode != "fedpart" && schedule_mode != "fnu")
            throw ConfigError("schedule.mode must be fedpart|fnu");
        if (schedule_mode == "fedpart") schedule.validate();
        if (schedule_mode == "fnu" && fnu_rounds < 1) throw ConfigError("fnu rounds must be >= 1");
        if (shard_kind != "iid" && shard_kind != "dirichlet") throw ConfigError("shards must be iid|dirichlet");
        if (shard_kind == "dirichlet" && dirichlet_alpha <= 0) throw ConfigError("dirichlet alpha must be > 0");
        algo.validate();
        if (repeats < 1) throw ConfigError("repeats must be >= 1");
        if (bytes_per_param != 4 && bytes_per_param != 8) throw ConfigError("bytes_per_param must be 4 or 8");
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }
};

// ---- JSON (de)serialization ---------------------------------------------------

namespace detail {

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "': " + e.what());
    }
}

template <typename T>
T require(const json& j, const std::string& key) {
    if (!j.contains(key)) throw ConfigError("missing required key '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "': " + e.what());
    }
}

}  // namespace detail

inline json model_spec_to_json(const ModelSpec& m) {
    return {{"kind", m.kind},       {"input_shape", m.input_shape}, {"hidden", m.hidden},
            {"classes", m.classes}, {"channels", m.channels}};
}

inline ModelSpec model_spec_from_json(const json& j) {
    ModelSpec m;
    m.kind = detail::require<std::string>(j, "kind");
    m.input_shape = detail::require<std::vector<int64_t>>(j, "input_shape");
    m.hidden = detail::get_or<std::vector<int>>(j, "hidden", {});
    m.classes = detail::require<int>(j, "classes");
    m.channels = detail::get_or<int>(j, "channels", 8);
    return m;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    c.model = model_spec_from_json(j.contains("model") ? j.at("model")
                                                       : throw ConfigError("missing required key 'model'"));
    {
        if (!j.contains("data")) throw ConfigError("missing required key 'data'");
        const json& d = j.at("data");
        c.data.kind = detail::require<std::string>(d, "kind");
        c.data.path = detail::get_or<std::string>(d, "path", "");
        c.data.synth.n = detail::get_or<int64_t>(d, "n", c.data.synth.n);
        c.data.synth.classes = detail::get_or<int>(d, "classes", c.model.classes);
        c.data.synth.dim = detail::get_or<int64_t>(d, "dim", c.data.synth.dim);
        c.data.synth.separation = detail::get_or<double>(d, "separation", c.data.synth.separation);
        c.data.synth.sigma = detail::get_or<double>(d, "sigma", c.data.synth.sigma);
        c.data.synth.balanced = detail::get_or<bool>(d, "balanced", c.data.synth.balanced);
        c.data.synth.noise = detail::get_or<double>(d, "noise", c.data.synth.noise);
        c.data.synth.image_shape =
            detail::get_or<std::vector<int64_t>>(d, "image_shape", c.data.synth.image_shape);
        c.data.test_per_class = detail::get_or<int64_t>(d, "test_per_class", c.data.test_per_class);
    }
    c.clients = detail::require<int>(j, "clients");
    c.participation = detail::get_or<double>(j, "participation", 1.0);
    {
        if (!j.contains("schedule")) throw ConfigError("missing required key 'schedule'");
        const json& s = j.at("schedule");
        c.schedule_mode = detail::get_or<std::string>(s, "mode", "fedpart");
        c.schedule.rounds_per_layer = detail::get_or<int>(s, "rounds_per_layer", 1);
        c.schedule.warmup_rounds = detail::get_or<int>(s, "warmup", 0);
        c.schedule.interleave_fnu_rounds = detail::get_or<int>(s, "interleave", 0);
        c.schedule.cycles = detail::get_or<int>(s, "cycles", 1);
        c.schedule.order = detail::get_or<std::string>(s, "order", "sequential");
        c.fnu_rounds = detail::get_or<int>(s, "rounds", 10);
    }
    {
        if (!j.contains("shards")) throw ConfigError("missing required key 'shards'");
        const json& s = j.at("shards");
        c.shard_kind = detail::require<std::string>(s, "kind");
        c.dirichlet_alpha = detail::get_or<double>(s, "alpha", 1.0);
    }
    {
        if (!j.contains("algo")) throw ConfigError("missing required key 'algo'");
        const json& a = j.at("algo");
        c.algo.algorithm = detail::require<std::string>(a, "name");
        c.algo.mu = detail::get_or<double>(a, "mu", c.algo.mu);
        c.algo.tau = detail::get_or<double>(a, "tau", c.algo.tau);
        c.algo.mu_con = detail::get_or<double>(a, "mu_con", c.algo.mu_con);
        c.algo.local_epochs = detail::require<int>(a, "epochs");
        c.algo.batch_size = detail::get_or<int>(a, "batch", 32);
        c.algo.optimizer = detail::get_or<std::string>(a, "optimizer", "adam");
        c.algo.adam.gamma = detail::get_or<double>(a, "lr", 0.001);
        c.algo.adam.beta1 = detail::get_or<double>(a, "beta1", 0.9);
        c.algo.adam.beta2 = detail::get_or<double>(a, "beta2", 0.999);
        c.algo.adam.eps = detail::get_or<double>(a, "eps", 1e-8);
        c.algo.reg_in_warmup = detail::get_or<bool>(a, "reg_in_warmup", true);
    }
    c.seed = detail::get_or<uint64_t>(j, "seed", 1);
    c.repeats = detail::get_or<int>(j, "repeats", 1);
    c.out_dir = detail::get_or<std::string>(j, "out", "out");
    c.bytes_per_param = detail::get_or<int>(j, "bytes_per_param", 4);
    c.threads = detail::get_or<int>(j, "threads", 1);
    c.theorem_metric = detail::get_or<bool>(j, "theorem_metric", true);
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config '" + path + "'");
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    return experiment_config_from_json(j);
}

// Stable hash over the canonical serialized config, echoed into sidecars.
inline std::string config_hash(const json& j) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

// ---- experiment assembly -------------------------------------------------------

struct PreparedExperiment {
    BuiltModel model;
    Dataset train;
    Dataset test;
    ShardAssignment shards;
    RoundPlan plan;
};

// Deterministic assembly from (config, seed): data -> split -> shards -> model -> plan.
inline PreparedExperiment prepare_experiment(const ExperimentConfig& cfg, uint64_t seed) {
    cfg.validate();
    PreparedExperiment prep;
    uint64_t data_seed = derive_seed(seed, "data");
    Dataset full = cfg.data.kind == "file" ? load_dataset(cfg.data.path)
                                           : generate_synthetic(cfg.data.kind, cfg.data.synth, data_seed);
    full.validate();
    auto [test, remainder] = balanced_test_split(full, cfg.data.test_per_class);
    prep.test = std::move(test);
    prep.train = std::move(remainder);
    prep.shards = cfg.shard_kind == "iid"
                      ? partition_iid(prep.train, cfg.clients, derive_seed(seed, "shards"))
                      : partition_dirichlet(prep.train, cfg.clients, cfg.dirichlet_alpha,
                                            derive_seed(seed, "shards"));
    prep.model = build_model(cfg.model, derive_seed(seed, "model"));
    int m = static_cast<int>(prep.model.partition.size());
    if (cfg.schedule_mode == "fnu") {
        prep.plan = build_fnu_plan(m, cfg.fnu_rounds);
    } else {
        ScheduleConfig sc = cfg.schedule;
        sc.m = m;
        sc.seed = derive_seed(seed, "schedule");
        prep.plan = build_schedule(sc);
    }
    return prep;
}

inline Engine make_engine(const ExperimentConfig& cfg, uint64_t seed) {
    PreparedExperiment prep = prepare_experiment(cfg, seed);
    EngineOptions opts;
    opts.participation = cfg.participation;
    opts.master_seed = seed;
    opts.threads = cfg.threads;
    opts.bytes_per_param = cfg.bytes_per_param;
    opts.theorem_metric = cfg.theorem_metric;
    return Engine(std::move(prep.model), std::move(prep.train), std::move(prep.shards), std::move(prep.test),
                  std::move(prep.plan), cfg.algo, opts);
}

}  // namespace fedpart
