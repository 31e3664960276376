#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "fedpart/common.hpp"
#include "fedpart/param_set.hpp"

#include "json.hpp"

namespace fedpart {

enum class Phase { Warmup, Pnu, Interleave };

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::Warmup: return "warmup";
        case Phase::Pnu: return "pnu";
        case Phase::Interleave: return "interleave";
    }
    return "?";
}

struct ScheduleConfig {
    int m = 1;                    // partition group count
    int rounds_per_layer = 1;     // R/L
    int warmup_rounds = 0;
    int interleave_fnu_rounds = 0;  // FNU rounds between cycles
    int cycles = 1;
    std::string order = "sequential";  // sequential | reverse | random
    uint64_t seed = 0;

    void validate() const {
        if (m < 1) throw ConfigError("schedule: group count must be >= 1");
        if (rounds_per_layer < 1) throw ConfigError("schedule: rounds per layer must be >= 1");
        if (warmup_rounds < 0) throw ConfigError("schedule: warmup rounds must be >= 0");
        if (interleave_fnu_rounds < 0) throw ConfigError("schedule: interleave rounds must be >= 0");
        if (cycles < 1) throw ConfigError("schedule: cycles must be >= 1");
        if (order != "sequential" && order != "reverse" && order != "random")
            throw ConfigError("schedule: order must be sequential|reverse|random");
    }

    int total_rounds() const {
        return warmup_rounds + cycles * m * rounds_per_layer + (cycles - 1) * interleave_fnu_rounds;
    }
};

struct RoundEntry {
    int round = 0;  // 1-based, contiguous
    Phase phase = Phase::Warmup;
    LayerMask mask;
    int cycle = 0;  // 0 for warmup; pnu rounds carry their cycle (1-based);
                    // interleave rounds carry the cycle they follow
};

struct RoundPlan {
    int m = 0;
    std::vector<RoundEntry> entries;

    int total_rounds() const { return static_cast<int>(entries.size()); }

    const RoundEntry& at_round(int round_index) const {
        if (round_index < 1 || round_index > total_rounds())
            throw ConfigError("round index " + std::to_string(round_index) + " outside plan of " +
                              std::to_string(total_rounds()) + " rounds");
        return entries[round_index - 1];
    }
};

// Warm-up FNU, then per cycle a full sweep over the groups (R/L consecutive
// rounds each) with FNU interleave blocks strictly between cycles.
inline RoundPlan build_schedule(const ScheduleConfig& cfg) {
    cfg.validate();
    RoundPlan plan;
    plan.m = cfg.m;
    int round = 0;
    auto push = [&](Phase ph, LayerMask mask, int cycle) {
        plan.entries.push_back({++round, ph, std::move(mask), cycle});
    };
    for (int r = 0; r < cfg.warmup_rounds; ++r) push(Phase::Warmup, LayerMask::all_ones(cfg.m), 0);
    for (int c = 1; c <= cfg.cycles; ++c) {
        if (c > 1)
            for (int r = 0; r < cfg.interleave_fnu_rounds; ++r)
                push(Phase::Interleave, LayerMask::all_ones(cfg.m), c - 1);
        std::vector<int> order(cfg.m);
        std::iota(order.begin(), order.end(), 0);
        if (cfg.order == "reverse") {
            std::reverse(order.begin(), order.end());
        } else if (cfg.order == "random") {
            Rng rng(derive_seed(cfg.seed, "layer-order", c));
            rng.shuffle(order);
        }
        for (int g : order)
            for (int r = 0; r < cfg.rounds_per_layer; ++r)
                push(Phase::Pnu, LayerMask::one_hot(cfg.m, g), c);
    }
    return plan;
}

// All-FNU plan with the same per-round record shape, for baseline runs.
inline RoundPlan build_fnu_plan(int m, int rounds) {
    if (m < 1 || rounds < 1) throw ConfigError("fnu plan: m and rounds must be positive");
    RoundPlan plan;
    plan.m = m;
    for (int r = 1; r <= rounds; ++r) plan.entries.push_back({r, Phase::Warmup, LayerMask::all_ones(m), 0});
    return plan;
}

inline const LayerMask& mask_for_round(const RoundPlan& plan, int round_index) {
    return plan.at_round(round_index).mask;
}

// Checks every plan invariant; violations come back as data, empty = valid.
inline std::vector<std::string> validate_schedule(const RoundPlan& plan, const ScheduleConfig& cfg) {
    std::vector<std::string> v;
    auto complain = [&](const std::string& s) { v.push_back(s); };
    if (plan.total_rounds() != cfg.total_rounds())
        complain("length: plan has " + std::to_string(plan.total_rounds()) + " rounds, config implies " +
                 std::to_string(cfg.total_rounds()));
    bool seen_non_warmup = false;
    for (size_t i = 0; i < plan.entries.size(); ++i) {
        const auto& e = plan.entries[i];
        if (e.round != static_cast<int>(i) + 1) complain("round indices: not contiguous from 1");
        if (static_cast<int>(e.mask.size()) != cfg.m) complain("mask arity: wrong group count");
        if (e.phase == Phase::Warmup) {
            if (seen_non_warmup) complain("phase order: warmup round after non-warmup round");
            if (e.mask.count() != e.mask.size()) complain("mask arity: warmup round without all-ones mask");
        } else {
            seen_non_warmup = true;
        }
        if (e.phase == Phase::Pnu && e.mask.count() != 1)
            complain("mask arity: pnu round " + std::to_string(e.round) + " has " +
                     std::to_string(e.mask.count()) + " trainable groups");
        if (e.phase == Phase::Interleave && e.mask.count() != e.mask.size())
            complain("mask arity: interleave round without all-ones mask");
    }
    // coverage and ordering within each cycle
    for (int c = 1; c <= cfg.cycles; ++c) {
        std::vector<int> seq;
        for (const auto& e : plan.entries)
            if (e.phase == Phase::Pnu && e.cycle == c)
                for (size_t g = 0; g < e.mask.size(); ++g)
                    if (e.mask.trainable(g)) seq.push_back(static_cast<int>(g));
        std::vector<int> count(cfg.m, 0);
        for (int g : seq) count[g]++;
        for (int g = 0; g < cfg.m; ++g)
            if (count[g] != cfg.rounds_per_layer)
                complain("coverage: cycle " + std::to_string(c) + " trains group #" + std::to_string(g + 1) +
                         " " + std::to_string(count[g]) + " times, expected " +
                         std::to_string(cfg.rounds_per_layer));
        // occurrences of each group must be contiguous
        for (size_t i = 1; i < seq.size(); ++i)
            if (seq[i] != seq[i - 1] && std::count(seq.begin(), seq.begin() + i, seq[i]) > 0)
                complain("contiguity: cycle " + std::to_string(c) + " revisits group #" +
                         std::to_string(seq[i] + 1));
        if (cfg.order == "sequential" && !std::is_sorted(seq.begin(), seq.end()))
            complain("sequential order: cycle " + std::to_string(c) + " trains groups out of order");
    }
    // interleave blocks sit strictly between cycles
    for (size_t i = 0; i < plan.entries.size(); ++i) {
        if (plan.entries[i].phase != Phase::Interleave) continue;
        bool prev_ok = i > 0 && (plan.entries[i - 1].phase == Phase::Pnu ||
                                 plan.entries[i - 1].phase == Phase::Interleave);
        bool next_ok = i + 1 < plan.entries.size() && (plan.entries[i + 1].phase == Phase::Pnu ||
                                                       plan.entries[i + 1].phase == Phase::Interleave);
        if (!prev_ok || !next_ok) complain("interleave placement: round " + std::to_string(i + 1));
    }
    return v;
}

inline std::vector<std::string> mask_group_names(const LayerMask& mask) {
    std::vector<std::string> names;
    for (size_t g = 0; g < mask.size(); ++g)
        if (mask.trainable(g)) names.push_back("#" + std::to_string(g + 1));
    return names;
}

inline nlohmann::json plan_to_json(const RoundPlan& plan) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : plan.entries) {
        arr.push_back({{"round", e.round},
                       {"phase", phase_name(e.phase)},
                       {"groups", mask_group_names(e.mask)},
                       {"cycle", e.cycle}});
    }
    return arr;
}

}  // namespace fedpart
