#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedpart/tensor.hpp"

namespace fedpart {

// Ordered collection of named parameter slots. Slot order is construction
// order (input-to-output depth order for the model builders).
struct ParamSet {
    std::vector<Tensor> slots;
    std::vector<std::string> names;

    int add(const std::string& name, Tensor t) {
        names.push_back(name);
        slots.push_back(std::move(t));
        return static_cast<int>(slots.size()) - 1;
    }

    size_t size() const { return slots.size(); }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& t : slots) n += t.numel();
        return n;
    }

    bool same_structure(const ParamSet& o) const {
        if (slots.size() != o.slots.size()) return false;
        for (size_t i = 0; i < slots.size(); ++i)
            if (slots[i].shape != o.slots[i].shape) return false;
        return true;
    }

    // Gradient container with the same structure, all zeros.
    ParamSet zeros_like() const {
        ParamSet g;
        g.names = names;
        g.slots.reserve(slots.size());
        for (const auto& t : slots) g.slots.emplace_back(t.shape);
        return g;
    }
};

inline bool bit_identical(const ParamSet& a, const ParamSet& b) {
    if (a.slots.size() != b.slots.size()) return false;
    for (size_t i = 0; i < a.slots.size(); ++i)
        if (!bit_identical(a.slots[i], b.slots[i])) return false;
    return true;
}

// One named layer group of the partition, e.g. "#3" = conv weight + BN
// weight + BN bias of the third conv stage.
struct LayerGroup {
    std::string name;
    std::vector<int> slot_ids;
};

// Ordered, disjoint cover of every trainable parameter slot; group order is
// input-to-output depth order.
struct LayerPartition {
    std::vector<LayerGroup> groups;

    size_t size() const { return groups.size(); }

    void validate_covers(const ParamSet& params) const {
        std::vector<int> seen(params.size(), 0);
        for (const auto& g : groups) {
            if (g.slot_ids.empty()) throw ConfigError("partition group '" + g.name + "' is empty");
            for (int s : g.slot_ids) {
                if (s < 0 || s >= static_cast<int>(params.size()))
                    throw ConfigError("partition group '" + g.name + "' references unknown slot");
                if (seen[s]++) throw ConfigError("slot " + params.names[s] + " appears in two groups");
            }
        }
        for (size_t i = 0; i < seen.size(); ++i)
            if (!seen[i]) throw ConfigError("slot " + params.names[i] + " not covered by any group");
    }

    int index_of(const std::string& name) const {
        for (size_t i = 0; i < groups.size(); ++i)
            if (groups[i].name == name) return static_cast<int>(i);
        return -1;
    }
};

// Per-group binary trainability mask.
struct LayerMask {
    std::vector<uint8_t> bits;  // one per partition group, 1 = trainable

    static LayerMask all_ones(size_t m) {
        LayerMask s;
        s.bits.assign(m, 1);
        return s;
    }
    static LayerMask all_zeros(size_t m) {
        LayerMask s;
        s.bits.assign(m, 0);
        return s;
    }
    static LayerMask one_hot(size_t m, size_t idx) {
        LayerMask s;
        s.bits.assign(m, 0);
        s.bits.at(idx) = 1;
        return s;
    }

    size_t size() const { return bits.size(); }
    bool trainable(size_t g) const { return bits.at(g) != 0; }

    size_t count() const {
        size_t c = 0;
        for (auto b : bits) c += b;
        return c;
    }

    bool operator==(const LayerMask& o) const { return bits == o.bits; }
};

// Per-group parameter counts plus the total.
struct GroupCounts {
    std::vector<int64_t> per_group;
    int64_t total = 0;
};

inline GroupCounts group_param_counts(const LayerPartition& partition, const ParamSet& params) {
    partition.validate_covers(params);
    GroupCounts gc;
    gc.per_group.reserve(partition.size());
    for (const auto& g : partition.groups) {
        int64_t n = 0;
        for (int s : g.slot_ids) n += params.slots[s].numel();
        gc.per_group.push_back(n);
        gc.total += n;
    }
    return gc;
}

}  // namespace fedpart
