#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fedpart/common.hpp"
#include "fedpart/tensor.hpp"

namespace fedpart {

struct Dataset {
    Tensor features;          // [n, ...feature dims]
    std::vector<int> labels;  // class indices in [0, K)
    int classes = 0;

    int64_t size() const { return features.shape.empty() ? 0 : features.shape[0]; }

    std::vector<int64_t> feature_shape() const {
        return {features.shape.begin() + 1, features.shape.end()};
    }

    void validate() const {
        if (size() < 1) throw ConfigError("dataset must contain at least one sample");
        if (classes < 1) throw ConfigError("dataset class count must be positive");
        if (static_cast<int64_t>(labels.size()) != size()) throw ConfigError("label count mismatch");
        for (int y : labels)
            if (y < 0 || y >= classes) throw ConfigError("label out of range [0," + std::to_string(classes) + ")");
    }

    Batch batch_of(const std::vector<int64_t>& idx) const {
        int64_t stride = features.numel() / std::max<int64_t>(size(), 1);
        Batch b;
        std::vector<int64_t> shape = features.shape;
        shape[0] = static_cast<int64_t>(idx.size());
        b.features = Tensor(shape);
        b.labels.reserve(idx.size());
        for (size_t r = 0; r < idx.size(); ++r) {
            std::copy_n(features.data.begin() + idx[r] * stride, stride, b.features.data.begin() + r * stride);
            b.labels.push_back(labels[idx[r]]);
        }
        return b;
    }

    Batch full_batch() const {
        Batch b;
        b.features = features;
        b.labels = labels;
        return b;
    }
};

// Per-client index lists into a dataset. Lists are disjoint and every client
// holds at least one sample.
struct ShardAssignment {
    std::vector<std::vector<int64_t>> shards;

    int clients() const { return static_cast<int>(shards.size()); }

    void validate(int64_t n) const {
        std::vector<int> seen(n, 0);
        for (const auto& s : shards) {
            if (s.empty()) throw ConfigError("empty client shard");
            for (int64_t i : s) {
                if (i < 0 || i >= n) throw ConfigError("shard index out of range");
                if (seen[i]++) throw ConfigError("duplicate index across shards");
            }
        }
    }
};

struct SyntheticParams {
    int64_t n = 300;
    int classes = 3;
    int64_t dim = 2;        // blobs feature dim
    double separation = 8;  // blob center spacing in units of sigma
    double sigma = 1.0;
    bool balanced = true;
    double noise = 0.1;                         // spirals
    std::vector<int64_t> image_shape = {1, 8, 8};  // micro-images [C,H,W]
};

namespace detail {

inline std::vector<int> make_labels(int64_t n, int k, bool balanced, Rng& rng) {
    std::vector<int> labels(n);
    if (balanced) {
        if (n % k != 0) throw ConfigError("balanced generation requires class count to divide n");
        for (int64_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % k);
    } else {
        for (int64_t i = 0; i < n; ++i) labels[i] = static_cast<int>(rng.below(k));
    }
    return labels;
}

}  // namespace detail

// Gaussian clusters with centers on a scaled simplex-ish layout: center c_k
// has coordinate pattern derived from the class index, spaced `separation`
// sigmas apart.
inline Dataset generate_blobs(const SyntheticParams& p, uint64_t seed) {
    if (p.n < 1 || p.classes < 2 || p.dim < 1) throw ConfigError("blobs: bad parameters");
    Rng rng(derive_seed(seed, "blobs"));
    std::vector<std::vector<double>> centers(p.classes, std::vector<double>(p.dim));
    for (int k = 0; k < p.classes; ++k) {
        Rng crng(derive_seed(seed, "blob-center", k));
        for (int64_t d = 0; d < p.dim; ++d) centers[k][d] = crng.normal() ;
        double norm = 0;
        for (double v : centers[k]) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : centers[k]) v = v / std::max(norm, 1e-9) * p.separation * p.sigma * 0.5;
        // spread centers apart: offset each along its own axis index
        centers[k][k % p.dim] += (k + 1) * p.separation * p.sigma;
    }
    Dataset ds;
    ds.classes = p.classes;
    ds.labels = detail::make_labels(p.n, p.classes, p.balanced, rng);
    ds.features = Tensor({p.n, p.dim});
    for (int64_t i = 0; i < p.n; ++i)
        for (int64_t d = 0; d < p.dim; ++d)
            ds.features.data[i * p.dim + d] = centers[ds.labels[i]][d] + rng.normal(0.0, p.sigma);
    return ds;
}

// Classic K-arm spiral in the plane.
inline Dataset generate_spirals(const SyntheticParams& p, uint64_t seed) {
    if (p.n < 1 || p.classes < 2) throw ConfigError("spirals: bad parameters");
    Rng rng(derive_seed(seed, "spirals"));
    Dataset ds;
    ds.classes = p.classes;
    ds.labels = detail::make_labels(p.n, p.classes, p.balanced, rng);
    ds.features = Tensor({p.n, 2});
    constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
    for (int64_t i = 0; i < p.n; ++i) {
        int k = ds.labels[i];
        double t = rng.uniform();  // position along the arm
        double r = 0.2 + 2.0 * t;
        double a = kTwoPi * (t * 1.5 + static_cast<double>(k) / p.classes);
        ds.features.data[i * 2 + 0] = r * std::cos(a) + rng.normal(0.0, p.noise);
        ds.features.data[i * 2 + 1] = r * std::sin(a) + rng.normal(0.0, p.noise);
    }
    return ds;
}

// Tiny images in [0,1]: each class is an oriented sinusoidal grating plus
// pixel noise, one pattern per class across all channels.
inline Dataset generate_micro_images(const SyntheticParams& p, uint64_t seed) {
    if (p.n < 1 || p.classes < 2 || p.image_shape.size() != 3) throw ConfigError("micro-images: bad parameters");
    Rng rng(derive_seed(seed, "micro-images"));
    int64_t c = p.image_shape[0], h = p.image_shape[1], w = p.image_shape[2];
    Dataset ds;
    ds.classes = p.classes;
    ds.labels = detail::make_labels(p.n, p.classes, p.balanced, rng);
    ds.features = Tensor({p.n, c, h, w});
    constexpr double kPi = 3.14159265358979323846;
    for (int64_t i = 0; i < p.n; ++i) {
        int k = ds.labels[i];
        double angle = kPi * k / p.classes;
        double freq = 2.0 * kPi * (1.0 + (k % 3)) / static_cast<double>(h);
        double phase = rng.uniform(0.0, 2.0 * kPi);
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    double proj = std::cos(angle) * x + std::sin(angle) * y;
                    double v = 0.5 + 0.5 * std::sin(freq * proj + phase + 0.7 * ch);
                    v += rng.normal(0.0, p.noise);
                    ds.features.data[((i * c + ch) * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
                }
    }
    return ds;
}

inline Dataset generate_synthetic(const std::string& kind, const SyntheticParams& p, uint64_t seed) {
    if (kind == "blobs") return generate_blobs(p, seed);
    if (kind == "spirals") return generate_spirals(p, seed);
    if (kind == "micro-images") return generate_micro_images(p, seed);
    throw ConfigError("unknown synthetic dataset kind '" + kind + "'");
}

// Global shuffle, then contiguous split; shard sizes differ by at most one.
inline ShardAssignment partition_iid(const Dataset& ds, int n_clients, uint64_t seed) {
    int64_t n = ds.size();
    if (n_clients < 1 || n_clients > n)
        throw ConfigError("partition_iid: need 1 <= clients <= samples");
    std::vector<int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, "iid-shuffle"));
    rng.shuffle(idx);
    ShardAssignment sa;
    sa.shards.resize(n_clients);
    int64_t base = n / n_clients, extra = n % n_clients;
    int64_t pos = 0;
    for (int cidx = 0; cidx < n_clients; ++cidx) {
        int64_t take = base + (cidx < extra ? 1 : 0);
        sa.shards[cidx].assign(idx.begin() + pos, idx.begin() + pos + take);
        pos += take;
    }
    sa.validate(n);
    return sa;
}

// Per-class Dirichlet(alpha) proportions over clients; empty clients are
// repaired by moving one sample at a time from the currently largest client.
inline ShardAssignment partition_dirichlet(const Dataset& ds, int n_clients, double alpha, uint64_t seed) {
    if (alpha <= 0) throw ConfigError("partition_dirichlet: alpha must be positive");
    int64_t n = ds.size();
    if (n_clients < 1 || n_clients > n) throw ConfigError("partition_dirichlet: need 1 <= clients <= samples");
    Rng rng(derive_seed(seed, "dirichlet"));
    std::vector<std::vector<int64_t>> by_class(ds.classes);
    for (int64_t i = 0; i < n; ++i) by_class[ds.labels[i]].push_back(i);
    ShardAssignment sa;
    sa.shards.resize(n_clients);
    for (int k = 0; k < ds.classes; ++k) {
        auto& cls = by_class[k];
        if (cls.empty()) continue;
        rng.shuffle(cls);
        // Dirichlet draw via normalized gammas
        std::vector<double> prop(n_clients);
        double total = 0;
        for (int cidx = 0; cidx < n_clients; ++cidx) {
            prop[cidx] = rng.gamma(alpha);
            total += prop[cidx];
        }
        for (double& v : prop) v /= total;
        // largest-remainder allocation of this class's samples
        int64_t nk = static_cast<int64_t>(cls.size());
        std::vector<int64_t> counts(n_clients);
        std::vector<std::pair<double, int>> frac(n_clients);
        int64_t assigned = 0;
        for (int cidx = 0; cidx < n_clients; ++cidx) {
            double exact = prop[cidx] * nk;
            counts[cidx] = static_cast<int64_t>(exact);
            assigned += counts[cidx];
            frac[cidx] = {exact - counts[cidx], cidx};
        }
        std::stable_sort(frac.begin(), frac.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (int64_t r = 0; r < nk - assigned; ++r) counts[frac[r % n_clients].second] += 1;
        int64_t pos = 0;
        for (int cidx = 0; cidx < n_clients; ++cidx) {
            sa.shards[cidx].insert(sa.shards[cidx].end(), cls.begin() + pos, cls.begin() + pos + counts[cidx]);
            pos += counts[cidx];
        }
    }
    // empty-client repair
    for (int cidx = 0; cidx < n_clients; ++cidx) {
        while (sa.shards[cidx].empty()) {
            int big = 0;
            for (int j = 1; j < n_clients; ++j)
                if (sa.shards[j].size() > sa.shards[big].size()) big = j;
            if (sa.shards[big].size() <= 1) throw ConfigError("cannot repair empty shard: too few samples");
            sa.shards[cidx].push_back(sa.shards[big].back());
            sa.shards[big].pop_back();
        }
    }
    sa.validate(n);
    return sa;
}

// Deterministic split: the first `per_class` occurrences of every class form
// the test set, the rest is the remainder.
inline std::pair<Dataset, Dataset> balanced_test_split(const Dataset& ds, int64_t per_class) {
    if (per_class < 1) throw ConfigError("balanced_test_split: per_class must be positive");
    std::vector<int64_t> counts(ds.classes, 0);
    std::vector<int64_t> test_idx, rest_idx;
    for (int64_t i = 0; i < ds.size(); ++i) {
        if (counts[ds.labels[i]] < per_class) {
            test_idx.push_back(i);
            counts[ds.labels[i]]++;
        } else {
            rest_idx.push_back(i);
        }
    }
    for (int k = 0; k < ds.classes; ++k)
        if (counts[k] < per_class)
            throw ConfigError("class " + std::to_string(k) + " has fewer than " + std::to_string(per_class) +
                              " samples");
    auto subset = [&](const std::vector<int64_t>& idx) {
        Dataset out;
        out.classes = ds.classes;
        Batch b = ds.batch_of(idx);
        out.features = std::move(b.features);
        out.labels = std::move(b.labels);
        return out;
    };
    return {subset(test_idx), subset(rest_idx)};
}

// ---- FPDS binary format ------------------------------------------------------
//
// Little-endian: magic "FPDS", version u32=1, n u64, K u32, feature-rank u32,
// dims u32 x rank, n*prod(dims) float32 features, n u16 labels.

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("truncated dataset file");
    return v;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write("FPDS", 4);
    detail::write_le<uint32_t>(os, 1);
    detail::write_le<uint64_t>(os, static_cast<uint64_t>(ds.size()));
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(ds.classes));
    auto fs = ds.feature_shape();
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(fs.size()));
    for (int64_t d : fs) detail::write_le<uint32_t>(os, static_cast<uint32_t>(d));
    for (double v : ds.features.data) detail::write_le<float>(os, static_cast<float>(v));
    for (int y : ds.labels) detail::write_le<uint16_t>(os, static_cast<uint16_t>(y));
    if (!os) throw IoError("write failed for '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FPDS", 4) != 0) throw IoError("bad magic in '" + path + "'");
    uint32_t version = detail::read_le<uint32_t>(is);
    if (version != 1) throw IoError("unsupported dataset format version " + std::to_string(version));
    uint64_t n = detail::read_le<uint64_t>(is);
    uint32_t k = detail::read_le<uint32_t>(is);
    uint32_t rank = detail::read_le<uint32_t>(is);
    if (n == 0) throw IoError("dataset file contains no samples");
    if (k == 0) throw IoError("dataset file declares zero classes");
    if (rank == 0 || rank > 8) throw IoError("implausible feature rank");
    std::vector<int64_t> shape = {static_cast<int64_t>(n)};
    int64_t per = 1;
    for (uint32_t r = 0; r < rank; ++r) {
        uint32_t d = detail::read_le<uint32_t>(is);
        if (d == 0) throw IoError("zero feature dimension");
        shape.push_back(d);
        per *= d;
    }
    Dataset ds;
    ds.classes = static_cast<int>(k);
    ds.features = Tensor(shape);
    for (int64_t i = 0; i < static_cast<int64_t>(n) * per; ++i)
        ds.features.data[i] = static_cast<double>(detail::read_le<float>(is));
    ds.labels.resize(n);
    for (uint64_t i = 0; i < n; ++i) {
        uint16_t y = detail::read_le<uint16_t>(is);
        if (y >= k) throw IoError("label " + std::to_string(y) + " out of range in '" + path + "'");
        ds.labels[i] = y;
    }
    return ds;
}

// CSV with header f0,...,fk,label; one sample per row, flat features.
inline Dataset dataset_from_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw IoError("empty csv file");
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.empty() || header.back() != "label") throw IoError("no label column (last header must be 'label')");
    int64_t dim = static_cast<int64_t>(header.size()) - 1;
    if (dim < 1) throw IoError("csv has no feature columns");
    std::vector<double> feats;
    std::vector<int> labels;
    int max_label = -1;
    int64_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) {
            try {
                size_t pos;
                row.push_back(std::stod(cell, &pos));
                if (pos != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw IoError("line " + std::to_string(lineno) + ": non-numeric cell '" + cell + "'");
            }
        }
        if (static_cast<int64_t>(row.size()) != dim + 1)
            throw IoError("line " + std::to_string(lineno) + ": expected " + std::to_string(dim + 1) +
                          " cells, got " + std::to_string(row.size()));
        double lv = row.back();
        int y = static_cast<int>(lv);
        if (lv != y || y < 0) throw IoError("line " + std::to_string(lineno) + ": label must be a non-negative integer");
        labels.push_back(y);
        max_label = std::max(max_label, y);
        feats.insert(feats.end(), row.begin(), row.end() - 1);
    }
    if (labels.empty()) throw IoError("csv contains no data rows");
    Dataset ds;
    ds.classes = max_label + 1;
    if (ds.classes < 2) ds.classes = 2;
    ds.features = Tensor({static_cast<int64_t>(labels.size()), dim}, std::move(feats));
    ds.labels = std::move(labels);
    ds.validate();
    return ds;
}

}  // namespace fedpart
