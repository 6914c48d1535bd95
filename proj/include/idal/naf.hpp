#pragma once

#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "idal/core.hpp"
#include "idal/forest.hpp"

namespace idal {

// Neighbourhood Approximating Forest: trees over per-case descriptor vectors
// grown to minimize within-leaf pairwise distance, queried by leaf
// co-occurrence voting. Distances come from segmentation similarity via
// to_distance; the input matrix may be asymmetric and is symmetrized only
// inside the split criterion.

struct NafConfig {
    int n_trees = 100;
    int n_tests = 30;           // random (feature, threshold) candidates per node
    int min_samples_leaf = 2;
    int max_depth = 12;
    std::uint64_t seed = 0;
    int threads = 1;
};

inline double to_distance(double similarity) {
    if (similarity < 0.0 || similarity > 1.0)
        throw InvariantError(msg("to_distance: similarity ", similarity, " outside [0,1]"));
    return 1000.0 - 1000.0 * similarity;
}

struct NafNode {
    std::int32_t feature = -1;  // -1 marks a leaf
    std::int32_t left = -1;
    std::int32_t right = -1;
    double threshold = 0.0;
    std::vector<std::int32_t> ids;  // leaves only: training row ids
};

struct NafTree {
    std::vector<NafNode> nodes;

    const std::vector<std::int32_t>& reach_leaf(const double* query) const {
        std::size_t i = 0;
        while (nodes[i].feature >= 0)
            i = static_cast<std::size_t>(query[nodes[i].feature] < nodes[i].threshold
                                             ? nodes[i].left
                                             : nodes[i].right);
        return nodes[i].ids;
    }
};

struct Neighbor {
    std::int32_t id = -1;
    std::int64_t votes = 0;
};

namespace naf_detail {

struct NodeTask {
    std::size_t node;
    std::size_t begin, end;
    int depth;
};

/// Mean symmetrized distance over unordered pairs; singletons score 0.
inline double mean_pair_distance(const Matrix<double>& dbar, const std::vector<std::int32_t>& idx,
                                 std::size_t begin, std::size_t end) {
    const std::size_t n = end - begin;
    if (n < 2) return 0.0;
    double sum = 0.0;
    for (std::size_t i = begin; i < end; ++i)
        for (std::size_t j = i + 1; j < end; ++j)
            sum += dbar.at(static_cast<std::size_t>(idx[i]), static_cast<std::size_t>(idx[j]));
    return sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

inline NafTree build_naf_tree(const Matrix<double>& X, const Matrix<double>& dbar,
                              const NafConfig& cfg, std::uint64_t tree_seed) {
    const std::size_t m = X.rows, d = X.cols;
    RandomStream rng(tree_seed);
    NafTree tree;

    std::vector<std::int32_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = static_cast<std::int32_t>(i);

    tree.nodes.emplace_back();
    std::vector<NodeTask> stack;
    stack.push_back({0, 0, m, 0});

    while (!stack.empty()) {
        const NodeTask t = stack.back();
        stack.pop_back();
        const std::size_t count = t.end - t.begin;
        auto make_leaf = [&] {
            tree.nodes[t.node].ids.assign(idx.begin() + static_cast<std::ptrdiff_t>(t.begin),
                                          idx.begin() + static_cast<std::ptrdiff_t>(t.end));
            std::sort(tree.nodes[t.node].ids.begin(), tree.nodes[t.node].ids.end());
        };

        if (count < 2 * static_cast<std::size_t>(cfg.min_samples_leaf) || t.depth >= cfg.max_depth) {
            make_leaf();
            continue;
        }

        std::int32_t best_feature = -1;
        double best_threshold = 0.0, best_score = std::numeric_limits<double>::infinity();
        std::vector<std::int32_t> side_buf(count);
        for (int test = 0; test < cfg.n_tests; ++test) {
            const auto f = static_cast<std::int32_t>(rng.next_below(d));
            double lo = std::numeric_limits<double>::infinity();
            double hi = -std::numeric_limits<double>::infinity();
            for (std::size_t i = t.begin; i < t.end; ++i) {
                const double v = X.at(static_cast<std::size_t>(idx[i]), static_cast<std::size_t>(f));
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (!(lo < hi)) continue;  // constant feature, candidate discarded
            const double thr = forest_detail::draw_threshold(rng, lo, hi);

            std::size_t n_left = 0, n_right = 0;
            for (std::size_t i = t.begin; i < t.end; ++i) {
                const auto row = static_cast<std::size_t>(idx[i]);
                if (X.at(row, static_cast<std::size_t>(f)) < thr)
                    side_buf[n_left++] = idx[i];
                else
                    side_buf[count - ++n_right] = idx[i];
            }
            if (n_left < static_cast<std::size_t>(cfg.min_samples_leaf) ||
                n_right < static_cast<std::size_t>(cfg.min_samples_leaf))
                continue;  // undersized child, candidate discarded

            const double score =
                (static_cast<double>(n_left) / static_cast<double>(count)) *
                    mean_pair_distance(dbar, side_buf, 0, n_left) +
                (static_cast<double>(n_right) / static_cast<double>(count)) *
                    mean_pair_distance(dbar, side_buf, count - n_right, count);
            if (score < best_score) {
                best_score = score;
                best_feature = f;
                best_threshold = thr;
            }
        }

        if (best_feature < 0) {
            make_leaf();
            continue;
        }

        const auto mid_it = std::partition(
            idx.begin() + static_cast<std::ptrdiff_t>(t.begin),
            idx.begin() + static_cast<std::ptrdiff_t>(t.end), [&](std::int32_t s) {
                return X.at(static_cast<std::size_t>(s), static_cast<std::size_t>(best_feature)) <
                       best_threshold;
            });
        const std::size_t mid = static_cast<std::size_t>(mid_it - idx.begin());

        NafNode& node = tree.nodes[t.node];
        node.feature = best_feature;
        node.threshold = best_threshold;
        node.left = static_cast<std::int32_t>(tree.nodes.size());
        node.right = node.left + 1;
        const std::size_t left = static_cast<std::size_t>(node.left);
        const std::size_t right = static_cast<std::size_t>(node.right);
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        stack.push_back({right, mid, t.end, t.depth + 1});
        stack.push_back({left, t.begin, mid, t.depth + 1});
    }
    return tree;
}

}  // namespace naf_detail

class NafModel {
public:
    NafConfig config;
    std::size_t n_rows = 0;
    std::size_t n_features = 0;
    std::vector<NafTree> trees;

    bool trained() const { return !trees.empty(); }

    void fit(const Matrix<double>& features, const Matrix<double>& distances, const NafConfig& cfg) {
        if (cfg.n_trees < 1 || cfg.n_tests < 1 || cfg.min_samples_leaf < 1 || cfg.max_depth < 1)
            throw ConfigError("naf fit: all config counts must be >= 1");
        const std::size_t m = features.rows;
        if (m < static_cast<std::size_t>(cfg.min_samples_leaf))
            throw TrainingError(msg("naf fit: ", m, " rows cannot fill a leaf of ", cfg.min_samples_leaf));
        if (distances.rows != m || distances.cols != m)
            throw TrainingError("naf fit: distance matrix shape mismatch");

        Matrix<double> dbar;
        dbar.rows = dbar.cols = m;
        dbar.values.resize(m * m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                const double d = 0.5 * (distances.at(i, j) + distances.at(j, i));
                if (!(d >= 0.0)) throw TrainingError(msg("naf fit: negative or NaN distance at (", i, ",", j, ")"));
                if (i == j && d != 0.0)
                    throw TrainingError(msg("naf fit: nonzero self-distance at row ", i));
                dbar.at(i, j) = d;
            }

        config = cfg;
        n_rows = m;
        n_features = features.cols;
        trees.assign(static_cast<std::size_t>(cfg.n_trees), NafTree{});
        parallel_for(trees.size(), cfg.threads, [&](std::size_t t) {
            trees[t] = naf_detail::build_naf_tree(features, dbar, cfg, derive_seed(cfg.seed, t));
        });
    }

    /// Ranked by descending vote count, ties by ascending row id; top k.
    std::vector<Neighbor> retrieve_neighbors(const double* query, std::size_t k) const {
        if (!trained()) throw InvariantError("naf retrieve: model not trained");
        if (k > n_rows) throw InvariantError(msg("naf retrieve: k=", k, " exceeds ", n_rows, " training rows"));
        std::vector<Neighbor> tally(n_rows);
        for (std::size_t i = 0; i < n_rows; ++i) tally[i].id = static_cast<std::int32_t>(i);
        for (const auto& t : trees)
            for (const auto id : t.reach_leaf(query)) ++tally[static_cast<std::size_t>(id)].votes;
        std::sort(tally.begin(), tally.end(), [](const Neighbor& a, const Neighbor& b) {
            return a.votes != b.votes ? a.votes > b.votes : a.id < b.id;
        });
        tally.resize(k);
        return tally;
    }

    std::vector<Neighbor> retrieve_neighbors(const std::vector<double>& query, std::size_t k) const {
        if (query.size() != n_features)
            throw InvariantError(msg("naf retrieve: query has ", query.size(), " features, expected ", n_features));
        return retrieve_neighbors(query.data(), k);
    }

    void save(std::ostream& out, const nlohmann::json& extra = nlohmann::json::object()) const {
        using forest_detail::wr;
        std::ostringstream payload;
        for (const auto& t : trees) {
            wr<std::uint64_t>(payload, t.nodes.size());
            for (const auto& n : t.nodes) {
                wr<std::int32_t>(payload, n.feature);
                wr<std::int32_t>(payload, n.left);
                wr<std::int32_t>(payload, n.right);
                wr<double>(payload, n.threshold);
                wr<std::uint64_t>(payload, n.ids.size());
                for (const auto id : n.ids) wr<std::int32_t>(payload, id);
            }
        }
        const std::string bytes = payload.str();

        nlohmann::json header = extra;
        header["format_version"] = 1;
        header["n_trees"] = config.n_trees;
        header["n_tests"] = config.n_tests;
        header["min_samples_leaf"] = config.min_samples_leaf;
        header["max_depth"] = config.max_depth;
        header["seed"] = config.seed;
        header["n_rows"] = n_rows;
        header["n_features"] = n_features;
        header["tree_count"] = trees.size();
        header["payload_bytes"] = bytes.size();
        header["content_hash"] = hash_hex(fnv1a(bytes.data(), bytes.size()));
        const std::string hs = header.dump();

        out.write("IDALNAF1", 8);
        wr<std::uint64_t>(out, hs.size());
        out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("naf save: stream write failed");
    }

    void load(std::istream& in, nlohmann::json* header_out = nullptr) {
        using forest_detail::rd;
        char magic[8];
        in.read(magic, 8);
        if (!in || std::string(magic, 8) != "IDALNAF1") throw IoError("naf load: bad magic");
        const auto header_len = rd<std::uint64_t>(in, "header length");
        std::string hs(header_len, '\0');
        in.read(hs.data(), static_cast<std::streamsize>(header_len));
        if (!in) throw IoError("naf load: truncated header");
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(hs);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(msg("naf load: bad JSON header (", e.what(), ")"));
        }
        if (header.value("format_version", -1) != 1)
            throw IoError("naf load: unsupported format version");
        config.n_trees = header.value("n_trees", 0);
        config.n_tests = header.value("n_tests", 0);
        config.min_samples_leaf = header.value("min_samples_leaf", 0);
        config.max_depth = header.value("max_depth", 0);
        config.seed = header.value("seed", std::uint64_t{0});
        n_rows = header.value("n_rows", std::size_t{0});
        n_features = header.value("n_features", std::size_t{0});

        const auto payload_bytes = header.value("payload_bytes", std::size_t{0});
        std::string bytes(payload_bytes, '\0');
        in.read(bytes.data(), static_cast<std::streamsize>(payload_bytes));
        if (!in) throw IoError("naf load: truncated payload");
        if (header.value("content_hash", "") != hash_hex(fnv1a(bytes.data(), bytes.size())))
            throw IoError("naf load: content hash mismatch");

        std::istringstream ps(bytes);
        trees.assign(header.value("tree_count", std::size_t{0}), NafTree{});
        for (auto& t : trees) {
            const auto n_nodes = rd<std::uint64_t>(ps, "node count");
            if (n_nodes == 0) throw IoError("naf load: empty tree");
            t.nodes.resize(n_nodes);
            for (auto& n : t.nodes) {
                n.feature = rd<std::int32_t>(ps, "feature");
                n.left = rd<std::int32_t>(ps, "left");
                n.right = rd<std::int32_t>(ps, "right");
                n.threshold = rd<double>(ps, "threshold");
                const auto n_ids = rd<std::uint64_t>(ps, "leaf id count");
                n.ids.resize(n_ids);
                for (auto& id : n.ids) id = rd<std::int32_t>(ps, "leaf id");
            }
        }
        if (header_out != nullptr) *header_out = header;
    }

    void save_file(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError(msg("cannot open for writing: ", path));
        save(out);
    }

    void load_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError(msg("cannot open: ", path));
        load(in);
    }
};

}  // namespace idal
