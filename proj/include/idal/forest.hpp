#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "idal/core.hpp"

namespace idal {

// Binary extremely randomized trees: no bootstrapping, k random candidate
// features per node with one uniform threshold each, weighted Gini scoring.
// Class 1 is the positive (lesion) class. Every node draws from its own
// random stream keyed by (tree seed, node path), so candidate draws at one
// node never shift the draws at another; training is bit-reproducible
// regardless of thread count, and zero-weight duplicate samples leave
// predictions unchanged.

struct ForestConfig {
    int n_trees = 50;
    int k_features = 0;  // candidates per node; 0 = ceil(sqrt(D))
    int min_samples_leaf = 10;
    int max_depth = 0;  // 0 = unlimited
    double positive_class_weight = 1.0;
    std::uint64_t seed = 0;
    int threads = 1;
};

struct TreeNode {
    std::int32_t feature = -1;  // -1 marks a leaf
    std::int32_t left = -1;
    std::int32_t right = -1;
    double threshold = 0.0;
    std::array<double, 2> p{0.0, 0.0};  // leaves only: class distribution

    bool is_leaf() const { return feature < 0; }
};

struct Tree {
    std::vector<TreeNode> nodes;

    const std::array<double, 2>& predict_proba(const float* row) const {
        std::size_t i = 0;
        while (!nodes[i].is_leaf())
            i = static_cast<std::size_t>(static_cast<double>(row[nodes[i].feature]) < nodes[i].threshold
                                             ? nodes[i].left
                                             : nodes[i].right);
        return nodes[i].p;
    }
};

namespace forest_detail {

struct NodeTask {
    std::size_t node;
    std::size_t begin, end;   // range into the per-tree index buffer
    std::uint64_t path;       // heap-style path id: root 1, children 2p and 2p+1
    int depth;
};

// Uniform threshold strictly inside (lo, hi); float inputs leave double
// headroom so the nudge never collapses the interval.
inline double draw_threshold(RandomStream& rng, double lo, double hi) {
    double thr = lo + rng.next_double() * (hi - lo);
    if (thr <= lo) thr = std::nextafter(lo, hi);
    if (thr >= hi) thr = std::nextafter(hi, lo);
    return thr;
}

inline double gini(double w0, double w1) {
    const double w = w0 + w1;
    if (w <= 0.0) return 0.0;
    const double p0 = w0 / w, p1 = w1 / w;
    return 1.0 - p0 * p0 - p1 * p1;
}

inline Tree build_tree(const Matrix<float>& X, const std::vector<std::uint8_t>& y,
                       const std::vector<double>& ew, const ForestConfig& cfg,
                       std::size_t k_features, std::uint64_t tree_seed) {
    const std::size_t n = X.rows, d = X.cols;
    Tree tree;
    tree.nodes.reserve(64);

    std::vector<std::int32_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::int32_t>(i);
    std::vector<std::int32_t> pool(d);

    tree.nodes.emplace_back();
    std::vector<NodeTask> stack;
    stack.push_back({0, 0, n, 1, 0});

    while (!stack.empty()) {
        const NodeTask t = stack.back();
        stack.pop_back();
        const std::size_t count = t.end - t.begin;

        double w0 = 0.0, w1 = 0.0;
        std::size_t n1 = 0;
        for (std::size_t i = t.begin; i < t.end; ++i) {
            const std::size_t s = static_cast<std::size_t>(idx[i]);
            if (y[s]) {
                w1 += ew[s];
                ++n1;
            } else {
                w0 += ew[s];
            }
        }
        auto make_leaf = [&] {
            TreeNode& leaf = tree.nodes[t.node];
            const double w = w0 + w1;
            if (w > 0.0) {
                leaf.p = {w0 / w, w1 / w};
            } else {  // weightless node: fall back to raw counts
                const auto c = static_cast<double>(count);
                leaf.p = {static_cast<double>(count - n1) / c, static_cast<double>(n1) / c};
            }
        };

        const bool pure = n1 == 0 || n1 == count;
        const bool too_small = count < 2 * static_cast<std::size_t>(cfg.min_samples_leaf);
        const bool too_deep = cfg.max_depth > 0 && t.depth >= cfg.max_depth;
        if (pure || too_small || too_deep) {
            make_leaf();
            continue;
        }

        // Candidate features: partial Fisher-Yates, skipping constant
        // features without consuming a slot; the threshold draw follows each
        // accepted feature.
        RandomStream rng(derive_seed(tree_seed, t.path));
        for (std::size_t f = 0; f < d; ++f) pool[f] = static_cast<std::int32_t>(f);
        std::size_t pool_size = d, accepted = 0;
        std::int32_t best_feature = -1;
        double best_threshold = 0.0, best_score = std::numeric_limits<double>::infinity();

        while (accepted < k_features && pool_size > 0) {
            const std::size_t j = rng.next_below(pool_size);
            const std::int32_t f = pool[j];
            pool[j] = pool[--pool_size];

            float lo = std::numeric_limits<float>::infinity();
            float hi = -std::numeric_limits<float>::infinity();
            for (std::size_t i = t.begin; i < t.end; ++i) {
                const float v = X.at(static_cast<std::size_t>(idx[i]), static_cast<std::size_t>(f));
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (!(lo < hi)) continue;  // constant in this node
            ++accepted;

            const double thr = draw_threshold(rng, static_cast<double>(lo), static_cast<double>(hi));
            double l0 = 0.0, l1 = 0.0;
            for (std::size_t i = t.begin; i < t.end; ++i) {
                const std::size_t s = static_cast<std::size_t>(idx[i]);
                if (static_cast<double>(X.at(s, static_cast<std::size_t>(f))) < thr) {
                    if (y[s])
                        l1 += ew[s];
                    else
                        l0 += ew[s];
                }
            }
            const double r0 = w0 - l0, r1 = w1 - l1;
            const double w = w0 + w1;
            const double score =
                w > 0.0 ? ((l0 + l1) * gini(l0, l1) + (r0 + r1) * gini(r0, r1)) / w : 0.0;
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

        const auto mid_it = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(t.begin),
                                           idx.begin() + static_cast<std::ptrdiff_t>(t.end),
                                           [&](std::int32_t s) {
                                               return static_cast<double>(X.at(
                                                          static_cast<std::size_t>(s),
                                                          static_cast<std::size_t>(best_feature))) <
                                                      best_threshold;
                                           });
        const std::size_t mid = static_cast<std::size_t>(mid_it - idx.begin());

        TreeNode& node = tree.nodes[t.node];
        node.feature = best_feature;
        node.threshold = best_threshold;
        node.left = static_cast<std::int32_t>(tree.nodes.size());
        node.right = node.left + 1;
        const std::size_t left = static_cast<std::size_t>(node.left);
        const std::size_t right = static_cast<std::size_t>(node.right);
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        stack.push_back({right, mid, t.end, 2 * t.path + 1, t.depth + 1});
        stack.push_back({left, t.begin, mid, 2 * t.path, t.depth + 1});
    }
    return tree;
}

template <class T>
void wr(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T rd(std::istream& in, const char* what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError(msg("truncated model stream reading ", what));
    return v;
}

}  // namespace forest_detail

class ExtraTreesClassifier {
public:
    ForestConfig config;
    std::size_t n_features = 0;
    std::vector<Tree> trees;

    bool trained() const { return !trees.empty(); }

    void fit(const Matrix<float>& X, const std::vector<std::uint8_t>& y,
             const std::vector<double>& sample_weight = {}) {
        if (X.rows < 2 || X.cols == 0) throw TrainingError("forest fit: need at least 2 samples");
        if (y.size() != X.rows) throw TrainingError("forest fit: label count mismatch");
        if (!sample_weight.empty() && sample_weight.size() != X.rows)
            throw TrainingError("forest fit: sample weight count mismatch");
        if (config.n_trees <= 0 || config.min_samples_leaf <= 0)
            throw ConfigError("forest fit: n_trees and min_samples_leaf must be positive");
        if (config.k_features < 0 || static_cast<std::size_t>(config.k_features) > X.cols)
            throw ConfigError(msg("forest fit: k_features must lie in [0, ", X.cols, "]"));
        for (const auto v : X.values)
            if (std::isnan(v)) throw TrainingError("forest fit: NaN in feature matrix");

        bool has0 = false, has1 = false;
        std::vector<double> ew(X.rows);
        double total = 0.0;
        for (std::size_t i = 0; i < X.rows; ++i) {
            if (y[i] > 1) throw TrainingError("forest fit: labels must be 0 or 1");
            (y[i] ? has1 : has0) = true;
            const double sw = sample_weight.empty() ? 1.0 : sample_weight[i];
            if (sw < 0.0) throw TrainingError("forest fit: negative sample weight");
            ew[i] = sw * (y[i] ? config.positive_class_weight : 1.0);
            total += ew[i];
        }
        if (!has0 || !has1) throw TrainingError("forest fit: single-class input");
        if (total <= 0.0) throw TrainingError("forest fit: zero total sample weight");

        const std::size_t k = config.k_features > 0
                                  ? static_cast<std::size_t>(config.k_features)
                                  : static_cast<std::size_t>(
                                        std::ceil(std::sqrt(static_cast<double>(X.cols))));
        n_features = X.cols;
        trees.assign(static_cast<std::size_t>(config.n_trees), Tree{});
        parallel_for(trees.size(), config.threads, [&](std::size_t t) {
            trees[t] = forest_detail::build_tree(X, y, ew, config, k, derive_seed(config.seed, t));
        });
    }

    std::array<double, 2> predict_proba_one(const float* row) const {
        if (trees.empty()) throw InvariantError("forest predict: not trained");
        double s0 = 0.0, s1 = 0.0;
        for (const auto& t : trees) {
            const auto& p = t.predict_proba(row);
            s0 += p[0];
            s1 += p[1];
        }
        const auto n = static_cast<double>(trees.size());
        return {s0 / n, s1 / n};
    }

    /// Q x 2 class distribution, rows summing to 1 up to rounding.
    std::vector<std::array<double, 2>> predict_proba(const Matrix<float>& X, int threads = 1) const {
        if (X.cols != n_features)
            throw InvariantError(msg("forest predict: expected ", n_features, " features, got ", X.cols));
        std::vector<std::array<double, 2>> p(X.rows);
        parallel_for(X.rows, threads, [&](std::size_t i) { p[i] = predict_proba_one(X.row(i)); });
        return p;
    }

    std::vector<double> predict_proba_positive(const Matrix<float>& X, int threads = 1) const {
        if (X.cols != n_features)
            throw InvariantError(msg("forest predict: expected ", n_features, " features, got ", X.cols));
        std::vector<double> p(X.rows);
        parallel_for(X.rows, threads, [&](std::size_t i) { p[i] = predict_proba_one(X.row(i))[1]; });
        return p;
    }

    /// Positive probability 0.5 maps to the positive class.
    std::vector<std::uint8_t> predict(const Matrix<float>& X, int threads = 1) const {
        const auto p = predict_proba_positive(X, threads);
        std::vector<std::uint8_t> out(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] >= 0.5 ? 1 : 0;
        return out;
    }

    // Container layout: 8-byte magic, u64 JSON header length, JSON header
    // (format version, config, shape, payload content hash), node payload.
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
                wr<double>(payload, n.p[0]);
                wr<double>(payload, n.p[1]);
            }
        }
        const std::string bytes = payload.str();

        nlohmann::json header = extra;
        header["format_version"] = 1;
        header["n_trees"] = config.n_trees;
        header["k_features"] = config.k_features;
        header["min_samples_leaf"] = config.min_samples_leaf;
        header["max_depth"] = config.max_depth;
        header["positive_class_weight"] = config.positive_class_weight;
        header["seed"] = config.seed;
        header["n_features"] = n_features;
        header["tree_count"] = trees.size();
        header["payload_bytes"] = bytes.size();
        header["content_hash"] = hash_hex(fnv1a(bytes.data(), bytes.size()));
        const std::string hs = header.dump();

        out.write("IDALETC1", 8);
        wr<std::uint64_t>(out, hs.size());
        out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("forest save: stream write failed");
    }

    /// Loads a container; the JSON header comes back through `header_out`.
    void load(std::istream& in, nlohmann::json* header_out = nullptr) {
        using forest_detail::rd;
        char magic[8];
        in.read(magic, 8);
        if (!in || std::string(magic, 8) != "IDALETC1") throw IoError("forest load: bad magic");
        const auto header_len = rd<std::uint64_t>(in, "header length");
        std::string hs(header_len, '\0');
        in.read(hs.data(), static_cast<std::streamsize>(header_len));
        if (!in) throw IoError("forest load: truncated header");
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(hs);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(msg("forest load: bad JSON header (", e.what(), ")"));
        }
        if (header.value("format_version", -1) != 1)
            throw IoError("forest load: unsupported format version");
        config.n_trees = header.value("n_trees", 0);
        config.k_features = header.value("k_features", 0);
        config.min_samples_leaf = header.value("min_samples_leaf", 0);
        config.max_depth = header.value("max_depth", 0);
        config.positive_class_weight = header.value("positive_class_weight", 1.0);
        config.seed = header.value("seed", std::uint64_t{0});
        n_features = header.value("n_features", std::size_t{0});

        const auto payload_bytes = header.value("payload_bytes", std::size_t{0});
        std::string bytes(payload_bytes, '\0');
        in.read(bytes.data(), static_cast<std::streamsize>(payload_bytes));
        if (!in) throw IoError("forest load: truncated payload");
        if (header.value("content_hash", "") != hash_hex(fnv1a(bytes.data(), bytes.size())))
            throw IoError("forest load: content hash mismatch");

        std::istringstream ps(bytes);
        trees.assign(header.value("tree_count", std::size_t{0}), Tree{});
        for (auto& t : trees) {
            const auto n_nodes = rd<std::uint64_t>(ps, "node count");
            if (n_nodes == 0) throw IoError("forest load: empty tree");
            t.nodes.resize(n_nodes);
            for (auto& n : t.nodes) {
                n.feature = rd<std::int32_t>(ps, "feature");
                n.left = rd<std::int32_t>(ps, "left");
                n.right = rd<std::int32_t>(ps, "right");
                n.threshold = rd<double>(ps, "threshold");
                n.p[0] = rd<double>(ps, "p0");
                n.p[1] = rd<double>(ps, "p1");
                const auto limit = static_cast<std::int64_t>(n_nodes);
                if (!n.is_leaf() && (n.left <= 0 || n.right <= 0 || n.left >= limit || n.right >= limit))
                    throw IoError("forest load: child index out of range");
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

// Hyperparameter selection: two sequential one-dimensional grid searches
// scored by mean held-out Dice over cross-validation folds. Folds are
// spatially contiguous row blocks within each training case (rows arrive in
// scan order), so a fold never mixes neighboring-slab voxels of one case into
// both sides of the split.

struct CvConfig {
    std::vector<double> class_weight_grid{1.0, 2.0, 5.0, 10.0, 20.0};
    std::vector<int> min_samples_leaf_grid{1, 5, 10, 25, 50};
    int n_folds = 3;
    ForestConfig base;
};

struct CvChoice {
    double positive_class_weight = 1.0;
    int min_samples_leaf = 10;
    double weight_stage_dice = 0.0;
    double leaf_stage_dice = 0.0;
};

namespace forest_detail {

inline double dice_rows(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        a += pred[i] != 0;
        b += truth[i] != 0;
        inter += pred[i] != 0 && truth[i] != 0;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

/// Fold f takes the f-th contiguous chunk of every group's row block.
inline std::vector<std::vector<std::size_t>> plan_folds(const std::vector<int>& row_groups,
                                                        int n_folds) {
    std::vector<int> order;
    std::vector<std::vector<std::size_t>> group_rows;
    for (std::size_t r = 0; r < row_groups.size(); ++r) {
        const auto it = std::find(order.begin(), order.end(), row_groups[r]);
        if (it == order.end()) {
            order.push_back(row_groups[r]);
            group_rows.emplace_back();
            group_rows.back().push_back(r);
        } else {
            group_rows[static_cast<std::size_t>(it - order.begin())].push_back(r);
        }
    }
    std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(n_folds));
    for (const auto& rows : group_rows)
        for (std::size_t f = 0; f < folds.size(); ++f) {
            const std::size_t begin = rows.size() * f / folds.size();
            const std::size_t end = rows.size() * (f + 1) / folds.size();
            folds[f].insert(folds[f].end(), rows.begin() + static_cast<std::ptrdiff_t>(begin),
                            rows.begin() + static_cast<std::ptrdiff_t>(end));
        }
    return folds;
}

inline double mean_fold_dice(const Matrix<float>& X, const std::vector<std::uint8_t>& y,
                             const std::vector<double>& sw,
                             const std::vector<std::vector<std::size_t>>& folds,
                             const ForestConfig& cfg) {
    double sum = 0.0;
    int used = 0;
    std::vector<char> in_test(X.rows);
    for (const auto& test : folds) {
        if (test.empty()) continue;
        std::fill(in_test.begin(), in_test.end(), 0);
        for (const auto r : test) in_test[r] = 1;

        Matrix<float> Xtr;
        Xtr.cols = X.cols;
        std::vector<std::uint8_t> ytr;
        std::vector<double> wtr;
        for (std::size_t r = 0; r < X.rows; ++r) {
            if (in_test[r]) continue;
            Xtr.values.insert(Xtr.values.end(), X.row(r), X.row(r) + X.cols);
            ytr.push_back(y[r]);
            if (!sw.empty()) wtr.push_back(sw[r]);
        }
        Xtr.rows = ytr.size();
        const bool single_class =
            std::all_of(ytr.begin(), ytr.end(), [](std::uint8_t v) { return v == 0; }) ||
            std::all_of(ytr.begin(), ytr.end(), [](std::uint8_t v) { return v == 1; });
        if (ytr.size() < 2 || single_class) continue;  // degenerate fold skipped

        ExtraTreesClassifier forest;
        forest.config = cfg;
        forest.fit(Xtr, ytr, wtr);

        Matrix<float> Xte;
        Xte.cols = X.cols;
        std::vector<std::uint8_t> yte;
        for (const auto r : test) {
            Xte.values.insert(Xte.values.end(), X.row(r), X.row(r) + X.cols);
            yte.push_back(y[r]);
        }
        Xte.rows = yte.size();
        sum += dice_rows(forest.predict(Xte, cfg.threads), yte);
        ++used;
    }
    if (used == 0) return -1.0;  // every fold was degenerate
    return sum / used;
}

}  // namespace forest_detail

inline CvChoice cv_select_hparams(const Matrix<float>& X, const std::vector<std::uint8_t>& y,
                                  const std::vector<double>& sample_weight,
                                  const std::vector<int>& row_groups, const CvConfig& cv) {
    if (row_groups.size() != X.rows) throw TrainingError("cv: row_groups size mismatch");
    if (cv.class_weight_grid.empty() || cv.min_samples_leaf_grid.empty() || cv.n_folds < 2)
        throw ConfigError("cv: empty grid or fewer than 2 folds");
    const auto folds = forest_detail::plan_folds(row_groups, cv.n_folds);

    CvChoice choice;
    choice.positive_class_weight = 0.0;
    double best = -1.0;
    for (const double cw : cv.class_weight_grid) {  // ascending grid: ties keep the smaller weight
        ForestConfig cfg = cv.base;
        cfg.positive_class_weight = cw;
        const double score = forest_detail::mean_fold_dice(X, y, sample_weight, folds, cfg);
        if (score > best) {
            best = score;
            choice.positive_class_weight = cw;
        }
    }
    if (best < 0.0) throw TrainingError("cv: every fold had single-class training data");
    choice.weight_stage_dice = best;

    best = -1.0;
    for (const int leaf : cv.min_samples_leaf_grid) {  // ascending grid: ties keep the larger leaf
        ForestConfig cfg = cv.base;
        cfg.positive_class_weight = choice.positive_class_weight;
        cfg.min_samples_leaf = leaf;
        const double score = forest_detail::mean_fold_dice(X, y, sample_weight, folds, cfg);
        if (score >= best) {
            best = score;
            choice.min_samples_leaf = leaf;
        }
    }
    choice.leaf_stage_dice = best;
    return choice;
}

}  // namespace idal
