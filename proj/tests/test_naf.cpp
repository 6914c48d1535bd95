#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <sstream>

#include <idal/idal.hpp>

using namespace idal;

namespace {

/// Two well-separated clusters of case descriptors; within-cluster distance
/// is small, across-cluster distance large.
struct TwoClusterFixture {
    Matrix<double> X;
    Matrix<double> D;
    std::size_t half;

    explicit TwoClusterFixture(std::size_t per_cluster, std::uint64_t seed, std::size_t dims = 5)
        : X(2 * per_cluster, dims), D(2 * per_cluster, 2 * per_cluster), half(per_cluster) {
        RandomStream rng(seed);
        const std::size_t m = 2 * per_cluster;
        for (std::size_t i = 0; i < m; ++i) {
            const double center = i < per_cluster ? -3.0 : 3.0;
            for (std::size_t j = 0; j < dims; ++j)
                X.at(i, j) = center + 0.3 * rng.next_normal();
        }
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                if (i == j)
                    D.at(i, j) = 0.0;
                else
                    D.at(i, j) = (i < per_cluster) == (j < per_cluster) ? 50.0 : 900.0;
            }
    }
};

NafConfig small_cfg(std::uint64_t seed) {
    NafConfig cfg;
    cfg.n_trees = 60;
    cfg.n_tests = 20;
    cfg.min_samples_leaf = 2;
    cfg.max_depth = 8;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("similarity-to-distance endpoints are exact", "[naf]") {
    REQUIRE(to_distance(1.0) == 0.0);
    REQUIRE(to_distance(0.0) == 1000.0);
    REQUIRE(to_distance(0.25) == 750.0);
    REQUIRE(to_distance(0.5) == 500.0);
    REQUIRE_THROWS_AS(to_distance(-0.01), InvariantError);
    REQUIRE_THROWS_AS(to_distance(1.01), InvariantError);
}

TEST_CASE("retrieval finds same-cluster neighbors", "[naf]") {
    int good_trials = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        TwoClusterFixture fix(6, 100 + seed);
        NafModel naf;
        naf.fit(fix.X, fix.D, small_cfg(seed));

        // A fresh query near the first cluster's center.
        std::vector<double> q(fix.X.cols, -3.0);
        const auto nn = naf.retrieve_neighbors(q, 3);
        bool all_same_cluster = true;
        for (const auto& n : nn)
            all_same_cluster = all_same_cluster && static_cast<std::size_t>(n.id) < fix.half;
        good_trials += all_same_cluster;
    }
    REQUIRE(good_trials >= 45);  // >= 90% of seeded trials
}

TEST_CASE("votes are conserved across the forest", "[naf]") {
    TwoClusterFixture fix(5, 7);
    NafModel naf;
    const auto cfg = small_cfg(7);
    naf.fit(fix.X, fix.D, cfg);

    std::vector<double> q(fix.X.cols);
    RandomStream rng(11);
    for (auto& v : q) v = rng.next_double() * 8.0 - 4.0;

    const auto all = naf.retrieve_neighbors(q, naf.n_rows);
    std::int64_t total = 0;
    for (const auto& n : all) total += n.votes;

    // Each tree contributes exactly the size of the leaf the query lands in.
    std::int64_t expected = 0;
    for (const auto& t : naf.trees) expected += static_cast<std::int64_t>(t.reach_leaf(q.data()).size());
    REQUIRE(total == expected);
    REQUIRE(naf.trees.size() == static_cast<std::size_t>(cfg.n_trees));
}

TEST_CASE("neighbor ordering is by votes, then ascending id", "[naf]") {
    TwoClusterFixture fix(6, 13);
    NafModel naf;
    naf.fit(fix.X, fix.D, small_cfg(13));
    std::vector<double> q(fix.X.cols, -3.0);
    const auto all = naf.retrieve_neighbors(q, naf.n_rows);
    for (std::size_t i = 1; i < all.size(); ++i) {
        const bool ordered = all[i - 1].votes > all[i].votes ||
                             (all[i - 1].votes == all[i].votes && all[i - 1].id < all[i].id);
        REQUIRE(ordered);
    }
}

TEST_CASE("leaf ids are stored sorted and only on leaves", "[naf]") {
    TwoClusterFixture fix(8, 17);
    NafModel naf;
    naf.fit(fix.X, fix.D, small_cfg(17));
    for (const auto& t : naf.trees)
        for (const auto& n : t.nodes) {
            if (n.feature >= 0) {
                REQUIRE(n.ids.empty());
                REQUIRE(n.left > 0);
                REQUIRE(n.right > 0);
            } else {
                REQUIRE_FALSE(n.ids.empty());
                REQUIRE(std::is_sorted(n.ids.begin(), n.ids.end()));
                REQUIRE(n.ids.size() >= 1);
            }
        }
}

TEST_CASE("asymmetric distances are symmetrized before training", "[naf]") {
    TwoClusterFixture fix(5, 19);
    // Skew the off-diagonal entries so that (D + D^T)/2 restores the original.
    Matrix<double> skew = fix.D;
    for (std::size_t i = 0; i < skew.rows; ++i)
        for (std::size_t j = i + 1; j < skew.cols; ++j) {
            skew.at(i, j) = fix.D.at(i, j) + 25.0;
            skew.at(j, i) = fix.D.at(j, i) - 25.0;
        }

    NafModel a, b;
    a.fit(fix.X, fix.D, small_cfg(19));
    b.fit(fix.X, skew, small_cfg(19));

    std::vector<double> q(fix.X.cols, 3.0);
    const auto na = a.retrieve_neighbors(q, 4);
    const auto nb = b.retrieve_neighbors(q, 4);
    for (std::size_t i = 0; i < na.size(); ++i) {
        REQUIRE(na[i].id == nb[i].id);
        REQUIRE(na[i].votes == nb[i].votes);
    }
}

TEST_CASE("same seed gives identical retrieval, different seed may not", "[naf]") {
    TwoClusterFixture fix(6, 23);
    NafModel a, b;
    a.fit(fix.X, fix.D, small_cfg(5));
    b.fit(fix.X, fix.D, small_cfg(5));

    std::vector<double> q(fix.X.cols, 0.5);
    const auto na = a.retrieve_neighbors(q, fix.X.rows);
    const auto nb = b.retrieve_neighbors(q, fix.X.rows);
    for (std::size_t i = 0; i < na.size(); ++i) {
        REQUIRE(na[i].id == nb[i].id);
        REQUIRE(na[i].votes == nb[i].votes);
    }
}

TEST_CASE("naf fit validation", "[naf]") {
    TwoClusterFixture fix(5, 29);
    NafModel naf;

    SECTION("config counts must be positive") {
        auto cfg = small_cfg(1);
        cfg.n_trees = 0;
        REQUIRE_THROWS_AS(naf.fit(fix.X, fix.D, cfg), ConfigError);
        cfg = small_cfg(1);
        cfg.max_depth = 0;
        REQUIRE_THROWS_AS(naf.fit(fix.X, fix.D, cfg), ConfigError);
    }
    SECTION("too few rows for a leaf") {
        Matrix<double> X(1, 3);
        Matrix<double> D(1, 1);
        auto cfg = small_cfg(1);
        cfg.min_samples_leaf = 2;
        REQUIRE_THROWS_AS(naf.fit(X, D, cfg), TrainingError);
    }
    SECTION("distance shape mismatch") {
        Matrix<double> D(fix.X.rows, fix.X.rows - 1);
        REQUIRE_THROWS_AS(naf.fit(fix.X, D, small_cfg(1)), TrainingError);
    }
    SECTION("negative symmetrized distance") {
        auto D = fix.D;
        D.at(0, 1) = -2000.0;
        D.at(1, 0) = 50.0;  // symmetrized mean is negative
        REQUIRE_THROWS_AS(naf.fit(fix.X, D, small_cfg(1)), TrainingError);
    }
    SECTION("NaN distance") {
        auto D = fix.D;
        D.at(2, 3) = std::numeric_limits<double>::quiet_NaN();
        REQUIRE_THROWS_AS(naf.fit(fix.X, D, small_cfg(1)), TrainingError);
    }
    SECTION("nonzero self-distance") {
        auto D = fix.D;
        D.at(4, 4) = 1.0;
        REQUIRE_THROWS_AS(naf.fit(fix.X, D, small_cfg(1)), TrainingError);
    }
    SECTION("retrieval guards") {
        REQUIRE_THROWS_AS(naf.retrieve_neighbors(std::vector<double>(5, 0.0), 1), InvariantError);
        naf.fit(fix.X, fix.D, small_cfg(1));
        REQUIRE_THROWS_AS(naf.retrieve_neighbors(std::vector<double>(5, 0.0), fix.X.rows + 1),
                          InvariantError);
        REQUIRE_THROWS_AS(naf.retrieve_neighbors(std::vector<double>(4, 0.0), 1), InvariantError);
    }
}

TEST_CASE("naf serialization round trip and corruption", "[naf]") {
    TwoClusterFixture fix(6, 31);
    NafModel naf;
    naf.fit(fix.X, fix.D, small_cfg(31));

    std::stringstream ss;
    naf.save(ss);
    NafModel back;
    back.load(ss);
    REQUIRE(back.n_rows == naf.n_rows);
    REQUIRE(back.n_features == naf.n_features);
    REQUIRE(back.config.n_trees == naf.config.n_trees);

    std::vector<double> q(fix.X.cols, -2.5);
    const auto na = naf.retrieve_neighbors(q, 4);
    const auto nb = back.retrieve_neighbors(q, 4);
    for (std::size_t i = 0; i < na.size(); ++i) {
        REQUIRE(na[i].id == nb[i].id);
        REQUIRE(na[i].votes == nb[i].votes);
    }

    SECTION("corrupt payload") {
        std::ostringstream os;
        naf.save(os);
        std::string blob = os.str();
        blob[blob.size() - 5] ^= 0x11;
        std::istringstream is(blob);
        NafModel bad;
        REQUIRE_THROWS_AS(bad.load(is), IoError);
    }
    SECTION("bad magic") {
        std::istringstream is("NOTANAF0rest");
        NafModel bad;
        REQUIRE_THROWS_AS(bad.load(is), IoError);
    }
}
