#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include <idal/idal.hpp>

using namespace idal;

namespace {

struct Dataset {
    Matrix<float> X;
    std::vector<std::uint8_t> y;
};

/// Two Gaussian clouds along feature 2, separated by `gap` sigmas.
Dataset make_clouds(std::size_t n, double gap, std::uint64_t seed, std::size_t cols = 6,
                    double positive_fraction = 0.5) {
    Dataset d;
    d.X = Matrix<float>(n, cols);
    d.y.resize(n);
    RandomStream rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = rng.next_double() < positive_fraction;
        d.y[i] = pos ? 1 : 0;
        for (std::size_t j = 0; j < cols; ++j) {
            double v = rng.next_normal();
            if (j == 2) v += pos ? gap / 2.0 : -gap / 2.0;
            d.X.row(i)[j] = static_cast<float>(v);
        }
    }
    // Both classes are needed for fit; patch the ends deterministically.
    d.y[0] = 0;
    d.y[n - 1] = 1;
    d.X.row(0)[2] = static_cast<float>(-gap);
    d.X.row(n - 1)[2] = static_cast<float>(gap);
    return d;
}

std::string serialized(const ExtraTreesClassifier& f) {
    std::ostringstream os;
    f.save(os);
    return os.str();
}

/// Re-derives every node's sample set from the training data and checks the
/// stored thresholds and leaf distributions against it.
void replay_tree(const Tree& t, const Matrix<float>& X, const std::vector<std::uint8_t>& y,
                 const std::vector<double>& ew, std::size_t node,
                 const std::vector<std::size_t>& rows) {
    REQUIRE_FALSE(rows.empty());
    const TreeNode& n = t.nodes[node];
    if (n.is_leaf()) {
        double w0 = 0, w1 = 0;
        std::size_t c0 = 0, c1 = 0;
        for (const auto r : rows) {
            if (y[r]) {
                w1 += ew[r];
                ++c1;
            } else {
                w0 += ew[r];
                ++c0;
            }
        }
        double p0, p1;
        if (w0 + w1 > 0) {
            p0 = w0 / (w0 + w1);
            p1 = w1 / (w0 + w1);
        } else {
            p0 = static_cast<double>(c0) / static_cast<double>(rows.size());
            p1 = static_cast<double>(c1) / static_cast<double>(rows.size());
        }
        REQUIRE(n.p[0] == Catch::Approx(p0).margin(1e-9));
        REQUIRE(n.p[1] == Catch::Approx(p1).margin(1e-9));
        return;
    }

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::vector<std::size_t> left, right;
    for (const auto r : rows) {
        const double v = X.row(r)[static_cast<std::size_t>(n.feature)];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        (v < n.threshold ? left : right).push_back(r);
    }
    REQUIRE(n.threshold > lo);
    REQUIRE(n.threshold < hi);
    REQUIRE_FALSE(left.empty());
    REQUIRE_FALSE(right.empty());
    replay_tree(t, X, y, ew, static_cast<std::size_t>(n.left), left);
    replay_tree(t, X, y, ew, static_cast<std::size_t>(n.right), right);
}

}  // namespace

TEST_CASE("separable data trains to perfect accuracy", "[forest]") {
    const Dataset d = make_clouds(200, 8.0, 3);
    ExtraTreesClassifier f;
    f.config.n_trees = 30;
    f.config.min_samples_leaf = 1;
    f.config.seed = 9;
    f.fit(d.X, d.y);

    REQUIRE(f.predict(d.X) == d.y);

    const auto proba = f.predict_proba(d.X);
    for (const auto& p : proba) {
        REQUIRE(p[0] + p[1] == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(p[0] >= 0.0);
        REQUIRE(p[1] >= 0.0);
    }
}

TEST_CASE("same seed reproduces the model bit for bit", "[forest]") {
    const Dataset d = make_clouds(120, 2.0, 5);
    auto fit_with_seed = [&](std::uint64_t s, int threads) {
        ExtraTreesClassifier f;
        f.config.n_trees = 20;
        f.config.seed = s;
        f.config.threads = threads;
        f.fit(d.X, d.y);
        return f;
    };
    const auto a = fit_with_seed(42, 1);
    const auto b = fit_with_seed(42, 1);
    REQUIRE(serialized(a) == serialized(b));

    const auto c = fit_with_seed(43, 1);
    REQUIRE(serialized(a) != serialized(c));
}

TEST_CASE("thread count does not change the fitted model", "[forest]") {
    const Dataset d = make_clouds(150, 2.0, 7);
    ExtraTreesClassifier f1, f4;
    f1.config.n_trees = 16;
    f1.config.seed = 11;
    f1.config.threads = 1;
    f4.config = f1.config;
    f4.config.threads = 4;
    f1.fit(d.X, d.y);
    f4.fit(d.X, d.y);
    // The serialized headers embed the thread-free config fields only.
    f4.config.threads = 1;
    REQUIRE(serialized(f1) == serialized(f4));
}

TEST_CASE("stored thresholds lie strictly inside each node's feature range", "[forest]") {
    const Dataset d = make_clouds(90, 1.5, 13);
    ExtraTreesClassifier f;
    f.config.n_trees = 12;
    f.config.min_samples_leaf = 2;
    f.config.positive_class_weight = 3.0;
    f.config.seed = 21;
    f.fit(d.X, d.y);

    std::vector<double> ew(d.X.rows);
    for (std::size_t i = 0; i < ew.size(); ++i) ew[i] = d.y[i] ? 3.0 : 1.0;
    std::vector<std::size_t> all(d.X.rows);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    for (const auto& t : f.trees) replay_tree(t, d.X, d.y, ew, 0, all);
}

TEST_CASE("max_depth caps the tree height", "[forest]") {
    const Dataset d = make_clouds(300, 0.5, 17);
    ExtraTreesClassifier f;
    f.config.n_trees = 8;
    f.config.min_samples_leaf = 1;
    f.config.max_depth = 3;
    f.config.seed = 1;
    f.fit(d.X, d.y);

    for (const auto& t : f.trees) {
        // Depth via downward walk: no leaf may sit deeper than 3 levels.
        std::vector<std::pair<std::size_t, int>> stack{{0, 0}};
        while (!stack.empty()) {
            const auto [node, depth] = stack.back();
            stack.pop_back();
            const auto& n = t.nodes[node];
            if (n.is_leaf()) {
                REQUIRE(depth <= 3);
            } else {
                stack.push_back({static_cast<std::size_t>(n.left), depth + 1});
                stack.push_back({static_cast<std::size_t>(n.right), depth + 1});
            }
        }
    }
}

TEST_CASE("scaling all sample weights by a power of two changes nothing", "[forest]") {
    const Dataset d = make_clouds(100, 1.0, 19);
    std::vector<double> w(d.X.rows), w4(d.X.rows);
    RandomStream rng(2);
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = 0.25 + rng.next_double();
        w4[i] = 4.0 * w[i];
    }
    ExtraTreesClassifier a, b;
    a.config.n_trees = 15;
    a.config.seed = 31;
    b.config = a.config;
    a.fit(d.X, d.y, w);
    b.fit(d.X, d.y, w4);

    const Dataset probe = make_clouds(64, 1.0, 23);
    REQUIRE(a.predict_proba(probe.X) == b.predict_proba(probe.X));
    REQUIRE(serialized(a) == serialized(b));
}

TEST_CASE("zero-weight duplicate rows do not alter the model", "[forest]") {
    const Dataset d = make_clouds(80, 1.0, 29);
    std::vector<double> w(d.X.rows, 1.0);

    Dataset dup = d;
    std::vector<double> wdup = w;
    for (std::size_t i = 0; i < 25; ++i) {
        const float* src = d.X.row(3 * i);
        dup.X.values.insert(dup.X.values.end(), src, src + d.X.cols);
        dup.y.push_back(d.y[3 * i]);
        wdup.push_back(0.0);
    }
    dup.X.rows += 25;

    ExtraTreesClassifier a, b;
    a.config.n_trees = 20;
    a.config.min_samples_leaf = 1;
    a.config.seed = 37;
    b.config = a.config;
    a.fit(d.X, d.y, w);
    b.fit(dup.X, dup.y, wdup);

    const Dataset probe = make_clouds(64, 1.0, 41);
    REQUIRE(a.predict_proba(probe.X) == b.predict_proba(probe.X));
}

TEST_CASE("positive class weight shifts decisions toward the positive class", "[forest]") {
    const Dataset d = make_clouds(300, 1.0, 43, 6, 0.15);
    auto count_pos = [&](double cw) {
        ExtraTreesClassifier f;
        f.config.n_trees = 30;
        f.config.positive_class_weight = cw;
        f.config.seed = 47;
        f.fit(d.X, d.y);
        const Dataset probe = make_clouds(300, 1.0, 53, 6, 0.5);
        std::size_t n = 0;
        for (const auto p : f.predict(probe.X)) n += p;
        return n;
    };
    REQUIRE(count_pos(20.0) > count_pos(1.0) + 10);
}

TEST_CASE("fit input validation", "[forest]") {
    const Dataset d = make_clouds(40, 2.0, 59);
    ExtraTreesClassifier f;
    f.config.n_trees = 4;

    SECTION("fewer than two samples") {
        Matrix<float> X(1, 3);
        REQUIRE_THROWS_AS(f.fit(X, {1}), TrainingError);
    }
    SECTION("label count mismatch") {
        REQUIRE_THROWS_AS(f.fit(d.X, std::vector<std::uint8_t>(d.X.rows - 1, 0)), TrainingError);
    }
    SECTION("single class") {
        REQUIRE_THROWS_AS(f.fit(d.X, std::vector<std::uint8_t>(d.X.rows, 1)), TrainingError);
    }
    SECTION("labels beyond binary") {
        auto y = d.y;
        y[5] = 2;
        REQUIRE_THROWS_AS(f.fit(d.X, y), TrainingError);
    }
    SECTION("NaN features") {
        auto X = d.X;
        X.row(7)[1] = std::numeric_limits<float>::quiet_NaN();
        REQUIRE_THROWS_AS(f.fit(X, d.y), TrainingError);
    }
    SECTION("negative sample weight") {
        std::vector<double> w(d.X.rows, 1.0);
        w[3] = -0.5;
        REQUIRE_THROWS_AS(f.fit(d.X, d.y, w), TrainingError);
    }
    SECTION("zero total weight") {
        std::vector<double> w(d.X.rows, 0.0);
        REQUIRE_THROWS_AS(f.fit(d.X, d.y, w), TrainingError);
    }
    SECTION("weight count mismatch") {
        REQUIRE_THROWS_AS(f.fit(d.X, d.y, std::vector<double>(3, 1.0)), TrainingError);
    }
    SECTION("bad hyperparameters") {
        f.config.n_trees = 0;
        REQUIRE_THROWS_AS(f.fit(d.X, d.y), ConfigError);
        f.config.n_trees = 4;
        f.config.k_features = static_cast<int>(d.X.cols) + 1;
        REQUIRE_THROWS_AS(f.fit(d.X, d.y), ConfigError);
    }
    SECTION("predict before fit") {
        ExtraTreesClassifier fresh;
        REQUIRE_THROWS_AS(fresh.predict_proba_one(d.X.row(0)), InvariantError);
    }
    SECTION("predict column mismatch") {
        f.fit(d.X, d.y);
        Matrix<float> wrong(4, d.X.cols + 1);
        REQUIRE_THROWS_AS(f.predict(wrong), InvariantError);
    }
}

TEST_CASE("forest serialization round trip", "[forest]") {
    const Dataset d = make_clouds(100, 2.0, 61);
    ExtraTreesClassifier f;
    f.config.n_trees = 10;
    f.config.positive_class_weight = 2.5;
    f.config.seed = 67;
    f.fit(d.X, d.y);

    std::stringstream ss;
    nlohmann::json extra;
    extra["note"] = "round trip probe";
    f.save(ss, extra);

    ExtraTreesClassifier g;
    nlohmann::json header;
    g.load(ss, &header);
    REQUIRE(header["note"] == "round trip probe");
    REQUIRE(g.config.positive_class_weight == 2.5);
    REQUIRE(g.config.seed == 67);
    REQUIRE(g.n_features == d.X.cols);

    const Dataset probe = make_clouds(40, 2.0, 71);
    REQUIRE(f.predict_proba(probe.X) == g.predict_proba(probe.X));
}

TEST_CASE("forest container rejects corruption", "[forest]") {
    const Dataset d = make_clouds(60, 2.0, 73);
    ExtraTreesClassifier f;
    f.config.n_trees = 5;
    f.fit(d.X, d.y);
    const std::string blob = serialized(f);

    SECTION("bad magic") {
        std::string bad = blob;
        bad[0] = 'X';
        std::istringstream is(bad);
        ExtraTreesClassifier g;
        REQUIRE_THROWS_AS(g.load(is), IoError);
    }
    SECTION("payload bit flip breaks the content hash") {
        std::string bad = blob;
        bad[bad.size() - 9] ^= 0x40;
        std::istringstream is(bad);
        ExtraTreesClassifier g;
        REQUIRE_THROWS_AS(g.load(is), IoError);
    }
    SECTION("truncation") {
        std::istringstream is(blob.substr(0, blob.size() / 2));
        ExtraTreesClassifier g;
        REQUIRE_THROWS_AS(g.load(is), IoError);
    }
}

TEST_CASE("dice over row vectors matches the set formula", "[forest][cv]") {
    RandomStream rng(79);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::uint8_t> a(50), b(50);
        for (std::size_t i = 0; i < 50; ++i) {
            a[i] = rng.next_double() < 0.3 ? 1 : 0;
            b[i] = rng.next_double() < 0.3 ? 1 : 0;
        }
        std::size_t na = 0, nb = 0, inter = 0;
        for (std::size_t i = 0; i < 50; ++i) {
            na += a[i];
            nb += b[i];
            inter += a[i] && b[i];
        }
        const double want = (na + nb) == 0
                                ? 1.0
                                : 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
        REQUIRE(forest_detail::dice_rows(a, b) == want);
    }
    REQUIRE(forest_detail::dice_rows({0, 0}, {0, 0}) == 1.0);
}

TEST_CASE("cv folds are contiguous within each case group", "[forest][cv]") {
    std::vector<int> groups;
    for (int i = 0; i < 10; ++i) groups.push_back(0);
    for (int i = 0; i < 7; ++i) groups.push_back(1);
    const auto folds = forest_detail::plan_folds(groups, 3);
    REQUIRE(folds.size() == 3);

    std::vector<int> seen(groups.size(), 0);
    for (const auto& fold : folds)
        for (const auto r : fold) seen[r] += 1;
    REQUIRE(std::count(seen.begin(), seen.end(), 1) == static_cast<long>(groups.size()));

    for (const auto& fold : folds) {
        // Rows of one group inside one fold form a contiguous index run.
        for (int g = 0; g < 2; ++g) {
            std::vector<std::size_t> rows;
            for (const auto r : fold)
                if (groups[r] == g) rows.push_back(r);
            std::sort(rows.begin(), rows.end());
            for (std::size_t i = 1; i < rows.size(); ++i) REQUIRE(rows[i] == rows[i - 1] + 1);
        }
    }
}

TEST_CASE("hyperparameter ties resolve to smaller weight and larger leaf", "[forest][cv]") {
    // Wide-margin data: every grid entry scores a perfect fold dice, so the
    // documented tie rules decide.
    const Dataset d = make_clouds(120, 10.0, 83);
    std::vector<int> groups(d.X.rows, 0);
    std::vector<double> w(d.X.rows, 1.0);

    CvConfig cv;
    cv.class_weight_grid = {1.0, 2.0};
    cv.min_samples_leaf_grid = {1, 2};
    cv.n_folds = 3;
    cv.base.n_trees = 10;
    cv.base.seed = 89;

    const CvChoice choice = cv_select_hparams(d.X, d.y, w, groups, cv);
    REQUIRE(choice.weight_stage_dice == 1.0);
    REQUIRE(choice.leaf_stage_dice == 1.0);
    REQUIRE(choice.positive_class_weight == 1.0);
    REQUIRE(choice.min_samples_leaf == 2);
}

TEST_CASE("single-class folds are skipped; all-skipped folds fail", "[forest][cv]") {
    // 30 rows, the first 10 are the only positives: fold 0's complement is
    // single-class, the other folds still train.
    Matrix<float> X(30, 2);
    std::vector<std::uint8_t> y(30, 0);
    RandomStream rng(97);
    for (std::size_t i = 0; i < 30; ++i) {
        y[i] = i < 10 ? 1 : 0;
        X.row(i)[0] = static_cast<float>(rng.next_double() + (i < 10 ? 2.0 : 0.0));
        X.row(i)[1] = static_cast<float>(rng.next_double());
    }
    std::vector<double> w(30, 1.0);
    std::vector<int> groups(30, 0);

    CvConfig cv;
    cv.class_weight_grid = {1.0};
    cv.min_samples_leaf_grid = {1};
    cv.base.n_trees = 5;
    const CvChoice choice = cv_select_hparams(X, y, w, groups, cv);
    REQUIRE(choice.leaf_stage_dice >= 0.0);
    REQUIRE(choice.leaf_stage_dice <= 1.0);

    const auto folds = forest_detail::plan_folds(groups, 3);
    ForestConfig fc;
    fc.n_trees = 5;
    // All-degenerate folds: the stage score is the -1 sentinel, and the
    // selection entry point turns it into an error.
    REQUIRE(forest_detail::mean_fold_dice(X, std::vector<std::uint8_t>(30, 0), w, folds, fc) ==
            -1.0);
    REQUIRE_THROWS_AS(
        cv_select_hparams(X, std::vector<std::uint8_t>(30, 0), w, groups, cv),
        TrainingError);
}
