#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <thread>
#include <vector>

#include <idal/core.hpp>

using namespace idal;

TEST_CASE("derive_seed separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s = 0; s < 4; ++s)
        for (std::uint64_t t = 0; t < 64; ++t) seen.insert(derive_seed(s, t));
    CHECK(seen.size() == 4 * 64);
}

TEST_CASE("RandomStream is deterministic and in range") {
    RandomStream a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        const double x = a.next_double();
        CHECK(x == b.next_double());
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
    RandomStream c(7);
    for (int i = 0; i < 1000; ++i) CHECK(c.next_below(13) < 13);
}

TEST_CASE("next_below covers all residues") {
    RandomStream rng(3);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 500; ++i) seen.insert(rng.next_below(7));
    CHECK(seen.size() == 7);
}

TEST_CASE("Box-Muller normals have sane moments") {
    RandomStream rng(11);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.next_normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("parallel_for covers every index once and propagates exceptions") {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
    for (const int h : hits) CHECK(h == 1);

    CHECK_THROWS_AS(parallel_for(std::size_t{10}, 3,
                                 [&](std::size_t i) {
                                     if (i == 7) throw TrainingError("boom");
                                 }),
                    TrainingError);
}

TEST_CASE("Matrix row access is row-major") {
    Matrix<float> m(3, 2);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 2; ++c) m.at(r, c) = static_cast<float>(10 * r + c);
    CHECK(m.row(1)[0] == 10.0f);
    CHECK(m.row(1)[1] == 11.0f);
    CHECK(m.row(2)[1] == 21.0f);
}

TEST_CASE("fnv1a matches reference vectors") {
    // Published FNV-1a 64-bit test vectors.
    CHECK(fnv1a("", 0) == 0xcbf29ce484222325ULL);
    const char* a = "a";
    CHECK(fnv1a(a, 1) == 0xaf63dc4c8601ec8cULL);
}
