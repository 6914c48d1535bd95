#pragma once

// Shared test helpers: synthetic case construction and scratch directories.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include <idal/idal.hpp>

namespace testutil {

/// Unique scratch directory, removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("idal_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline idal::SynthConfig small_synth_config(int n_cases, int n_clusters, int dim = 32,
                                            std::uint64_t seed = 1) {
    idal::SynthConfig cfg;
    cfg.n_cases = n_cases;
    cfg.n_clusters = n_clusters;
    cfg.dims = {dim, dim, dim};
    // Small volumes cannot pack many default-size lesions; keep them sparse
    // so rejection sampling always succeeds.
    cfg.lesion_count_range = {1, 2};
    cfg.lesion_radius_range = {2.0, 3.5};
    cfg.seed = seed;
    return cfg;
}

/// In-memory synthetic cases (round-robin clusters), no disk I/O.
inline std::vector<idal::MultiModalCase> make_cases(const idal::SynthConfig& cfg) {
    idal::validate_synth_config(cfg);
    const auto sigs = idal::synth_detail::resolve_signatures(cfg);
    std::vector<idal::MultiModalCase> cases(static_cast<std::size_t>(cfg.n_cases));
    for (int i = 0; i < cfg.n_cases; ++i) {
        auto& c = cases[static_cast<std::size_t>(i)];
        c.case_id = "case_" + std::to_string(i);
        idal::generate_case(cfg, i, i % cfg.n_clusters, sigs, c);
    }
    return cases;
}

/// Pipeline config small enough for unit tests.
inline idal::PipelineConfig small_pipeline_config(std::uint64_t seed = 5) {
    idal::PipelineConfig cfg;
    cfg.seed = seed;
    cfg.threads = 0;
    cfg.vc.n_trees = 15;
    cfg.cv.class_weight_grid = {1.0, 5.0};
    cfg.cv.min_samples_leaf_grid = {5, 25};
    cfg.naf.n_trees = 40;
    return cfg;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

}  // namespace testutil
