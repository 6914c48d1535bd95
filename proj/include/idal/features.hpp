#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idal/case.hpp"
#include "idal/filters.hpp"

namespace idal {

// Per-voxel appearance features and per-case first-order statistics.
//
// Voxel feature layout, 82 columns:
//   [0..3]   normalized intensities: t1, t2, dwi, flair
//   [4..9]   pairwise differences, later modality minus earlier:
//            t2-t1, dwi-t1, flair-t1, dwi-t2, flair-t2, flair-dwi
//   [10..81] per modality (t1,t2,dwi,flair) x sigma (1,3,5 mm), 6 columns:
//            Gaussian, DoG (G_sigma - G_2sigma), second derivative along
//            x/y/z of the smoothed image, largest-magnitude Hessian eigenvalue
//            of the smoothed image

constexpr std::size_t kVoxelFeatureCount = 82;
constexpr std::size_t kCaseFeatureCount = 64;
constexpr int kFeatureLayoutVersion = 1;
constexpr std::array<double, 3> kFeatureSigmasMm{1.0, 3.0, 5.0};

struct VoxelFeatureMatrix {
    Matrix<float> values;                       // n_voxels x 82
    std::vector<std::int64_t> voxel_index_map;  // row -> linear voxel index, scan order
};

using CaseFeatureVector = std::array<double, kCaseFeatureCount>;

inline const std::array<std::string, 4>& modality_names() {
    static const std::array<std::string, 4> names{"t1", "t2", "dwi", "flair"};
    return names;
}

inline std::vector<std::string> feature_names() {
    const auto& mod = modality_names();
    std::vector<std::string> names(mod.begin(), mod.end());
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = a + 1; b < 4; ++b) names.push_back(mod[b] + "-" + mod[a]);
    for (const auto& m : mod)
        for (const double s : kFeatureSigmasMm) {
            const std::string base = msg(m, "_g", s, "mm_");
            for (const char* f : {"gauss", "dog", "d2x", "d2y", "d2z", "hess_eig"})
                names.push_back(base + f);
        }
    return names;
}

inline std::vector<std::int64_t> brain_voxel_indices(const MaskVolume& brain) {
    std::vector<std::int64_t> map;
    map.reserve(count_nonzero(brain));
    for (std::size_t i = 0; i < brain.data.size(); ++i)
        if (brain.data[i]) map.push_back(static_cast<std::int64_t>(i));
    return map;
}

inline VoxelFeatureMatrix voxel_features(const MultiModalCase& c, int threads = 1) {
    if (!c.normalization)
        throw InvariantError(msg(c.case_id, ": voxel_features needs a normalized case"));
    VoxelFeatureMatrix fm;
    fm.voxel_index_map = brain_voxel_indices(c.brain_mask);
    const std::size_t n = fm.voxel_index_map.size();
    if (n == 0) throw InvariantError(msg(c.case_id, ": empty brain mask"));
    fm.values.rows = n;
    fm.values.cols = kVoxelFeatureCount;
    fm.values.values.resize(n * kVoxelFeatureCount);

    const std::array<const Volume*, 4> mods{&c.t1, &c.t2, &c.dwi, &c.flair};
    for (std::size_t r = 0; r < n; ++r) {
        const auto v = static_cast<std::size_t>(fm.voxel_index_map[r]);
        float* row = fm.values.row(r);
        for (std::size_t m = 0; m < 4; ++m) row[m] = mods[m]->data[v];
        std::size_t col = 4;
        for (std::size_t a = 0; a < 4; ++a)
            for (std::size_t b = a + 1; b < 4; ++b) row[col++] = mods[b]->data[v] - mods[a]->data[v];
    }

    // One independent job per (modality, sigma) pair, each owning 6 columns.
    parallel_for(4 * kFeatureSigmasMm.size(), threads, [&](std::size_t job) {
        const std::size_t m = job / kFeatureSigmasMm.size();
        const std::size_t si = job % kFeatureSigmasMm.size();
        const double sigma = kFeatureSigmasMm[si];
        const std::size_t base = 10 + (m * kFeatureSigmasMm.size() + si) * 6;

        const Volume smoothed = gaussian_smooth(*mods[m], sigma);
        const Volume wider = gaussian_smooth(*mods[m], 2.0 * sigma);
        const Volume d2x = second_derivative(smoothed, 0);
        const Volume d2y = second_derivative(smoothed, 1);
        const Volume d2z = second_derivative(smoothed, 2);
        const Volume eig = hessian_largest_eig(smoothed);

        for (std::size_t r = 0; r < n; ++r) {
            const auto v = static_cast<std::size_t>(fm.voxel_index_map[r]);
            float* row = fm.values.row(r);
            row[base + 0] = smoothed.data[v];
            row[base + 1] = smoothed.data[v] - wider.data[v];
            row[base + 2] = d2x.data[v];
            row[base + 3] = d2y.data[v];
            row[base + 4] = d2z.data[v];
            row[base + 5] = eig.data[v];
        }
    });
    return fm;
}

namespace feature_detail {

/// 16 first-order statistics of one sample, in the documented order.
inline std::array<double, 16> first_order_stats(std::vector<double>& x) {
    if (x.empty()) throw InvariantError("first_order_stats: empty sample");
    std::sort(x.begin(), x.end());
    const auto n = static_cast<double>(x.size());
    const double min = x.front(), max = x.back();
    const double range = max - min;

    double sum = 0.0, energy = 0.0;
    for (const double v : x) {
        sum += v;
        energy += v * v;
    }
    const double mean = sum / n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0, mad = 0.0;
    for (const double v : x) {
        const double d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        mad += std::abs(d);
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    mad /= n;
    const double median = x.size() % 2 ? x[x.size() / 2]
                                       : 0.5 * (x[x.size() / 2 - 1] + x[x.size() / 2]);
    const double skew = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
    const double kurt = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;

    double uniformity = 1.0, entropy = 0.0;
    if (max > min) {
        std::array<double, 64> hist{};
        const double width = (max - min) / 64.0;
        for (const double v : x) {
            auto b = static_cast<std::size_t>((v - min) / width);
            if (b > 63) b = 63;
            hist[b] += 1.0;
        }
        uniformity = 0.0;
        for (const double h : hist) {
            if (h == 0.0) continue;
            const double p = h / n;
            uniformity += p * p;
            entropy -= p * std::log2(p);
        }
    }
    return {min,    max,           range, mean,                  m2,         sum,
            median, std::sqrt(m2), mad,   std::sqrt(energy / n), uniformity, entropy,
            energy, kurt,          skew,  n};
}

}  // namespace feature_detail

/// 64-entry case descriptor: 16 first-order statistics over brain voxels per
/// modality, modality blocks in t1, t2, dwi, flair order.
inline CaseFeatureVector case_statistics(const MultiModalCase& c) {
    const auto map = brain_voxel_indices(c.brain_mask);
    if (map.empty()) throw InvariantError(msg(c.case_id, ": empty brain mask"));
    CaseFeatureVector out{};
    const std::array<const Volume*, 4> mods{&c.t1, &c.t2, &c.dwi, &c.flair};
    std::vector<double> vals(map.size());
    for (std::size_t m = 0; m < 4; ++m) {
        for (std::size_t r = 0; r < map.size(); ++r)
            vals[r] = mods[m]->data[static_cast<std::size_t>(map[r])];
        const auto stats = feature_detail::first_order_stats(vals);
        std::copy(stats.begin(), stats.end(), out.begin() + static_cast<std::ptrdiff_t>(m * 16));
    }
    return out;
}

// Disk cache: flat little-endian float32 matrix next to a JSON sidecar that
// pins the layout version, shape, and a content hash.

inline void save_feature_cache(const Matrix<float>& fm, const std::string& case_id,
                               const std::string& path_base) {
    const std::string bin_path = path_base + ".bin";
    {
        const std::filesystem::path p(bin_path);
        if (p.has_parent_path()) {
            std::error_code ec;
            std::filesystem::create_directories(p.parent_path(), ec);
        }
        std::ofstream out(bin_path, std::ios::binary);
        if (!out) throw IoError(msg("cannot write feature cache: ", bin_path));
        out.write(reinterpret_cast<const char*>(fm.values.data()),
                  static_cast<std::streamsize>(fm.values.size() * 4));
        if (!out) throw IoError(msg("short write: ", bin_path));
    }
    nlohmann::json j;
    j["case_id"] = case_id;
    j["rows"] = fm.rows;
    j["cols"] = fm.cols;
    j["feature_layout_version"] = kFeatureLayoutVersion;
    j["feature_names"] = feature_names();
    j["content_hash"] = hash_hex(fnv1a(fm.values.data(), fm.values.size() * 4));
    std::ofstream side(path_base + ".json");
    if (!side) throw IoError(msg("cannot write feature cache sidecar: ", path_base, ".json"));
    side << j.dump(2) << "\n";
}

/// Returns the cached matrix, or nullopt when no cache exists. A cache that
/// exists but fails validation (layout, case id, shape, hash) throws.
inline std::optional<Matrix<float>> load_feature_cache(const std::string& case_id,
                                                       const std::string& path_base) {
    const std::string bin_path = path_base + ".bin";
    const std::string side_path = path_base + ".json";
    if (!std::filesystem::exists(bin_path) || !std::filesystem::exists(side_path))
        return std::nullopt;

    std::ifstream side(side_path);
    nlohmann::json j;
    try {
        side >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(msg("corrupt feature cache sidecar: ", side_path, " (", e.what(), ")"));
    }
    if (j.value("feature_layout_version", -1) != kFeatureLayoutVersion)
        throw IoError(msg("feature cache layout version mismatch: ", side_path));
    if (j.value("case_id", "") != case_id)
        throw IoError(msg("feature cache case id mismatch: ", side_path));

    Matrix<float> fm;
    fm.rows = j.value("rows", std::size_t{0});
    fm.cols = j.value("cols", std::size_t{0});
    if (fm.cols != kVoxelFeatureCount)
        throw IoError(msg("feature cache column count mismatch: ", side_path));
    fm.values.resize(fm.rows * fm.cols);
    std::ifstream in(bin_path, std::ios::binary);
    in.read(reinterpret_cast<char*>(fm.values.data()),
            static_cast<std::streamsize>(fm.values.size() * 4));
    if (!in || in.gcount() != static_cast<std::streamsize>(fm.values.size() * 4))
        throw IoError(msg("feature cache truncated: ", bin_path));
    if (j.value("content_hash", "") != hash_hex(fnv1a(fm.values.data(), fm.values.size() * 4)))
        throw IoError(msg("feature cache content hash mismatch: ", bin_path));
    return fm;
}

}  // namespace idal
