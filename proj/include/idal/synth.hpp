#pragma once

// Seeded synthetic dataset generator: multi-modal pseudo-brain volumes with
// lesion-appearance clusters, ground truth, scribbles, and a manifest.
//
// Each case is an ellipsoidal brain with a CSF shell and a two-tissue
// interior (white-matter base plus grey-matter blobs whose level depends on
// the case's cluster). Lesions are non-overlapping spheres whose per-modality
// intensity offsets follow the cluster's contrast signature; each case also
// carries "confuser" blobs that imitate OTHER clusters' lesion contrast at
// reduced amplitude but are healthy tissue in the ground truth. A classifier
// pooled over all clusters fires on those confusers; one trained on
// same-cluster cases does not, which is the heterogeneity the retrieval
// stage is supposed to exploit.
//
// Cluster assignments are written to a sidecar file that no training API
// accepts; pipeline code never sees cluster identity.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include <idal/case.hpp>
#include <idal/core.hpp>
#include <idal/dalsa.hpp>
#include <idal/filters.hpp>
#include <idal/manifest.hpp>
#include <idal/nifti.hpp>
#include <idal/volume.hpp>

namespace idal {

struct SynthConfig {
    int n_cases = 18;
    int n_clusters = 3;
    Dims3 dims{48, 48, 48};
    Spacing3 spacing{1.0f, 1.0f, 1.0f};
    std::array<int, 2> lesion_count_range{2, 4};
    std::array<double, 2> lesion_radius_range{2.5, 5.0};  // mm
    // Per-cluster lesion intensity offsets (t1, t2, dwi, flair) on the
    // canonical scale where white matter is 1. Empty: built-in rotation.
    std::vector<std::array<double, 4>> cluster_signatures;
    double noise_sigma = 0.04;  // canonical scale, applied inside the brain
    std::uint64_t seed = 0;
};

namespace synth_detail {

// Qualitatively distinct lesion appearances: FLAIR/T2-bright,
// DWI-bright only, T2-bright with dark DWI.
inline const std::array<std::array<double, 4>, 3>& base_signatures() {
    static const std::array<std::array<double, 4>, 3> sigs{{
        {-0.20, 0.50, 0.05, 0.95},
        {-0.05, 0.15, 0.95, 0.20},
        {-0.15, 0.85, -0.45, 0.25},
    }};
    return sigs;
}

inline std::vector<std::array<double, 4>> resolve_signatures(const SynthConfig& cfg) {
    if (!cfg.cluster_signatures.empty()) {
        if (cfg.cluster_signatures.size() != static_cast<std::size_t>(cfg.n_clusters))
            throw ConfigError(msg("need one signature per cluster: got ",
                                  cfg.cluster_signatures.size(), " for ", cfg.n_clusters));
        return cfg.cluster_signatures;
    }
    std::vector<std::array<double, 4>> sigs;
    for (int c = 0; c < cfg.n_clusters; ++c) {
        auto s = base_signatures()[static_cast<std::size_t>(c % 3)];
        const double scale = 1.0 + 0.2 * (c / 3);  // keep extra clusters distinct
        for (auto& v : s) v *= scale;
        sigs.push_back(s);
    }
    return sigs;
}

// Canonical CSF intensities per modality (white matter is 1 everywhere).
inline const std::array<double, 4>& csf_levels() {
    static const std::array<double, 4> lv{0.30, 1.80, 0.70, 0.25};
    return lv;
}

struct BrainGeometry {
    std::array<double, 3> center;    // voxel coordinates
    std::array<double, 3> semi_mm;   // ellipsoid semi-axes in mm
    Spacing3 spacing;

    // Squared normalized ellipsoid coordinate: <= 1 inside the brain.
    double e2(std::int64_t x, std::int64_t y, std::int64_t z) const {
        const double dx = (static_cast<double>(x) - center[0]) * spacing[0] / semi_mm[0];
        const double dy = (static_cast<double>(y) - center[1]) * spacing[1] / semi_mm[1];
        const double dz = (static_cast<double>(z) - center[2]) * spacing[2] / semi_mm[2];
        return dx * dx + dy * dy + dz * dz;
    }

    double min_semi_mm() const { return std::min({semi_mm[0], semi_mm[1], semi_mm[2]}); }
};

inline BrainGeometry make_geometry(const SynthConfig& cfg) {
    BrainGeometry g;
    g.spacing = cfg.spacing;
    for (int a = 0; a < 3; ++a) g.center[a] = 0.5 * (static_cast<double>(cfg.dims[a]) - 1.0);
    g.semi_mm[0] = 0.42 * static_cast<double>(cfg.dims[0]) * cfg.spacing[0];
    g.semi_mm[1] = 0.42 * static_cast<double>(cfg.dims[1]) * cfg.spacing[1];
    g.semi_mm[2] = 0.36 * static_cast<double>(cfg.dims[2]) * cfg.spacing[2];
    return g;
}

constexpr double kCsfShellE2 = 0.82;  // e2 above this (and <= 1) is the CSF shell

struct Blob {
    std::array<double, 3> center_vox;
    double radius_mm;
};

inline bool blob_fits(const BrainGeometry& g, const Blob& b) {
    // Sufficient containment condition: the normalized center distance plus
    // the radius against the smallest semi-axis stays inside the interior.
    const double e = std::sqrt(g.e2(static_cast<std::int64_t>(std::llround(b.center_vox[0])),
                                    static_cast<std::int64_t>(std::llround(b.center_vox[1])),
                                    static_cast<std::int64_t>(std::llround(b.center_vox[2]))));
    return e + b.radius_mm / g.min_semi_mm() <= std::sqrt(kCsfShellE2) - 0.02;
}

inline double mm_distance(const std::array<double, 3>& a, const std::array<double, 3>& b,
                          const Spacing3& spacing) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double d = (a[i] - b[i]) * spacing[i];
        s += d * d;
    }
    return std::sqrt(s);
}

/// Rejection-samples `count` non-overlapping blobs (centers at least
/// r_i + r_j + 2 mm apart) that fit inside the interior; also avoids the
/// blobs already in `keep_clear`. Returns false when placement failed.
inline bool place_blobs(const SynthConfig& cfg, const BrainGeometry& g, RandomStream& rng,
                        int count, double r_lo, double r_hi, const std::vector<Blob>& keep_clear,
                        std::vector<Blob>& out) {
    out.clear();
    for (int b = 0; b < count; ++b) {
        const double r = r_lo + rng.next_double() * (r_hi - r_lo);
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            Blob cand;
            cand.radius_mm = r;
            for (int a = 0; a < 3; ++a)
                cand.center_vox[a] =
                    g.center[a] + (rng.next_double() * 2.0 - 1.0) * g.semi_mm[a] /
                                      static_cast<double>(cfg.spacing[a]);
            if (!blob_fits(g, cand)) continue;
            bool clear = true;
            for (const auto& other : out)
                clear = clear && mm_distance(cand.center_vox, other.center_vox, cfg.spacing) >
                                     cand.radius_mm + other.radius_mm + 2.0;
            for (const auto& other : keep_clear)
                clear = clear && mm_distance(cand.center_vox, other.center_vox, cfg.spacing) >
                                     cand.radius_mm + other.radius_mm + 2.0;
            if (!clear) continue;
            out.push_back(cand);
            placed = true;
        }
        if (!placed) return false;
    }
    return true;
}

inline bool in_blob(const Blob& b, std::int64_t x, std::int64_t y, std::int64_t z,
                    const Spacing3& spacing) {
    const std::array<double, 3> p{static_cast<double>(x), static_cast<double>(y),
                                  static_cast<double>(z)};
    return mm_distance(p, b.center_vox, spacing) <= b.radius_mm;
}

inline Volume blank_volume(const SynthConfig& cfg) {
    Volume v;
    v.dims = cfg.dims;
    v.spacing = cfg.spacing;
    v.meta.descrip = "idal synthetic phantom v1";
    v.data.assign(static_cast<std::size_t>(cfg.dims[0]) * cfg.dims[1] * cfg.dims[2], 0.0f);
    return v;
}

inline Volume labels_to_float(const VolumeT<std::uint8_t>& labels) {
    Volume v;
    v.dims = labels.dims;
    v.spacing = labels.spacing;
    v.meta = labels.meta;
    v.data.resize(labels.data.size());
    for (std::size_t i = 0; i < labels.data.size(); ++i)
        v.data[i] = static_cast<float>(labels.data[i]);
    return v;
}

}  // namespace synth_detail

struct SynthCaseInfo {
    std::string case_id;
    int cluster = 0;
    std::size_t gt_voxels = 0;
    double analytic_lesion_voxels = 0.0;  // sum of sphere volumes / voxel volume
};

struct SynthResult {
    Manifest manifest;
    std::vector<SynthCaseInfo> cases;
};

inline void validate_synth_config(const SynthConfig& cfg) {
    if (cfg.n_clusters < 1 || cfg.n_cases < cfg.n_clusters)
        throw ConfigError(msg("synth: need n_cases >= n_clusters >= 1, got ", cfg.n_cases,
                              " cases and ", cfg.n_clusters, " clusters"));
    for (int a = 0; a < 3; ++a)
        if (cfg.dims[a] < 16) throw ConfigError("synth: each dimension must be at least 16");
    if (cfg.lesion_count_range[0] < 1 || cfg.lesion_count_range[1] < cfg.lesion_count_range[0])
        throw ConfigError("synth: bad lesion count range");
    if (cfg.lesion_radius_range[0] <= 0.0 ||
        cfg.lesion_radius_range[1] < cfg.lesion_radius_range[0])
        throw ConfigError("synth: bad lesion radius range");
    if (cfg.noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
    const auto g = synth_detail::make_geometry(cfg);
    const double margin = std::sqrt(synth_detail::kCsfShellE2) -
                          cfg.lesion_radius_range[1] / g.min_semi_mm();
    if (margin < 0.15)
        throw ConfigError(msg("synth: infeasible geometry, lesion radius ",
                              cfg.lesion_radius_range[1], " mm does not fit the brain interior"));
}

/// Generates one case deterministically from its own seed. Exposed for tests;
/// generate_dataset drives it per case and writes the volumes out.
inline SynthCaseInfo generate_case(const SynthConfig& cfg, int case_index, int cluster,
                                   const std::vector<std::array<double, 4>>& signatures,
                                   MultiModalCase& out) {
    using namespace synth_detail;
    const auto g = make_geometry(cfg);
    RandomStream rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(case_index)));

    // Per-case draws, in a fixed order so the stream is stable.
    const int lesion_count =
        cfg.lesion_count_range[0] +
        static_cast<int>(rng.next_below(static_cast<std::uint64_t>(
            cfg.lesion_count_range[1] - cfg.lesion_count_range[0] + 1)));
    std::vector<Blob> lesions, confusers, gm_blobs;
    bool ok = false;
    for (int round = 0; round < 50 && !ok; ++round) {
        ok = place_blobs(cfg, g, rng, lesion_count, cfg.lesion_radius_range[0],
                         cfg.lesion_radius_range[1], {}, lesions);
        if (!ok) continue;
        // Confusers imitate other clusters; a single-cluster dataset has none.
        const int n_confusers = cfg.n_clusters > 1 ? 2 : 0;
        ok = place_blobs(cfg, g, rng, n_confusers, 2.5, 4.0, lesions, confusers);
    }
    if (!ok)
        throw ConfigError(msg("synth: infeasible geometry, could not place ", lesion_count,
                              " lesions in case ", case_index));
    place_blobs(cfg, g, rng, 6, 3.5, 5.5, {}, gm_blobs);  // overlap with lesions is fine

    std::vector<double> lesion_amp(lesions.size());
    for (auto& a : lesion_amp) a = 0.75 + rng.next_double() * 0.5;
    std::vector<double> confuser_amp(confusers.size());
    for (auto& a : confuser_amp) a = 0.85 * (0.75 + rng.next_double() * 0.5);
    std::array<double, 4> affine_a, affine_b;
    for (int m = 0; m < 4; ++m) {
        affine_a[m] = 80.0 + rng.next_double() * 40.0;
        affine_b[m] = 5.0 + rng.next_double() * 20.0;
    }
    // Grey matter level is cluster-tied: it gives case statistics a signal
    // about cluster identity that does not depend on lesion load.
    const double gm_level = (0.10 + 0.12 * (cluster % 3)) * (1.0 + 0.2 * (cluster / 3));

    const std::int64_t nx = cfg.dims[0], ny = cfg.dims[1], nz = cfg.dims[2];
    std::array<Volume, 4> canon;
    for (auto& v : canon) v = blank_volume(cfg);
    MaskVolume brain;
    brain.dims = cfg.dims;
    brain.spacing = cfg.spacing;
    brain.meta = canon[0].meta;
    brain.data.assign(canon[0].data.size(), 0);
    MaskVolume gt = brain;
    MaskVolume shell = brain;

    SynthCaseInfo info;
    info.cluster = cluster;
    const double voxel_mm3 = static_cast<double>(cfg.spacing[0]) * cfg.spacing[1] * cfg.spacing[2];
    for (const auto& b : lesions)
        info.analytic_lesion_voxels += 4.0 / 3.0 * 3.14159265358979323846 * b.radius_mm *
                                       b.radius_mm * b.radius_mm / voxel_mm3;

    std::size_t at = 0;
    for (std::int64_t z = 0; z < nz; ++z)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t x = 0; x < nx; ++x, ++at) {
                const double e2 = g.e2(x, y, z);
                if (e2 > 1.0) continue;
                brain.data[at] = 1;
                if (e2 > kCsfShellE2) {
                    shell.data[at] = 1;
                    for (int m = 0; m < 4; ++m)
                        canon[m].data[at] = static_cast<float>(csf_levels()[m]);
                    continue;
                }
                std::array<double, 4> v{1.0, 1.0, 1.0, 1.0};  // white-matter base
                for (const auto& b : gm_blobs)
                    if (in_blob(b, x, y, z, cfg.spacing)) {
                        for (auto& m : v) m += gm_level;
                        break;
                    }
                for (std::size_t b = 0; b < confusers.size(); ++b)
                    if (in_blob(confusers[b], x, y, z, cfg.spacing)) {
                        const auto& sig =
                            signatures[static_cast<std::size_t>((cluster + 1 + static_cast<int>(b)) %
                                                                cfg.n_clusters)];
                        for (int m = 0; m < 4; ++m) v[m] += confuser_amp[b] * sig[m];
                    }
                for (std::size_t b = 0; b < lesions.size(); ++b)
                    if (in_blob(lesions[b], x, y, z, cfg.spacing)) {
                        gt.data[at] = 1;
                        for (int m = 0; m < 4; ++m)
                            v[m] += lesion_amp[b] * signatures[static_cast<std::size_t>(cluster)][m];
                    }
                for (int m = 0; m < 4; ++m) canon[m].data[at] = static_cast<float>(v[m]);
            }
    info.gt_voxels = count_nonzero(gt);

    // Smooth lesion and tissue boundaries, then map to per-modality raw
    // scanner units inside the brain only. Values outside stay exactly 0 so
    // the brain mask is recoverable from the volumes.
    for (int m = 0; m < 4; ++m) {
        Volume s = gaussian_smooth(canon[m], 0.6);
        for (std::size_t i = 0; i < s.data.size(); ++i) {
            if (!brain.data[i]) {
                s.data[i] = 0.0f;
                continue;
            }
            double raw = std::max(0.05, static_cast<double>(s.data[i])) * affine_a[m] +
                         affine_b[m];
            if (cfg.noise_sigma > 0.0) raw += rng.next_normal() * cfg.noise_sigma * affine_a[m];
            s.data[i] = static_cast<float>(std::max(raw, 0.5));
        }
        canon[m] = std::move(s);
    }

    // Scribbles: SURs from the ground truth, CSF/non-CSF from the known
    // shell and interior regions.
    SurParams sp;
    sp.seed = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(case_index)), 7);
    const auto sur = derive_surs(gt, brain, sp);

    VolumeT<std::uint8_t> csf;
    csf.dims = cfg.dims;
    csf.spacing = cfg.spacing;
    csf.meta = brain.meta;
    csf.data.assign(brain.data.size(), 0);
    MaskVolume interior = brain;
    for (std::size_t i = 0; i < interior.data.size(); ++i)
        interior.data[i] = brain.data[i] && !shell.data[i] ? 1 : 0;
    const auto ball = dalsa_detail::ball_offsets(cfg.spacing, 1.2);
    RandomStream scribble_rng(
        derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(case_index)), 8));
    auto region_voxels = [](const MaskVolume& m) {
        std::vector<std::int64_t> v;
        for (std::size_t i = 0; i < m.data.size(); ++i)
            if (m.data[i]) v.push_back(static_cast<std::int64_t>(i));
        return v;
    };
    dalsa_detail::stamp_balls(csf, shell,
                              dalsa_detail::pick_centers(region_voxels(shell), 3, scribble_rng),
                              ball, static_cast<std::uint8_t>(CsfLabel::Csf));
    dalsa_detail::stamp_balls(csf, interior,
                              dalsa_detail::pick_centers(region_voxels(interior), 4, scribble_rng),
                              ball, static_cast<std::uint8_t>(CsfLabel::NonCsf));

    out.t1 = std::move(canon[0]);
    out.t2 = std::move(canon[1]);
    out.dwi = std::move(canon[2]);
    out.flair = std::move(canon[3]);
    out.brain_mask = std::move(brain);
    out.gt = std::move(gt);
    out.sur = sur;
    out.csf_scribbles = std::move(csf);
    return info;
}

/// Writes `case_<id>/{t1,t2,dwi,flair,gt,sur,csf}.nii.gz` per case plus
/// manifest.json and clusters_sidecar.json. Clusters are assigned round-robin.
inline SynthResult generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir,
                                    int threads = 0) {
    validate_synth_config(cfg);
    const auto signatures = synth_detail::resolve_signatures(cfg);
    std::filesystem::create_directories(out_dir);

    SynthResult result;
    result.cases.resize(static_cast<std::size_t>(cfg.n_cases));
    result.manifest.cases.resize(static_cast<std::size_t>(cfg.n_cases));

    parallel_for(static_cast<std::size_t>(cfg.n_cases), resolve_threads(threads),
                 [&](std::size_t i) {
                     char name[32];
                     std::snprintf(name, sizeof name, "case_%02zu", i);
                     const std::string id(name);
                     const int cluster = static_cast<int>(i) % cfg.n_clusters;

                     MultiModalCase c;
                     c.case_id = id;
                     SynthCaseInfo info =
                         generate_case(cfg, static_cast<int>(i), cluster, signatures, c);
                     info.case_id = id;

                     const auto dir = out_dir / id;
                     write_volume(c.t1, (dir / "t1.nii.gz").string());
                     write_volume(c.t2, (dir / "t2.nii.gz").string());
                     write_volume(c.dwi, (dir / "dwi.nii.gz").string());
                     write_volume(c.flair, (dir / "flair.nii.gz").string());
                     write_mask(*c.gt, (dir / "gt.nii.gz").string(), c.t1);
                     write_volume(synth_detail::labels_to_float(*c.sur),
                                  (dir / "sur.nii.gz").string());
                     write_volume(synth_detail::labels_to_float(*c.csf_scribbles),
                                  (dir / "csf.nii.gz").string());

                     CaseEntry entry;
                     entry.id = id;
                     entry.t1 = (dir / "t1.nii.gz").string();
                     entry.t2 = (dir / "t2.nii.gz").string();
                     entry.dwi = (dir / "dwi.nii.gz").string();
                     entry.flair = (dir / "flair.nii.gz").string();
                     entry.gt = (dir / "gt.nii.gz").string();
                     entry.sur = (dir / "sur.nii.gz").string();
                     entry.csf = (dir / "csf.nii.gz").string();
                     result.manifest.cases[i] = std::move(entry);
                     result.cases[i] = std::move(info);
                 });

    save_manifest(result.manifest, (out_dir / "manifest.json").string(), out_dir);

    nlohmann::json sidecar;
    sidecar["schema_version"] = 1;
    auto assignments = nlohmann::json::object();
    for (const auto& info : result.cases) assignments[info.case_id] = info.cluster;
    sidecar["assignments"] = std::move(assignments);
    auto sigs = nlohmann::json::array();
    for (const auto& s : signatures) sigs.push_back(s);
    sidecar["signatures"] = std::move(sigs);
    std::ofstream side(out_dir / "clusters_sidecar.json", std::ios::binary);
    if (!side) throw IoError("synth: cannot write clusters_sidecar.json");
    side << sidecar.dump(2) << '\n';
    if (!side) throw IoError("synth: sidecar write failed");
    return result;
}

}  // namespace idal
