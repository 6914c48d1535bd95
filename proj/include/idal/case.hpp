#pragma once

#include <optional>
#include <string>

#include "idal/manifest.hpp"
#include "idal/nifti.hpp"
#include "idal/volume.hpp"

namespace idal {

/// Intensity normalization provenance for one case.
/// Each modality maps x -> (x - csf_mode) / (brain_mode - csf_mode).
struct NormalizationParams {
    std::array<double, 4> csf_mode{};    // t1, t2, dwi, flair
    std::array<double, 4> brain_mode{};  // same order
    bool heuristic_csf = false;          // CSF voxels came from the intensity fallback
};

/// Scribble label codes inside a SUR volume.
enum class SurLabel : std::uint8_t { Unlabeled = 0, Background = 1, Lesion = 2 };

/// Scribble label codes inside a CSF scribble volume.
enum class CsfLabel : std::uint8_t { Unlabeled = 0, NonCsf = 1, Csf = 2 };

struct MultiModalCase {
    std::string case_id;
    Volume t1, t2, dwi, flair;
    MaskVolume brain_mask;
    std::optional<MaskVolume> gt;                         // ground-truth lesion mask
    std::optional<VolumeT<std::uint8_t>> sur;             // SurLabel codes
    std::optional<VolumeT<std::uint8_t>> csf_scribbles;   // CsfLabel codes
    std::optional<NormalizationParams> normalization;     // set once normalize_case ran
};

/// The modality data a segmentation query is allowed to see: no labels.
struct QueryCase {
    std::string case_id;
    Volume t1, t2, dwi, flair;
    MaskVolume brain_mask;

    static QueryCase from_case(const MultiModalCase& c) {
        return QueryCase{c.case_id, c.t1, c.t2, c.dwi, c.flair, c.brain_mask};
    }
};

namespace case_detail {

inline MaskVolume to_binary_mask(const Volume& v, const std::string& what) {
    MaskVolume m;
    m.dims = v.dims;
    m.spacing = v.spacing;
    m.meta = v.meta;
    m.data.resize(v.data.size());
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        const float x = v.data[i];
        if (x != 0.0f && x != 1.0f)
            throw InvariantError(msg(what, ": mask value ", x, " is not 0 or 1"));
        m.data[i] = x == 1.0f ? 1 : 0;
    }
    return m;
}

inline VolumeT<std::uint8_t> to_ternary_labels(const Volume& v, const std::string& what) {
    VolumeT<std::uint8_t> m;
    m.dims = v.dims;
    m.spacing = v.spacing;
    m.meta = v.meta;
    m.data.resize(v.data.size());
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        const float x = v.data[i];
        if (x != 0.0f && x != 1.0f && x != 2.0f)
            throw InvariantError(msg(what, ": label value ", x, " is not 0, 1, or 2"));
        m.data[i] = static_cast<std::uint8_t>(x);
    }
    return m;
}

}  // namespace case_detail

/// Loads one case from its manifest entry and verifies its invariants:
/// shared geometry, label encodings, SUR consistent with GT and confined to
/// the brain mask.
inline MultiModalCase load_case(const CaseEntry& entry) {
    MultiModalCase c;
    c.case_id = entry.id;
    c.t1 = read_volume(entry.t1);
    c.t2 = read_volume(entry.t2);
    c.dwi = read_volume(entry.dwi);
    c.flair = read_volume(entry.flair);
    require_same_geometry(c.t1, c.t2, msg(entry.id, ": t1 vs t2"));
    require_same_geometry(c.t1, c.dwi, msg(entry.id, ": t1 vs dwi"));
    require_same_geometry(c.t1, c.flair, msg(entry.id, ": t1 vs flair"));

    c.brain_mask = compute_brain_mask(c.t1, c.t2);
    if (count_nonzero(c.brain_mask) == 0)
        throw InvariantError(msg(entry.id, ": brain mask is empty (t1/t2 zero everywhere)"));

    if (entry.gt) {
        const Volume g = read_volume(*entry.gt);
        require_same_geometry(c.t1, g, msg(entry.id, ": t1 vs gt"));
        c.gt = case_detail::to_binary_mask(g, msg(entry.id, ": gt"));
    }
    if (entry.sur) {
        const Volume s = read_volume(*entry.sur);
        require_same_geometry(c.t1, s, msg(entry.id, ": t1 vs sur"));
        c.sur = case_detail::to_ternary_labels(s, msg(entry.id, ": sur"));
        for (std::size_t i = 0; i < c.sur->data.size(); ++i) {
            const auto label = c.sur->data[i];
            if (label == 0) continue;
            if (!c.brain_mask.data[i])
                throw InvariantError(msg(entry.id, ": SUR label outside brain mask"));
            if (c.gt) {
                const bool lesion_gt = c.gt->data[i] != 0;
                if (label == static_cast<std::uint8_t>(SurLabel::Lesion) && !lesion_gt)
                    throw InvariantError(msg(entry.id, ": SUR lesion label where gt=0"));
                if (label == static_cast<std::uint8_t>(SurLabel::Background) && lesion_gt)
                    throw InvariantError(msg(entry.id, ": SUR background label where gt=1"));
            }
        }
    }
    if (entry.csf) {
        const Volume k = read_volume(*entry.csf);
        require_same_geometry(c.t1, k, msg(entry.id, ": t1 vs csf"));
        c.csf_scribbles = case_detail::to_ternary_labels(k, msg(entry.id, ": csf"));
    }
    return c;
}

inline MultiModalCase load_case(const Manifest& m, const std::string& id) {
    return load_case(m.find(id));
}

}  // namespace idal
