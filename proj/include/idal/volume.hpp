#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "idal/core.hpp"

namespace idal {

using Dims3 = std::array<std::int64_t, 3>;
using Spacing3 = std::array<double, 3>;

// Orientation information carried through file I/O untouched. The pipeline
// itself never interprets it; inputs are assumed co-registered upstream.
struct NiftiMeta {
    float qfac = 1.0f;
    std::int16_t qform_code = 0;
    std::int16_t sform_code = 0;
    float quatern_b = 0.0f, quatern_c = 0.0f, quatern_d = 0.0f;
    float qoffset_x = 0.0f, qoffset_y = 0.0f, qoffset_z = 0.0f;
    std::array<float, 4> srow_x{0, 0, 0, 0};
    std::array<float, 4> srow_y{0, 0, 0, 0};
    std::array<float, 4> srow_z{0, 0, 0, 0};
    std::int8_t xyzt_units = 2;  // NIFTI_UNITS_MM
    std::string descrip;
};

/// 3D scalar grid with voxel spacing in mm. Data is stored x-fastest,
/// matching the on-disk layout, so `data[x + nx*(y + ny*z)]`.
template <class T>
struct VolumeT {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    NiftiMeta meta;
    std::vector<T> data;

    VolumeT() = default;
    VolumeT(Dims3 d, Spacing3 s, T fill = T{}) : dims(d), spacing(s) {
        validate_geometry();
        data.assign(voxel_count(), fill);
    }

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
               static_cast<std::size_t>(dims[2]);
    }

    std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
    }

    T& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[index(x, y, z)]; }
    const T& at(std::int64_t x, std::int64_t y, std::int64_t z) const { return data[index(x, y, z)]; }

    bool in_bounds(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
    }

    void validate_geometry() const {
        for (int a = 0; a < 3; ++a) {
            if (dims[static_cast<std::size_t>(a)] <= 0)
                throw InvariantError(msg("volume dim ", a, " must be positive, got ", dims[static_cast<std::size_t>(a)]));
            if (!(spacing[static_cast<std::size_t>(a)] > 0.0))
                throw InvariantError(msg("volume spacing ", a, " must be positive, got ", spacing[static_cast<std::size_t>(a)]));
        }
    }

    void validate() const {
        validate_geometry();
        if (data.size() != voxel_count())
            throw InvariantError(msg("volume data length ", data.size(), " does not match dims product ", voxel_count()));
    }
};

using Volume = VolumeT<float>;
using MaskVolume = VolumeT<std::uint8_t>;

inline bool spacing_close(const Spacing3& a, const Spacing3& b) {
    for (int i = 0; i < 3; ++i) {
        const double s = std::max({1.0, std::abs(a[static_cast<std::size_t>(i)]), std::abs(b[static_cast<std::size_t>(i)])});
        if (std::abs(a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)]) > 1e-5 * s) return false;
    }
    return true;
}

template <class A, class B>
bool same_geometry(const VolumeT<A>& a, const VolumeT<B>& b) {
    return a.dims == b.dims && spacing_close(a.spacing, b.spacing);
}

template <class A, class B>
void require_same_geometry(const VolumeT<A>& a, const VolumeT<B>& b, const std::string& what) {
    if (!same_geometry(a, b))
        throw GeometryError(msg("geometry mismatch (", what, "): dims (", a.dims[0], ",", a.dims[1], ",", a.dims[2],
                                ") vs (", b.dims[0], ",", b.dims[1], ",", b.dims[2], ")"));
}

inline std::size_t count_nonzero(const MaskVolume& m) {
    std::size_t n = 0;
    for (auto v : m.data) n += (v != 0);
    return n;
}

/// Voxels where neither t1 nor t2 are zero belong to the brain.
inline MaskVolume compute_brain_mask(const Volume& t1, const Volume& t2) {
    require_same_geometry(t1, t2, "t1 vs t2");
    MaskVolume mask(t1.dims, t1.spacing);
    mask.meta = t1.meta;
    for (std::size_t i = 0; i < mask.data.size(); ++i)
        mask.data[i] = (t1.data[i] != 0.0f && t2.data[i] != 0.0f) ? 1 : 0;
    return mask;
}

}  // namespace idal
