#pragma once

#include <cmath>
#include <vector>

#include "idal/volume.hpp"

namespace idal {

// Separable Gaussian smoothing and spacing-aware second-order derivatives.
// Smoothing uses the delta form out = f(x) + sum_j k_j (f(x+j) - f(x)), which
// is the plain convolution for a unit-sum kernel but maps constant volumes to
// themselves bit-exactly, so derivative features of constants are exactly 0.

namespace filter_detail {

inline std::vector<double> gaussian_kernel(double sigma_vox) {
    if (sigma_vox <= 0.0) return {1.0};
    const auto radius = static_cast<std::int64_t>(std::ceil(4.0 * sigma_vox));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (std::int64_t j = -radius; j <= radius; ++j) {
        const double w = std::exp(-0.5 * (static_cast<double>(j) / sigma_vox) * (static_cast<double>(j) / sigma_vox));
        k[static_cast<std::size_t>(j + radius)] = w;
        sum += w;
    }
    for (auto& w : k) w /= sum;
    return k;
}

inline void smooth_axis(const Volume& in, Volume& out, int axis, const std::vector<double>& kernel) {
    const auto radius = static_cast<std::int64_t>(kernel.size() / 2);
    const std::int64_t nx = in.dims[0], ny = in.dims[1], nz = in.dims[2];
    const std::int64_t extent = in.dims[static_cast<std::size_t>(axis)];
    const std::int64_t stride = axis == 0 ? 1 : axis == 1 ? nx : nx * ny;

    for (std::int64_t z = 0; z < nz; ++z)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t x = 0; x < nx; ++x) {
                const std::int64_t i = x + nx * (y + ny * z);
                const std::int64_t pos = axis == 0 ? x : axis == 1 ? y : z;
                const double center = in.data[static_cast<std::size_t>(i)];
                double acc = 0.0;
                for (std::int64_t j = -radius; j <= radius; ++j) {
                    std::int64_t p = pos + j;
                    if (p < 0) p = 0;
                    if (p >= extent) p = extent - 1;  // edge replication
                    const double v = in.data[static_cast<std::size_t>(i + (p - pos) * stride)];
                    acc += kernel[static_cast<std::size_t>(j + radius)] * (v - center);
                }
                out.data[static_cast<std::size_t>(i)] = static_cast<float>(center + acc);
            }
}

}  // namespace filter_detail

/// Separable Gaussian smoothing; sigma is given in mm, converted per axis to
/// voxels via the spacing. Kernels truncate at 4 sigma, renormalized; edges
/// replicate.
inline Volume gaussian_smooth(const Volume& v, double sigma_mm) {
    if (sigma_mm <= 0.0) throw ConfigError("gaussian_smooth: sigma must be positive");
    Volume a = v, b = v;
    Volume* src = &a;
    Volume* dst = &b;
    for (int axis = 0; axis < 3; ++axis) {
        const auto kernel =
            filter_detail::gaussian_kernel(sigma_mm / v.spacing[static_cast<std::size_t>(axis)]);
        filter_detail::smooth_axis(*src, *dst, axis, kernel);
        std::swap(src, dst);
    }
    return *src;  // after three swaps src points at the last-written buffer
}

/// Central-difference second derivative along one axis, scaled by 1/spacing^2.
/// Boundary voxels use the replicated neighbor (one-sided difference).
inline Volume second_derivative(const Volume& v, int axis) {
    Volume out = v;
    const std::int64_t nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
    const std::int64_t extent = v.dims[static_cast<std::size_t>(axis)];
    const std::int64_t stride = axis == 0 ? 1 : axis == 1 ? nx : nx * ny;
    const double h = v.spacing[static_cast<std::size_t>(axis)];
    const double inv_h2 = 1.0 / (h * h);

    for (std::int64_t z = 0; z < nz; ++z)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t x = 0; x < nx; ++x) {
                const std::int64_t i = x + nx * (y + ny * z);
                const std::int64_t pos = axis == 0 ? x : axis == 1 ? y : z;
                const std::int64_t lo = pos > 0 ? -stride : 0;
                const std::int64_t hi = pos < extent - 1 ? stride : 0;
                const double c = v.data[static_cast<std::size_t>(i)];
                const double fm = v.data[static_cast<std::size_t>(i + lo)];
                const double fp = v.data[static_cast<std::size_t>(i + hi)];
                out.data[static_cast<std::size_t>(i)] =
                    static_cast<float>((fp - 2.0 * c + fm) * inv_h2);
            }
    return out;
}

namespace filter_detail {

/// Eigenvalue of a symmetric 3x3 matrix with the largest absolute value
/// (signed), via the trigonometric closed form. Ties in magnitude prefer the
/// positive eigenvalue.
inline double largest_abs_eigenvalue(double a11, double a22, double a33, double a12, double a13,
                                     double a23) {
    const double p1 = a12 * a12 + a13 * a13 + a23 * a23;
    double e1, e2, e3;
    if (p1 == 0.0) {
        e1 = a11;
        e2 = a22;
        e3 = a33;
    } else {
        const double q = (a11 + a22 + a33) / 3.0;
        const double p2 = (a11 - q) * (a11 - q) + (a22 - q) * (a22 - q) + (a33 - q) * (a33 - q) + 2.0 * p1;
        const double p = std::sqrt(p2 / 6.0);
        const double b11 = (a11 - q) / p, b22 = (a22 - q) / p, b33 = (a33 - q) / p;
        const double b12 = a12 / p, b13 = a13 / p, b23 = a23 / p;
        const double detb = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13) +
                            b13 * (b12 * b23 - b22 * b13);
        double r = detb / 2.0;
        if (r < -1.0) r = -1.0;
        if (r > 1.0) r = 1.0;
        const double phi = std::acos(r) / 3.0;
        e1 = q + 2.0 * p * std::cos(phi);
        e3 = q + 2.0 * p * std::cos(phi + 2.0 * 3.14159265358979323846 / 3.0);
        e2 = 3.0 * q - e1 - e3;
    }
    double best = e1;
    for (const double e : {e2, e3})
        if (std::abs(e) > std::abs(best) || (std::abs(e) == std::abs(best) && e > best)) best = e;
    return best;
}

}  // namespace filter_detail

/// Per-voxel signed eigenvalue of largest magnitude of the 3x3 Hessian of an
/// (already smoothed) volume. Diagonal terms are central second differences,
/// off-diagonal terms cross differences; all spacing-aware, edge-replicated.
inline Volume hessian_largest_eig(const Volume& v) {
    Volume out = v;
    const std::int64_t nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
    const double hx = v.spacing[0], hy = v.spacing[1], hz = v.spacing[2];

    const Volume dxx = second_derivative(v, 0);
    const Volume dyy = second_derivative(v, 1);
    const Volume dzz = second_derivative(v, 2);

    auto cross = [&](std::int64_t x, std::int64_t y, std::int64_t z, int a, int b) {
        std::int64_t pa[3] = {x, y, z}, ma[3] = {x, y, z};
        const std::int64_t n_[3] = {nx, ny, nz};
        auto step = [&](std::int64_t* c, int axis, std::int64_t dir) {
            c[axis] += dir;
            if (c[axis] < 0) c[axis] = 0;
            if (c[axis] >= n_[axis]) c[axis] = n_[axis] - 1;
        };
        auto val = [&](std::int64_t cx, std::int64_t cy, std::int64_t cz) {
            return static_cast<double>(v.data[static_cast<std::size_t>(cx + nx * (cy + ny * cz))]);
        };
        step(pa, a, +1);
        step(ma, a, -1);
        std::int64_t pp[3] = {pa[0], pa[1], pa[2]}, pm[3] = {pa[0], pa[1], pa[2]};
        std::int64_t mp[3] = {ma[0], ma[1], ma[2]}, mm[3] = {ma[0], ma[1], ma[2]};
        step(pp, b, +1);
        step(pm, b, -1);
        step(mp, b, +1);
        step(mm, b, -1);
        const double ha = a == 0 ? hx : a == 1 ? hy : hz;
        const double hb = b == 0 ? hx : b == 1 ? hy : hz;
        return (val(pp[0], pp[1], pp[2]) - val(pm[0], pm[1], pm[2]) - val(mp[0], mp[1], mp[2]) +
                val(mm[0], mm[1], mm[2])) /
               (4.0 * ha * hb);
    };

    for (std::int64_t z = 0; z < nz; ++z)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t x = 0; x < nx; ++x) {
                const auto i = static_cast<std::size_t>(x + nx * (y + ny * z));
                out.data[i] = static_cast<float>(filter_detail::largest_abs_eigenvalue(
                    dxx.data[i], dyy.data[i], dzz.data[i], cross(x, y, z, 0, 1),
                    cross(x, y, z, 0, 2), cross(x, y, z, 1, 2)));
            }
    return out;
}

}  // namespace idal
