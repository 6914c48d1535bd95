#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "idal/case.hpp"
#include "idal/core.hpp"

namespace idal {

// Density-ratio sample weights for sparsely annotated training voxels: a
// logistic selection model separates SUR-labeled voxels (class S) from a
// uniform brain sample (class B); the weight of a SUR voxel is the ratio
// P_B(x)/P_S(x), evaluated as an exponential of the decision value rather
// than a division of density estimates.

struct SurParams {
    int lesion_blobs = 4;
    int background_blobs = 8;
    double radius_mm = 2.5;
    std::uint64_t seed = 0;
};

namespace dalsa_detail {

/// Voxel offsets within a given radius in mm under the volume's spacing.
inline std::vector<std::array<std::int64_t, 3>> ball_offsets(const Spacing3& spacing, double radius_mm) {
    std::vector<std::array<std::int64_t, 3>> offsets;
    const std::int64_t rx = static_cast<std::int64_t>(radius_mm / spacing[0]);
    const std::int64_t ry = static_cast<std::int64_t>(radius_mm / spacing[1]);
    const std::int64_t rz = static_cast<std::int64_t>(radius_mm / spacing[2]);
    for (std::int64_t dz = -rz; dz <= rz; ++dz)
        for (std::int64_t dy = -ry; dy <= ry; ++dy)
            for (std::int64_t dx = -rx; dx <= rx; ++dx) {
                const double d2 = dx * spacing[0] * (dx * spacing[0]) + dy * spacing[1] * (dy * spacing[1]) +
                                  dz * spacing[2] * (dz * spacing[2]);
                if (d2 <= radius_mm * radius_mm) offsets.push_back({dx, dy, dz});
            }
    return offsets;
}

/// Voxels of `region` where a ball of the given offsets fits entirely inside.
inline std::vector<std::int64_t> erode(const MaskVolume& region,
                                       const std::vector<std::array<std::int64_t, 3>>& offsets) {
    std::vector<std::int64_t> kept;
    const std::int64_t nx = region.dims[0], ny = region.dims[1], nz = region.dims[2];
    for (std::int64_t z = 0; z < nz; ++z)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t x = 0; x < nx; ++x) {
                if (!region.data[static_cast<std::size_t>(x + nx * (y + ny * z))]) continue;
                bool inside = true;
                for (const auto& o : offsets) {
                    const std::int64_t px = x + o[0], py = y + o[1], pz = z + o[2];
                    if (px < 0 || py < 0 || pz < 0 || px >= nx || py >= ny || pz >= nz ||
                        !region.data[static_cast<std::size_t>(px + nx * (py + ny * pz))]) {
                        inside = false;
                        break;
                    }
                }
                if (inside) kept.push_back(x + nx * (y + ny * z));
            }
    return kept;
}

/// Region voxel nearest the region's centroid (fallback center for regions
/// too small to erode).
inline std::int64_t centroid_voxel(const MaskVolume& region) {
    const std::int64_t nx = region.dims[0], ny = region.dims[1];
    double cx = 0, cy = 0, cz = 0, n = 0;
    for (std::size_t i = 0; i < region.data.size(); ++i) {
        if (!region.data[i]) continue;
        const auto li = static_cast<std::int64_t>(i);
        cx += static_cast<double>(li % nx);
        cy += static_cast<double>((li / nx) % ny);
        cz += static_cast<double>(li / (nx * ny));
        n += 1.0;
    }
    cx /= n;
    cy /= n;
    cz /= n;
    std::int64_t best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < region.data.size(); ++i) {
        if (!region.data[i]) continue;
        const auto li = static_cast<std::int64_t>(i);
        const double dx = static_cast<double>(li % nx) - cx;
        const double dy = static_cast<double>((li / nx) % ny) - cy;
        const double dz = static_cast<double>(li / (nx * ny)) - cz;
        const double d = dx * dx + dy * dy + dz * dz;
        if (d < best_d) {
            best_d = d;
            best = li;
        }
    }
    return best;
}

/// Up to `want` distinct seeded picks from `candidates` (all of them when
/// fewer exist).
inline std::vector<std::int64_t> pick_centers(std::vector<std::int64_t> candidates, int want,
                                              RandomStream& rng) {
    if (candidates.size() <= static_cast<std::size_t>(want)) return candidates;
    std::vector<std::int64_t> out;
    std::size_t remaining = candidates.size();
    for (int i = 0; i < want; ++i) {
        const std::size_t j = rng.next_below(remaining);
        out.push_back(candidates[j]);
        candidates[j] = candidates[--remaining];
    }
    return out;
}

inline void stamp_balls(VolumeT<std::uint8_t>& sur, const MaskVolume& region,
                        const std::vector<std::int64_t>& centers,
                        const std::vector<std::array<std::int64_t, 3>>& offsets, std::uint8_t label) {
    const std::int64_t nx = sur.dims[0], ny = sur.dims[1], nz = sur.dims[2];
    for (const auto c : centers) {
        const std::int64_t x = c % nx, y = (c / nx) % ny, z = c / (nx * ny);
        for (const auto& o : offsets) {
            const std::int64_t px = x + o[0], py = y + o[1], pz = z + o[2];
            if (px < 0 || py < 0 || pz < 0 || px >= nx || py >= ny || pz >= nz) continue;
            const auto i = static_cast<std::size_t>(px + nx * (py + ny * pz));
            if (region.data[i]) sur.data[i] = label;  // clipped to the region, so gt-consistent
        }
    }
}

}  // namespace dalsa_detail

/// Seeded spherical scribbles standing in for user-provided SURs: lesion
/// scribbles inside the eroded lesion, background scribbles inside the eroded
/// non-lesion brain. Consistent with gt by construction. Regions too small to
/// erode get a single ball at their centroid, clipped to the region.
inline VolumeT<std::uint8_t> derive_surs(const MaskVolume& gt, const MaskVolume& brain,
                                         const SurParams& params) {
    require_same_geometry(gt, brain, "gt vs brain");
    for (std::size_t i = 0; i < gt.data.size(); ++i)
        if (gt.data[i] && !brain.data[i]) throw InvariantError("derive_surs: gt voxel outside brain");

    VolumeT<std::uint8_t> sur;
    sur.dims = gt.dims;
    sur.spacing = gt.spacing;
    sur.meta = gt.meta;
    sur.data.assign(gt.data.size(), 0);

    const auto offsets = dalsa_detail::ball_offsets(gt.spacing, params.radius_mm);
    RandomStream rng(params.seed);

    MaskVolume background = brain;
    for (std::size_t i = 0; i < background.data.size(); ++i)
        background.data[i] = brain.data[i] && !gt.data[i] ? 1 : 0;

    auto scribble = [&](const MaskVolume& region, int blobs, SurLabel label) {
        if (count_nonzero(region) == 0) return;
        auto eroded = dalsa_detail::erode(region, offsets);
        std::vector<std::int64_t> centers;
        if (eroded.empty())
            centers.push_back(dalsa_detail::centroid_voxel(region));
        else
            centers = dalsa_detail::pick_centers(std::move(eroded), blobs, rng);
        dalsa_detail::stamp_balls(sur, region, centers, offsets, static_cast<std::uint8_t>(label));
    };
    scribble(gt, params.lesion_blobs, SurLabel::Lesion);
    scribble(background, params.background_blobs, SurLabel::Background);
    return sur;
}

struct SelectionModel {
    std::vector<double> coef;   // [0] bias, then one per feature (standardized scale)
    std::vector<double> mean;   // per-feature standardization
    std::vector<double> scale;  // per-feature standardization, > 0
    double prior_ratio = 1.0;   // N_brain / N_sur
    int iterations = 0;
    bool converged = false;

    bool fitted() const { return !coef.empty(); }

    /// Log-odds of the SUR class for one feature row.
    double decision(const float* row) const {
        double f = coef[0];
        for (std::size_t j = 0; j + 1 < coef.size(); ++j)
            f += coef[j + 1] * ((static_cast<double>(row[j]) - mean[j]) / scale[j]);
        return f;
    }
};

/// Unregularized maximum-likelihood logistic fit (class S = rows of X_sur,
/// class B = rows of X_brain) on standardized features, via iteratively
/// reweighted least squares. Stops when the largest coefficient change drops
/// below 1e-8 or after 100 iterations. Diverging coefficients signal perfect
/// separation.
inline SelectionModel fit_selection_model(const Matrix<float>& X_sur, const Matrix<float>& X_brain) {
    if (X_sur.rows < 10 || X_brain.rows < 10)
        throw TrainingError(msg("fit_selection_model: need at least 10 rows per class, got ",
                                X_sur.rows, " SUR and ", X_brain.rows, " brain"));
    if (X_sur.cols != X_brain.cols) throw TrainingError("fit_selection_model: feature count mismatch");
    const std::size_t d = X_sur.cols;
    const std::size_t n = X_sur.rows + X_brain.rows;

    SelectionModel m;
    m.prior_ratio = static_cast<double>(X_brain.rows) / static_cast<double>(X_sur.rows);
    m.mean.assign(d, 0.0);
    m.scale.assign(d, 1.0);

    auto value = [&](std::size_t i, std::size_t j) {
        return i < X_sur.rows ? static_cast<double>(X_sur.at(i, j))
                              : static_cast<double>(X_brain.at(i - X_sur.rows, j));
    };
    std::vector<bool> active(d, true);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += value(i, j);
        m.mean[j] = s / static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double dlt = value(i, j) - m.mean[j];
            ss += dlt * dlt;
        }
        const double sd = std::sqrt(ss / static_cast<double>(n));
        if (sd > 0.0)
            m.scale[j] = sd;
        else
            active[j] = false;  // constant feature: kept out of the solve, coefficient 0
    }
    std::vector<std::size_t> cols;
    for (std::size_t j = 0; j < d; ++j)
        if (active[j]) cols.push_back(j);
    const std::size_t p = cols.size() + 1;

    Eigen::MatrixXd X(n, p);
    Eigen::VectorXd y(n);
    for (std::size_t i = 0; i < n; ++i) {
        X(static_cast<Eigen::Index>(i), 0) = 1.0;
        for (std::size_t c = 0; c < cols.size(); ++c)
            X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c + 1)) =
                (value(i, cols[c]) - m.mean[cols[c]]) / m.scale[cols[c]];
        y(static_cast<Eigen::Index>(i)) = i < X_sur.rows ? 1.0 : 0.0;
    }

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    for (int iter = 0; iter < 100; ++iter) {
        const Eigen::VectorXd eta = X * beta;
        const Eigen::VectorXd prob = (1.0 / (1.0 + (-eta.array()).exp())).matrix();
        const Eigen::VectorXd w = (prob.array() * (1.0 - prob.array())).cwiseMax(1e-10).matrix();

        const Eigen::MatrixXd Xw = X.array().colwise() * w.array().sqrt();
        Eigen::MatrixXd H = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
        H.selfadjointView<Eigen::Lower>().rankUpdate(Xw.transpose());
        const Eigen::VectorXd g = X.transpose() * (y - prob);

        // Smoothed-feature columns can be near-collinear; a relative ridge
        // keeps the Hessian positive definite without moving healthy fits.
        H.diagonal().array() += 1e-8 * (H.trace() / static_cast<double>(p)) + 1e-12;

        const Eigen::LDLT<Eigen::MatrixXd> ldlt(H.selfadjointView<Eigen::Lower>());
        if (ldlt.info() != Eigen::Success)
            throw TrainingError("fit_selection_model: normal equations not solvable");
        const Eigen::VectorXd delta = ldlt.solve(g);

        beta += delta;
        m.iterations = iter + 1;
        if (beta.array().abs().maxCoeff() > 30.0)
            throw SeparationError(
                "fit_selection_model: perfect separation (coefficients diverge); "
                "clip weights or fall back to uniform weights");
        if (delta.array().abs().maxCoeff() < 1e-8) {
            m.converged = true;
            break;
        }
    }
    // Standardized logistic fits converge in well under 100 steps when the
    // classes overlap; running out of steps means the optimum is at infinity.
    if (!m.converged)
        throw SeparationError(
            "fit_selection_model: no convergence (quasi-separation); "
            "clip weights or fall back to uniform weights");

    m.coef.assign(d + 1, 0.0);
    m.coef[0] = beta(0);
    for (std::size_t c = 0; c < cols.size(); ++c)
        m.coef[cols[c] + 1] = beta(static_cast<Eigen::Index>(c + 1));
    return m;
}

struct SampleWeights {
    std::vector<double> values;  // positive, finite, mean 1
    std::size_t clipped_low = 0;
    std::size_t clipped_high = 0;
};

/// Eq.-style density-ratio weights: raw weight exp(-f(x) - log(prior_ratio)),
/// which equals P_B(x)/P_S(x) because the fitted log-odds absorb the class
/// priors; clipped to [1e-3, 1e3], then normalized to mean 1.
inline SampleWeights compute_weights(const SelectionModel& m, const Matrix<float>& X_sur) {
    if (!m.fitted()) throw InvariantError("compute_weights: model not fitted");
    if (X_sur.cols + 1 != m.coef.size()) throw InvariantError("compute_weights: feature count mismatch");
    SampleWeights out;
    out.values.resize(X_sur.rows);
    const double log_prior = std::log(m.prior_ratio);
    double sum = 0.0;
    for (std::size_t i = 0; i < X_sur.rows; ++i) {
        double w = std::exp(-m.decision(X_sur.row(i)) - log_prior);
        if (w < 1e-3) {
            w = 1e-3;
            ++out.clipped_low;
        } else if (w > 1e3) {
            w = 1e3;
            ++out.clipped_high;
        }
        out.values[i] = w;
        sum += w;
    }
    const double inv_mean = static_cast<double>(X_sur.rows) / sum;
    for (auto& w : out.values) w *= inv_mean;
    return out;
}

/// Uniform seeded sample of rows, capped; used for the brain (class B) side.
inline Matrix<float> sample_rows(const Matrix<float>& X, std::size_t cap, std::uint64_t seed) {
    Matrix<float> out;
    out.cols = X.cols;
    if (X.rows <= cap) {
        out.rows = X.rows;
        out.values = X.values;
        return out;
    }
    std::vector<std::size_t> idx(X.rows);
    for (std::size_t i = 0; i < X.rows; ++i) idx[i] = i;
    RandomStream rng(seed);
    out.rows = cap;
    out.values.reserve(cap * X.cols);
    std::size_t remaining = X.rows;
    for (std::size_t i = 0; i < cap; ++i) {
        const std::size_t j = rng.next_below(remaining);
        out.values.insert(out.values.end(), X.row(idx[j]), X.row(idx[j]) + X.cols);
        idx[j] = idx[--remaining];
    }
    return out;
}

inline nlohmann::json weight_summary(const SampleWeights& w) {
    std::vector<double> sorted = w.values;
    std::sort(sorted.begin(), sorted.end());
    auto q = [&](double p) {
        const double pos = p * static_cast<double>(sorted.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        if (lo + 1 >= sorted.size()) return sorted.back();
        const double frac = pos - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
    };
    nlohmann::json j;
    j["count"] = sorted.size();
    j["min"] = sorted.front();
    j["q25"] = q(0.25);
    j["median"] = q(0.5);
    j["q75"] = q(0.75);
    j["max"] = sorted.back();
    j["clipped_low"] = w.clipped_low;
    j["clipped_high"] = w.clipped_high;
    return j;
}

}  // namespace idal
