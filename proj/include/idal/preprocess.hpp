#pragma once

#include <algorithm>
#include <vector>

#include "idal/case.hpp"
#include "idal/forest.hpp"

namespace idal {

// Mode-based linear intensity normalization: per modality, CSF mode maps to 0
// and whole-brain mode to 1. The CSF area comes from a small intensity-only
// forest, or from a T2-hyperintensity heuristic when no scribbles exist.

namespace preprocess_detail {

/// Linear-interpolation percentile (p in [0,100]) of an unsorted sample.
inline double percentile(std::vector<double> v, double p) {
    if (v.empty()) throw InvariantError("percentile of empty sample");
    std::sort(v.begin(), v.end());
    const double pos = (p / 100.0) * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= v.size()) return v.back();
    const double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

}  // namespace preprocess_detail

/// Center of the most populated histogram bin over the [p1, p99] range of the
/// sample. Samples outside the clipped range are dropped, which keeps small
/// far-away populations from hijacking an edge bin. Ties pick the lowest bin.
inline double estimate_mode(const std::vector<double>& samples, int bins = 256) {
    if (samples.empty()) throw InvariantError("estimate_mode: empty sample");
    if (bins < 2) throw ConfigError("estimate_mode: bins must be >= 2");
    const double lo = preprocess_detail::percentile(samples, 1.0);
    const double hi = preprocess_detail::percentile(samples, 99.0);
    if (!(lo < hi)) return lo;  // degenerate histogram (near-constant sample)

    std::vector<std::size_t> hist(static_cast<std::size_t>(bins), 0);
    const double width = (hi - lo) / bins;
    for (const double x : samples) {
        if (x < lo || x > hi) continue;
        auto b = static_cast<std::size_t>((x - lo) / width);
        if (b >= hist.size()) b = hist.size() - 1;
        ++hist[b];
    }
    std::size_t best = 0;
    for (std::size_t b = 1; b < hist.size(); ++b)
        if (hist[b] > hist[best]) best = b;
    return lo + (static_cast<double>(best) + 0.5) * width;
}

/// Intensity-only CSF detector: a small forest over the four raw modality
/// values of a voxel.
struct CsfModel {
    ExtraTreesClassifier forest;  // class 1 = CSF
    double train_accuracy = 0.0;

    bool trained() const { return forest.trained(); }

    /// CSF prediction over brain-mask voxels of a raw (unnormalized) case.
    MaskVolume predict_mask(const MultiModalCase& c) const {
        if (!trained()) throw InvariantError("CsfModel: not trained");
        MaskVolume out;
        out.dims = c.brain_mask.dims;
        out.spacing = c.brain_mask.spacing;
        out.meta = c.brain_mask.meta;
        out.data.assign(c.brain_mask.data.size(), 0);
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            if (!c.brain_mask.data[i]) continue;
            const float row[4] = {c.t1.data[i], c.t2.data[i], c.dwi.data[i], c.flair.data[i]};
            out.data[i] = forest.predict_proba_one(row)[1] >= 0.5 ? 1 : 0;
        }
        return out;
    }
};

inline CsfModel fit_csf_model(const std::vector<const MultiModalCase*>& cases,
                              std::uint64_t seed = 0, int threads = 1) {
    Matrix<float> X;
    X.cols = 4;
    std::vector<std::uint8_t> y;
    for (const auto* c : cases) {
        if (c == nullptr || !c->csf_scribbles) continue;
        const auto& s = c->csf_scribbles->data;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == static_cast<std::uint8_t>(CsfLabel::Unlabeled)) continue;
            X.values.push_back(c->t1.data[i]);
            X.values.push_back(c->t2.data[i]);
            X.values.push_back(c->dwi.data[i]);
            X.values.push_back(c->flair.data[i]);
            y.push_back(s[i] == static_cast<std::uint8_t>(CsfLabel::Csf) ? 1 : 0);
        }
    }
    X.rows = y.size();
    if (y.empty()) throw TrainingError("fit_csf_model: no CSF scribbles in any case");
    const bool has_csf = std::find(y.begin(), y.end(), 1) != y.end();
    const bool has_other = std::find(y.begin(), y.end(), 0) != y.end();
    if (!has_csf || !has_other)
        throw TrainingError("fit_csf_model: scribbles cover only one class");

    CsfModel model;
    model.forest.config.n_trees = 10;
    model.forest.config.min_samples_leaf = 1;
    model.forest.config.seed = seed;
    model.forest.config.threads = threads;
    model.forest.fit(X, y);

    const auto pred = model.forest.predict(X, threads);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
    model.train_accuracy = static_cast<double>(correct) / static_cast<double>(y.size());
    return model;
}

struct NormalizeResult {
    MultiModalCase normalized;
    MaskVolume csf_voxels;  // the CSF area the modes were estimated on
};

/// Maps each modality so the CSF mode lands at 0 and the whole-brain mode at
/// 1; voxels outside the brain mask become 0. With no model (or an untrained
/// one), CSF voxels are approximated as brain voxels whose T2 intensity
/// exceeds its 90th percentile, flagged as heuristic in the provenance.
inline NormalizeResult normalize_case(const MultiModalCase& c, const CsfModel* model = nullptr,
                                      int bins = 256) {
    const std::size_t n = c.brain_mask.data.size();
    if (count_nonzero(c.brain_mask) == 0) throw InvariantError(msg(c.case_id, ": empty brain mask"));

    NormalizeResult res;
    const bool heuristic = model == nullptr || !model->trained();
    if (heuristic) {
        std::vector<double> t2_brain;
        for (std::size_t i = 0; i < n; ++i)
            if (c.brain_mask.data[i]) t2_brain.push_back(c.t2.data[i]);
        const double thr = preprocess_detail::percentile(t2_brain, 90.0);
        res.csf_voxels = c.brain_mask;
        for (std::size_t i = 0; i < n; ++i)
            res.csf_voxels.data[i] = c.brain_mask.data[i] && c.t2.data[i] > thr ? 1 : 0;
    } else {
        res.csf_voxels = model->predict_mask(c);
    }
    if (count_nonzero(res.csf_voxels) == 0)
        throw InvariantError(msg(c.case_id, ": CSF prediction is empty"));

    res.normalized = c;
    NormalizationParams params;
    params.heuristic_csf = heuristic;

    const std::array<const Volume*, 4> in{&c.t1, &c.t2, &c.dwi, &c.flair};
    const std::array<Volume*, 4> out{&res.normalized.t1, &res.normalized.t2,
                                     &res.normalized.dwi, &res.normalized.flair};
    std::vector<double> csf_vals, brain_vals;
    for (std::size_t m = 0; m < 4; ++m) {
        csf_vals.clear();
        brain_vals.clear();
        for (std::size_t i = 0; i < n; ++i) {
            if (!c.brain_mask.data[i]) continue;
            brain_vals.push_back(in[m]->data[i]);
            if (res.csf_voxels.data[i]) csf_vals.push_back(in[m]->data[i]);
        }
        const double csf_mode = estimate_mode(csf_vals, bins);
        const double brain_mode = estimate_mode(brain_vals, bins);
        if (csf_mode == brain_mode)
            throw InvariantError(msg(c.case_id, ": modality ", m,
                                     " has csf_mode == brain_mode (no contrast)"));
        params.csf_mode[m] = csf_mode;
        params.brain_mode[m] = brain_mode;

        const double scale = 1.0 / (brain_mode - csf_mode);
        for (std::size_t i = 0; i < n; ++i)
            out[m]->data[i] = c.brain_mask.data[i]
                                  ? static_cast<float>((in[m]->data[i] - csf_mode) * scale)
                                  : 0.0f;
    }
    res.normalized.normalization = params;
    return res;
}

}  // namespace idal
