#pragma once

// Orchestration of the full segmentation system.
//
// Offline: normalize every training case, extract voxel features and case
// statistics, fit density-ratio scribble weights, fill the pairwise
// similarity matrix (train on i, score on j), and fit the retrieval forest
// on the case statistics with distance 1000 * (1 - similarity).
//
// Online: a query is normalized and featurized the same way, the retrieval
// forest picks the top-k most useful training cases, and a fresh voxel
// classifier is trained on just those cases' scribbles before predicting the
// query. Pooled and oracle-selection variants share the same final stage.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include <idal/case.hpp>
#include <idal/core.hpp>
#include <idal/dalsa.hpp>
#include <idal/features.hpp>
#include <idal/forest.hpp>
#include <idal/naf.hpp>
#include <idal/preprocess.hpp>
#include <idal/similarity.hpp>
#include <idal/volume.hpp>

namespace idal {

struct PipelineConfig {
    std::uint64_t seed = 0;
    int threads = 0;  // 0: all available cores
    int top_k = 3;    // training cases selected per query
    int mode_bins = 256;
    std::size_t brain_sample_cap = 100000;  // density-ratio brain rows per case
    std::size_t case_row_cap = 200000;      // scribble rows per case entering a fit
    ForestConfig vc;                        // voxel-classifier base; CV overrides two fields
    CvConfig cv;                            // hyperparameter grids
    NafConfig naf;
};

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
    return nlohmann::json{
        {"seed", c.seed},
        {"threads", c.threads},
        {"top_k", c.top_k},
        {"mode_bins", c.mode_bins},
        {"brain_sample_cap", c.brain_sample_cap},
        {"case_row_cap", c.case_row_cap},
        {"vc",
         {{"n_trees", c.vc.n_trees},
          {"k_features", c.vc.k_features},
          {"min_samples_leaf", c.vc.min_samples_leaf},
          {"max_depth", c.vc.max_depth}}},
        {"cv",
         {{"class_weight_grid", c.cv.class_weight_grid},
          {"min_samples_leaf_grid", c.cv.min_samples_leaf_grid},
          {"n_folds", c.cv.n_folds}}},
        {"naf",
         {{"n_trees", c.naf.n_trees},
          {"n_tests", c.naf.n_tests},
          {"min_samples_leaf", c.naf.min_samples_leaf},
          {"max_depth", c.naf.max_depth}}},
    };
}

// Keys absent from the JSON keep their defaults; unknown keys are rejected so
// a typo in a config file cannot silently fall back to a default.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
    PipelineConfig c;
    auto take = [](const nlohmann::json& obj, const char* key, auto& field) {
        if (obj.contains(key)) obj.at(key).get_to(field);
    };
    auto check_keys = [](const nlohmann::json& obj, std::vector<std::string> known,
                         const char* where) {
        for (const auto& item : obj.items())
            if (std::find(known.begin(), known.end(), item.key()) == known.end())
                throw ConfigError(msg("unknown key '", item.key(), "' in ", where));
    };
    check_keys(j, {"seed", "threads", "top_k", "mode_bins", "brain_sample_cap", "case_row_cap",
                   "vc", "cv", "naf"},
               "pipeline config");
    take(j, "seed", c.seed);
    take(j, "threads", c.threads);
    take(j, "top_k", c.top_k);
    take(j, "mode_bins", c.mode_bins);
    take(j, "brain_sample_cap", c.brain_sample_cap);
    take(j, "case_row_cap", c.case_row_cap);
    if (j.contains("vc")) {
        const auto& v = j.at("vc");
        check_keys(v, {"n_trees", "k_features", "min_samples_leaf", "max_depth"}, "vc config");
        take(v, "n_trees", c.vc.n_trees);
        take(v, "k_features", c.vc.k_features);
        take(v, "min_samples_leaf", c.vc.min_samples_leaf);
        take(v, "max_depth", c.vc.max_depth);
    }
    if (j.contains("cv")) {
        const auto& v = j.at("cv");
        check_keys(v, {"class_weight_grid", "min_samples_leaf_grid", "n_folds"}, "cv config");
        take(v, "class_weight_grid", c.cv.class_weight_grid);
        take(v, "min_samples_leaf_grid", c.cv.min_samples_leaf_grid);
        take(v, "n_folds", c.cv.n_folds);
    }
    if (j.contains("naf")) {
        const auto& v = j.at("naf");
        check_keys(v, {"n_trees", "n_tests", "min_samples_leaf", "max_depth"}, "naf config");
        take(v, "n_trees", c.naf.n_trees);
        take(v, "n_tests", c.naf.n_tests);
        take(v, "min_samples_leaf", c.naf.min_samples_leaf);
        take(v, "max_depth", c.naf.max_depth);
    }
    return c;
}

/// Deterministic per-case stream: one master seed fans out per case id and
/// purpose so no component's draws depend on processing order.
inline std::uint64_t case_seed(std::uint64_t seed, const std::string& case_id,
                               std::uint64_t purpose) {
    return derive_seed(derive_seed(seed, fnv1a(case_id.data(), case_id.size())), purpose);
}

// Everything the online stage may know about a case: normalized modalities,
// per-voxel features, and per-case statistics. Never carries labels.
struct QueryPrep {
    std::string case_id;
    MultiModalCase normalized;
    MaskVolume csf_voxels;  // voxels the normalization step treated as CSF
    VoxelFeatureMatrix features;
    CaseFeatureVector stats{};
};

inline QueryPrep prep_query(const QueryCase& q, const CsfModel* csf, const PipelineConfig& cfg) {
    MultiModalCase c;
    c.case_id = q.case_id;
    c.t1 = q.t1;
    c.t2 = q.t2;
    c.dwi = q.dwi;
    c.flair = q.flair;
    c.brain_mask = q.brain_mask;
    auto norm = normalize_case(c, csf, cfg.mode_bins);
    QueryPrep p;
    p.case_id = q.case_id;
    p.csf_voxels = std::move(norm.csf_voxels);
    p.normalized = std::move(norm.normalized);
    p.features = voxel_features(p.normalized, resolve_threads(cfg.threads));
    p.stats = case_statistics(p.normalized);
    return p;
}

// Training-side prep: the query-visible part plus labeled scribble rows, their
// density-ratio weights, and the ground truth used to score similarity.
struct CasePrep {
    QueryPrep query;
    Matrix<float> sur_x;              // scribble feature rows, scan order
    std::vector<std::uint8_t> sur_y;  // 1 lesion, 0 background
    SampleWeights weights;
    bool uniform_weights = false;  // separation fallback engaged
    MaskVolume gt;
    std::vector<std::uint8_t> gt_rows;  // ground truth at each brain feature row
};

inline CasePrep prep_case(const MultiModalCase& c, const CsfModel* csf,
                          const PipelineConfig& cfg) {
    if (!c.gt.has_value() || !c.sur.has_value())
        throw TrainingError(msg("training case '", c.case_id, "' needs gt and sur volumes"));
    CasePrep p;
    p.query = prep_query(QueryCase::from_case(c), csf, cfg);
    p.gt = *c.gt;

    const auto& map = p.query.features.voxel_index_map;
    p.gt_rows.resize(map.size());
    std::vector<std::size_t> rows;
    std::vector<std::uint8_t> labels;
    for (std::size_t r = 0; r < map.size(); ++r) {
        const auto v = static_cast<std::size_t>(map[r]);
        p.gt_rows[r] = p.gt.data[v] != 0 ? 1 : 0;
        const auto s = static_cast<SurLabel>(c.sur->data[v]);
        if (s == SurLabel::Unlabeled) continue;
        rows.push_back(r);
        labels.push_back(s == SurLabel::Lesion ? 1 : 0);
    }
    if (rows.size() > cfg.case_row_cap) {
        // Seeded subsample, then restored to scan order so CV folds stay
        // spatially contiguous.
        RandomStream rng(case_seed(cfg.seed, c.case_id, 1));
        std::vector<std::size_t> pick(rows.size());
        for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
        for (std::size_t i = 0; i < cfg.case_row_cap; ++i) {
            const std::size_t j = i + rng.next_below(pick.size() - i);
            std::swap(pick[i], pick[j]);
        }
        pick.resize(cfg.case_row_cap);
        std::sort(pick.begin(), pick.end());
        std::vector<std::size_t> kept_rows(pick.size());
        std::vector<std::uint8_t> kept_labels(pick.size());
        for (std::size_t i = 0; i < pick.size(); ++i) {
            kept_rows[i] = rows[pick[i]];
            kept_labels[i] = labels[pick[i]];
        }
        rows = std::move(kept_rows);
        labels = std::move(kept_labels);
    }

    p.sur_x = Matrix<float>(rows.size(), kVoxelFeatureCount);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(p.query.features.values.row(rows[i]), kVoxelFeatureCount, p.sur_x.row(i));
    p.sur_y = std::move(labels);

    const Matrix<float> x_brain =
        sample_rows(p.query.features.values, cfg.brain_sample_cap, case_seed(cfg.seed, c.case_id, 2));
    try {
        const SelectionModel sel = fit_selection_model(p.sur_x, x_brain);
        p.weights = compute_weights(sel, p.sur_x);
    } catch (const SeparationError&) {
        p.weights = SampleWeights{};
        p.weights.values.assign(p.sur_x.rows, 1.0);
        p.uniform_weights = true;
    }
    return p;
}

struct TrainedVc {
    ExtraTreesClassifier forest;
    CvChoice cv;
    std::vector<std::string> trained_on;  // provenance: contributing case ids
};

/// Trains one voxel classifier on the pooled scribbles of the given cases,
/// running hyperparameter selection first. Rows keep per-case grouping so CV
/// folds are contiguous blocks within each case.
inline TrainedVc train_vc(const std::vector<const CasePrep*>& preps, const PipelineConfig& cfg,
                          std::uint64_t seed, int threads) {
    if (preps.empty()) throw TrainingError("train_vc: no training cases");
    std::size_t total = 0;
    for (const auto* p : preps) total += p->sur_x.rows;
    if (total < 2) throw TrainingError("train_vc: fewer than 2 scribble rows");

    Matrix<float> x(total, kVoxelFeatureCount);
    std::vector<std::uint8_t> y(total);
    std::vector<double> w(total);
    std::vector<int> groups(total);
    std::size_t at = 0;
    TrainedVc out;
    for (std::size_t g = 0; g < preps.size(); ++g) {
        const CasePrep& p = *preps[g];
        out.trained_on.push_back(p.query.case_id);
        for (std::size_t i = 0; i < p.sur_x.rows; ++i, ++at) {
            std::copy_n(p.sur_x.row(i), kVoxelFeatureCount, x.row(at));
            y[at] = p.sur_y[i];
            w[at] = p.weights.values[i];
            groups[at] = static_cast<int>(g);
        }
    }
    const bool has0 = std::find(y.begin(), y.end(), std::uint8_t{0}) != y.end();
    const bool has1 = std::find(y.begin(), y.end(), std::uint8_t{1}) != y.end();
    if (!has0 || !has1) throw TrainingError("train_vc: scribbles cover only one class");

    CvConfig cv = cfg.cv;
    cv.base = cfg.vc;
    cv.base.seed = derive_seed(seed, 1);
    cv.base.threads = threads;
    out.cv = cv_select_hparams(x, y, w, groups, cv);

    ForestConfig fc = cfg.vc;
    fc.positive_class_weight = out.cv.positive_class_weight;
    fc.min_samples_leaf = out.cv.min_samples_leaf;
    fc.seed = derive_seed(seed, 2);
    fc.threads = threads;
    out.forest.config = fc;
    out.forest.fit(x, y, w);
    return out;
}

/// Entry (i, j): Dice of the classifier trained on case i's scribbles alone,
/// evaluated against case j's ground truth over j's brain voxels. The
/// diagonal is filled like any other entry; consumers skip it.
inline SimilarityMatrix build_similarity_matrix(const std::vector<CasePrep>& preps,
                                                const PipelineConfig& cfg) {
    SimilarityMatrix sim;
    for (const auto& p : preps) sim.case_ids.push_back(p.query.case_id);
    sim.values = Matrix<double>(preps.size(), preps.size());
    parallel_for(preps.size(), resolve_threads(cfg.threads), [&](std::size_t i) {
        const TrainedVc vc =
            train_vc({&preps[i]}, cfg, case_seed(cfg.seed, preps[i].query.case_id, 3), 1);
        for (std::size_t j = 0; j < preps.size(); ++j) {
            const auto pred = vc.forest.predict(preps[j].query.features.values, 1);
            sim.values.at(i, j) = forest_detail::dice_rows(pred, preps[j].gt_rows);
        }
    });
    return sim;
}

/// Distance for the retrieval forest. The diagonal is pinned to the metric's
/// zero: a case is trivially its own nearest neighbour, even though the
/// trained-on-self Dice is below 1.
inline Matrix<double> similarity_to_distance(const Matrix<double>& s) {
    Matrix<double> d(s.rows, s.cols);
    for (std::size_t i = 0; i < s.rows; ++i)
        for (std::size_t j = 0; j < s.cols; ++j)
            d.at(i, j) = i == j ? 0.0 : to_distance(s.at(i, j));
    return d;
}

struct IdalModel {
    PipelineConfig config;
    std::vector<std::string> case_ids;
    Matrix<double> case_stats;  // per-case statistics, one row per case
    SimilarityMatrix sim;
    NafModel naf;
    CsfModel csf;  // untrained when normalization ran on the percentile heuristic
    bool csf_heuristic = false;
};

struct TrainResult {
    IdalModel model;
    std::vector<CasePrep> preps;  // in case_ids order
};

inline Matrix<double> stack_case_stats(const std::vector<CasePrep>& preps) {
    Matrix<double> stats(preps.size(), kCaseFeatureCount);
    for (std::size_t i = 0; i < preps.size(); ++i)
        std::copy(preps[i].query.stats.begin(), preps[i].query.stats.end(), stats.row(i));
    return stats;
}

inline NafModel fit_retrieval_forest(const Matrix<double>& case_stats, const Matrix<double>& sim,
                                     const PipelineConfig& cfg) {
    NafConfig nc = cfg.naf;
    nc.seed = derive_seed(cfg.seed, 4);
    nc.threads = resolve_threads(cfg.threads);
    NafModel naf;
    naf.fit(case_stats, similarity_to_distance(sim), nc);
    return naf;
}

/// Offline training. `reuse_sim` skips the expensive similarity-matrix
/// rebuild; the reused matrix must cover exactly the given cases in order.
inline TrainResult train_offline(const std::vector<MultiModalCase>& cases,
                                 const PipelineConfig& cfg,
                                 const SimilarityMatrix* reuse_sim = nullptr) {
    if (cases.size() < 2) throw TrainingError("train_offline: need at least 2 training cases");

    TrainResult r;
    r.model.config = cfg;

    std::vector<const MultiModalCase*> with_scribbles;
    for (const auto& c : cases)
        if (c.csf_scribbles.has_value()) with_scribbles.push_back(&c);
    if (with_scribbles.empty()) {
        r.model.csf_heuristic = true;
    } else {
        r.model.csf = fit_csf_model(with_scribbles, derive_seed(cfg.seed, 5),
                                    resolve_threads(cfg.threads));
    }
    const CsfModel* csf = r.model.csf_heuristic ? nullptr : &r.model.csf;

    r.preps.reserve(cases.size());
    for (const auto& c : cases) {
        try {
            r.preps.push_back(prep_case(c, csf, cfg));
        } catch (const TrainingError& e) {
            const std::string what = e.what();
            if (what.find(c.case_id) == std::string::npos)
                throw TrainingError(msg("case '", c.case_id, "': ", what));
            throw;
        }
        r.model.case_ids.push_back(c.case_id);
    }
    r.model.case_stats = stack_case_stats(r.preps);
    if (reuse_sim != nullptr) {
        if (reuse_sim->case_ids != r.model.case_ids)
            throw ConfigError("train_offline: reused similarity matrix lists different cases");
        r.model.sim = *reuse_sim;
    } else {
        r.model.sim = build_similarity_matrix(r.preps, cfg);
    }
    r.model.naf = fit_retrieval_forest(r.model.case_stats, r.model.sim.values, cfg);
    return r;
}

/// Copy of the model with one case's similarity row/column and statistics
/// removed and the retrieval forest refit; the removed case is unknowable to
/// the returned model's selection stage.
inline IdalModel remove_case(const IdalModel& model, const std::string& id) {
    IdalModel sub;
    sub.config = model.config;
    sub.sim = remove_case(model.sim, id);
    sub.case_ids = sub.sim.case_ids;
    sub.csf = model.csf;
    sub.csf_heuristic = model.csf_heuristic;
    const std::size_t drop = model.sim.index_of(id);
    sub.case_stats = Matrix<double>(sub.case_ids.size(), model.case_stats.cols);
    std::size_t r = 0;
    for (std::size_t i = 0; i < model.case_stats.rows; ++i) {
        if (i == drop) continue;
        std::copy_n(model.case_stats.row(i), model.case_stats.cols, sub.case_stats.row(r));
        ++r;
    }
    sub.naf = fit_retrieval_forest(sub.case_stats, sub.sim.values, sub.config);
    return sub;
}

struct SegmentationResult {
    MaskVolume mask;
    std::vector<double> probability;  // per brain feature row, aligned with prep rows
    std::vector<std::string> selected_case_ids;
    nlohmann::json provenance;
};

/// Borrowing view over prepared training cases; segmentation entry points
/// take this so callers can exclude cases without copying preps.
using PrepView = std::vector<const CasePrep*>;

inline PrepView make_prep_view(const std::vector<CasePrep>& preps,
                               const std::string& exclude_id = {}) {
    PrepView view;
    view.reserve(preps.size());
    for (const auto& p : preps)
        if (p.query.case_id != exclude_id) view.push_back(&p);
    return view;
}

namespace pipeline_detail {

inline const CasePrep* find_prep(const PrepView& preps, const std::string& id) {
    for (const auto* p : preps)
        if (p->query.case_id == id) return p;
    throw TrainingError(msg("no prepared training case '", id, "'"));
}

}  // namespace pipeline_detail

/// Final stage shared by every selection method: train one voxel classifier
/// on the selected cases and predict the query's brain voxels.
inline SegmentationResult segment_with_selection(const PipelineConfig& cfg, const PrepView& preps,
                                                 const std::vector<std::string>& selected,
                                                 const QueryPrep& query, const char* method,
                                                 std::uint64_t seed) {
    std::vector<const CasePrep*> chosen;
    nlohmann::json weight_notes = nlohmann::json::array();
    for (const auto& id : selected) {
        chosen.push_back(pipeline_detail::find_prep(preps, id));
        if (chosen.back()->uniform_weights) weight_notes.push_back(id);
    }
    const int threads = resolve_threads(cfg.threads);
    const TrainedVc vc = train_vc(chosen, cfg, seed, threads);

    SegmentationResult res;
    res.selected_case_ids = selected;
    res.probability = vc.forest.predict_proba_positive(query.features.values, threads);

    const MaskVolume& brain = query.normalized.brain_mask;
    res.mask.dims = brain.dims;
    res.mask.spacing = brain.spacing;
    res.mask.meta = brain.meta;
    res.mask.data.assign(brain.data.size(), 0);
    const auto& map = query.features.voxel_index_map;
    for (std::size_t r = 0; r < map.size(); ++r)
        if (res.probability[r] >= 0.5) res.mask.data[static_cast<std::size_t>(map[r])] = 1;

    const auto& np = query.normalized.normalization;
    res.provenance = nlohmann::json{
        {"query", query.case_id},
        {"method", method},
        {"selected", selected},
        {"seed", seed},
        {"threshold", 0.5},
        {"feature_layout_version", kFeatureLayoutVersion},
        {"cv",
         {{"positive_class_weight", vc.cv.positive_class_weight},
          {"min_samples_leaf", vc.cv.min_samples_leaf},
          {"weight_stage_dice", vc.cv.weight_stage_dice},
          {"leaf_stage_dice", vc.cv.leaf_stage_dice}}},
        {"uniform_weight_cases", weight_notes},
        {"config", pipeline_config_to_json(cfg)},
    };
    if (np.has_value()) {
        res.provenance["normalization"] = {
            {"csf_mode", np->csf_mode},
            {"brain_mode", np->brain_mode},
            {"heuristic_csf", np->heuristic_csf},
        };
    }
    return res;
}

/// Retrieval-forest case selection for an arbitrary query.
inline std::vector<std::string> select_cases(const IdalModel& model,
                                             const CaseFeatureVector& stats, int top_k) {
    const std::size_t k =
        std::min<std::size_t>(static_cast<std::size_t>(std::max(top_k, 0)), model.naf.n_rows);
    if (k == 0) throw ConfigError("select_cases: top_k must be at least 1");
    const auto neighbors =
        model.naf.retrieve_neighbors(std::vector<double>(stats.begin(), stats.end()), k);
    std::vector<std::string> ids;
    ids.reserve(neighbors.size());
    for (const auto& n : neighbors) ids.push_back(model.case_ids[static_cast<std::size_t>(n.id)]);
    return ids;
}

inline SegmentationResult segment(const IdalModel& model, const PrepView& preps,
                                  const QueryPrep& query) {
    const auto selected = select_cases(model, query.stats, model.config.top_k);
    return segment_with_selection(model.config, preps, selected, query, "idal",
                                  case_seed(model.config.seed, query.case_id, 6));
}

/// Baseline: one classifier over every available training case.
inline SegmentationResult segment_pooled(const IdalModel& model, const PrepView& preps,
                                         const QueryPrep& query) {
    std::vector<std::string> all;
    for (const auto* p : preps) all.push_back(p->query.case_id);
    return segment_with_selection(model.config, preps, all, query, "pooled",
                                  case_seed(model.config.seed, query.case_id, 7));
}

/// Upper bound: selection reads the true similarity column of the target,
/// which requires the target to be a case of the similarity matrix. Self is
/// excluded; ties resolve to the lower row index (matrix order).
inline std::vector<std::string> select_cases_oracle(const SimilarityMatrix& sim,
                                                    const std::string& target_id, int top_k) {
    const std::size_t target = sim.index_of(target_id);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < sim.size(); ++i)
        if (i != target) rows.push_back(i);
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(top_k, 0)),
                                                rows.size());
    if (k == 0) throw ConfigError("select_cases_oracle: top_k must be at least 1");
    std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
        return sim.values.at(a, target) > sim.values.at(b, target);
    });
    rows.resize(k);
    std::vector<std::string> ids;
    for (const auto i : rows) ids.push_back(sim.case_ids[i]);
    return ids;
}

inline SegmentationResult segment_oracle(const IdalModel& model, const PrepView& preps,
                                         const QueryPrep& query) {
    const auto selected = select_cases_oracle(model.sim, query.case_id, model.config.top_k);
    return segment_with_selection(model.config, preps, selected, query, "oracle",
                                  case_seed(model.config.seed, query.case_id, 8));
}

// Model directory layout: idal.json (config, case ids, case statistics),
// naf.bin, optional csf_forest.bin, sim_matrix.csv.
inline void save_model(const IdalModel& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    model.naf.save_file((dir / "naf.bin").string());
    if (model.csf.trained()) {
        std::ofstream out(dir / "csf_forest.bin", std::ios::binary);
        if (!out) throw IoError(msg("cannot open '", (dir / "csf_forest.bin").string(), "'"));
        model.csf.forest.save(out, {{"train_accuracy", model.csf.train_accuracy}});
    }
    save_similarity_csv(model.sim, dir / "sim_matrix.csv");

    nlohmann::json j;
    j["format_version"] = 1;
    j["config"] = pipeline_config_to_json(model.config);
    j["case_ids"] = model.case_ids;
    j["csf_heuristic"] = model.csf_heuristic;
    j["csf_train_accuracy"] = model.csf.trained() ? model.csf.train_accuracy : 0.0;
    auto stats = nlohmann::json::array();
    for (std::size_t i = 0; i < model.case_stats.rows; ++i) {
        auto row = nlohmann::json::array();
        for (std::size_t c = 0; c < model.case_stats.cols; ++c)
            row.push_back(model.case_stats.at(i, c));
        stats.push_back(std::move(row));
    }
    j["case_stats"] = std::move(stats);
    std::ofstream out(dir / "idal.json", std::ios::binary);
    if (!out) throw IoError(msg("cannot open '", (dir / "idal.json").string(), "'"));
    out << j.dump(2) << '\n';
    if (!out) throw IoError("model save: write failed");
}

inline IdalModel load_model(const std::filesystem::path& dir) {
    std::ifstream in(dir / "idal.json", std::ios::binary);
    if (!in) throw IoError(msg("cannot open '", (dir / "idal.json").string(), "'"));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(msg("model load: bad idal.json (", e.what(), ")"));
    }
    if (j.value("format_version", 0) != 1) throw IoError("model load: unsupported format version");

    IdalModel model;
    model.config = pipeline_config_from_json(j.at("config"));
    j.at("case_ids").get_to(model.case_ids);
    model.csf_heuristic = j.value("csf_heuristic", false);
    const auto& stats = j.at("case_stats");
    if (!stats.is_array() || stats.size() != model.case_ids.size())
        throw IoError("model load: case_stats shape mismatch");
    model.case_stats = Matrix<double>(stats.size(), kCaseFeatureCount);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        const auto& row = stats.at(i);
        if (!row.is_array() || row.size() != kCaseFeatureCount)
            throw IoError("model load: case_stats row width mismatch");
        for (std::size_t c = 0; c < kCaseFeatureCount; ++c)
            model.case_stats.at(i, c) = row.at(c).get<double>();
    }

    model.naf.load_file((dir / "naf.bin").string());
    if (std::filesystem::exists(dir / "csf_forest.bin")) {
        std::ifstream cin(dir / "csf_forest.bin", std::ios::binary);
        if (!cin) throw IoError("model load: cannot open csf_forest.bin");
        nlohmann::json header;
        model.csf.forest.load(cin, &header);
        model.csf.train_accuracy = header.value("train_accuracy", 0.0);
    } else if (!model.csf_heuristic) {
        throw IoError("model load: csf_forest.bin missing but model is not heuristic");
    }
    model.sim = load_similarity_csv(dir / "sim_matrix.csv");
    if (model.sim.case_ids != model.case_ids)
        throw IoError("model load: sim_matrix.csv case ids disagree with idal.json");
    return model;
}

}  // namespace idal
