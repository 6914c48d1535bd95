#pragma once

// Evaluation harness: Dice scoring, the leave-one-out experiment over the
// three selection methods (retrieval forest, pooled baseline, oracle
// selection), and report files.
//
// Report formats are part of the external interface:
//   loo_report.csv  schema v1: case_id,method,dice,selected_ids,seconds
//   sim_matrix.csv  schema v1: row,column,similarity,sc_selected
//   summary.json    per-method mean, population stddev, midpoint median

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include <idal/core.hpp>
#include <idal/pipeline.hpp>
#include <idal/similarity.hpp>
#include <idal/volume.hpp>

namespace idal {

/// Raised when an experiment's preconditions are not met (distinct from
/// ConfigError so the CLI can map it to its own exit code).
struct EvalError : Error {
    using Error::Error;
};

inline double dice(const MaskVolume& a, const MaskVolume& b) {
    require_same_geometry(a, b, "dice");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        na += a.data[i] != 0;
        nb += b.data[i] != 0;
        inter += a.data[i] != 0 && b.data[i] != 0;
    }
    if (na + nb == 0) return 1.0;  // two empty masks agree perfectly
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

struct ScoreSummary {
    std::size_t count = 0;
    double mean = 0.0;
    double stddev = 0.0;  // population
    double median = 0.0;  // midpoint of the two central values when even
};

inline ScoreSummary summarize(std::vector<double> scores) {
    if (scores.empty()) throw EvalError("summarize: no scores");
    ScoreSummary s;
    s.count = scores.size();
    for (const double v : scores) s.mean += v;
    s.mean /= static_cast<double>(s.count);
    for (const double v : scores) s.stddev += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(s.stddev / static_cast<double>(s.count));
    std::sort(scores.begin(), scores.end());
    const std::size_t mid = s.count / 2;
    s.median = s.count % 2 == 1 ? scores[mid] : 0.5 * (scores[mid - 1] + scores[mid]);
    return s;
}

struct LooRecord {
    std::string case_id;
    std::string method;
    double dice = 0.0;
    std::vector<std::string> selected_ids;
    double seconds = 0.0;
    nlohmann::json provenance;
};

struct LooReport {
    std::vector<LooRecord> records;
    SimilarityMatrix sim;          // full matrix, diagonal included
    Matrix<std::uint8_t> sc_flags;  // (i, j) = 1 when the SC picked i for target j
    double sc_hit_rate = 0.0;      // fraction of SC picks inside the true top-k
};

/// Fraction of SC picks that land in the target's true top-k similarity
/// column (self excluded). Marks picked (trained-on, target) pairs in flags.
inline double evaluate_sc_selection(const SimilarityMatrix& sim,
                                    const std::vector<LooRecord>& records, int top_k,
                                    Matrix<std::uint8_t>& flags) {
    flags = Matrix<std::uint8_t>(sim.size(), sim.size());
    std::size_t hits = 0, picks = 0;
    for (const auto& rec : records) {
        if (rec.method != "idal") continue;
        const std::size_t target = sim.index_of(rec.case_id);
        const auto best = select_cases_oracle(sim, rec.case_id, top_k);
        for (const auto& id : rec.selected_ids) {
            flags.at(sim.index_of(id), target) = 1;
            ++picks;
            hits += std::find(best.begin(), best.end(), id) != best.end();
        }
    }
    return picks == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(picks);
}

/// Leave-one-out over all cases. The expensive artifacts (preps and the full
/// similarity matrix) are built once; per held-out case the retrieval forest
/// is refit on the matrix with that case's row and column removed, so the SC
/// never sees the held-out case.
inline LooReport leave_one_out(const std::vector<MultiModalCase>& cases,
                               const PipelineConfig& cfg,
                               const std::vector<std::string>& methods = {"idal", "pooled",
                                                                          "oracle"}) {
    if (cases.size() < 4)
        throw EvalError(msg("leave_one_out: need at least 4 cases, got ", cases.size()));
    for (const auto& m : methods)
        if (m != "idal" && m != "pooled" && m != "oracle")
            throw EvalError(msg("leave_one_out: unknown method '", m, "'"));

    const TrainResult tr = train_offline(cases, cfg);
    LooReport report;
    report.sim = tr.model.sim;

    using clock = std::chrono::steady_clock;
    auto run = [&](const std::string& method, const std::string& held_id, const MaskVolume& gt,
                   auto&& produce) {
        const auto t0 = clock::now();
        SegmentationResult seg = produce();
        const auto t1 = clock::now();
        LooRecord rec;
        rec.case_id = held_id;
        rec.method = method;
        rec.selected_ids = seg.selected_case_ids;
        rec.seconds = std::chrono::duration<double>(t1 - t0).count();
        rec.provenance = std::move(seg.provenance);
        rec.dice = dice(seg.mask, gt);
        report.records.push_back(std::move(rec));
    };

    for (std::size_t c = 0; c < tr.preps.size(); ++c) {
        const std::string held_id = tr.preps[c].query.case_id;
        const QueryPrep& query = tr.preps[c].query;
        const MaskVolume& held_gt = tr.preps[c].gt;
        const PrepView train_view = make_prep_view(tr.preps, held_id);

        for (const auto& method : methods) {
            if (method == "idal") {
                run(method, held_id, held_gt, [&] {
                    // Reduced model: the SC is refit without the held-out
                    // row and column.
                    const IdalModel sub = remove_case(tr.model, held_id);
                    SegmentationResult seg = segment(sub, train_view, query);
                    seg.provenance["sc_case_ids"] = sub.case_ids;
                    return seg;
                });
            } else if (method == "pooled") {
                run(method, held_id, held_gt, [&] {
                    IdalModel stub;
                    stub.config = cfg;
                    return segment_pooled(stub, train_view, query);
                });
            } else {
                run(method, held_id, held_gt, [&] {
                    // Oracle selection reads the held-out case's column of
                    // the full matrix; training still excludes the case.
                    const auto selected =
                        select_cases_oracle(tr.model.sim, held_id, cfg.top_k);
                    return segment_with_selection(cfg, train_view, selected, query, "oracle",
                                                  case_seed(cfg.seed, held_id, 8));
                });
            }
        }
    }

    report.sc_hit_rate =
        evaluate_sc_selection(report.sim, report.records, cfg.top_k, report.sc_flags);
    return report;
}

inline void write_loo_report_csv(const LooReport& report, const std::filesystem::path& path) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(msg("cannot open '", path.string(), "' for writing"));
    out << "# loo_report schema v1\n";
    out << "case_id,method,dice,selected_ids,seconds\n";
    char buf[64];
    for (const auto& rec : report.records) {
        std::string joined;
        for (const auto& id : rec.selected_ids) {
            if (!joined.empty()) joined += ';';
            joined += id;
        }
        std::snprintf(buf, sizeof buf, "%.17g", rec.dice);
        out << rec.case_id << ',' << rec.method << ',' << buf << ',' << joined << ',';
        std::snprintf(buf, sizeof buf, "%.6g", rec.seconds);
        out << buf << '\n';
    }
    if (!out) throw IoError(msg("short write to '", path.string(), "'"));
}

inline nlohmann::json summary_json(const LooReport& report) {
    nlohmann::json methods = nlohmann::json::object();
    std::vector<std::string> seen;
    for (const auto& rec : report.records)
        if (std::find(seen.begin(), seen.end(), rec.method) == seen.end())
            seen.push_back(rec.method);
    for (const auto& method : seen) {
        std::vector<double> scores;
        for (const auto& rec : report.records)
            if (rec.method == method) scores.push_back(rec.dice);
        const ScoreSummary s = summarize(scores);
        methods[method] = {{"count", s.count},
                           {"mean", s.mean},
                           {"stddev", s.stddev},
                           {"median", s.median}};
    }
    return nlohmann::json{{"schema_version", 1},
                          {"methods", methods},
                          {"sc_hit_rate", report.sc_hit_rate}};
}

/// Writes loo_report.csv, sim_matrix.csv (with SC pick flags), and
/// summary.json into the output directory.
inline void write_reports(const LooReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_loo_report_csv(report, dir / "loo_report.csv");
    save_similarity_csv(report.sim, dir / "sim_matrix.csv",
                        report.sc_flags.empty() ? nullptr : &report.sc_flags);
    std::ofstream out(dir / "summary.json", std::ios::binary);
    if (!out) throw IoError(msg("cannot open '", (dir / "summary.json").string(), "'"));
    out << summary_json(report).dump(2) << '\n';
    if (!out) throw IoError("summary.json: write failed");
}

}  // namespace idal
