// Command-line surface: synth, train, segment, loo.
//
// Exit codes: 0 ok, 1 unexpected internal error, 2 configuration or input
// error, 3 training failure, 4 segmentation failure, 5 evaluation
// preconditions not met.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <idal/idal.hpp>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTraining = 3;
constexpr int kExitSegmentation = 4;
constexpr int kExitEvaluation = 5;

struct PipeFlags {
    std::string config_path;
    std::uint64_t seed = 0;
    int threads = 0;
    int top_k = 3;
    int trees = 50;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* threads_opt = nullptr;
    CLI::Option* k_opt = nullptr;
    CLI::Option* trees_opt = nullptr;
};

void add_pipe_flags(CLI::App* cmd, PipeFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file; explicit flags override it");
    f.seed_opt = cmd->add_option("--seed", f.seed, "master seed (default 0)");
    f.threads_opt =
        cmd->add_option("--threads", f.threads, "worker threads (default 0: all cores)");
    f.k_opt = cmd->add_option("-k,--top-k", f.top_k, "training cases selected per query");
    f.trees_opt = cmd->add_option("--trees", f.trees, "voxel-classifier tree count");
}

idal::PipelineConfig resolve_config(const PipeFlags& f) {
    idal::PipelineConfig cfg;
    if (!f.config_path.empty()) {
        std::ifstream in(f.config_path);
        if (!in) throw idal::IoError(idal::msg("cannot open config file '", f.config_path, "'"));
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw idal::ConfigError(
                idal::msg("bad JSON in '", f.config_path, "': ", e.what()));
        }
        cfg = idal::pipeline_config_from_json(j);
    }
    if (f.seed_opt->count() > 0) cfg.seed = f.seed;
    if (f.threads_opt->count() > 0) cfg.threads = f.threads;
    if (f.k_opt->count() > 0) cfg.top_k = f.top_k;
    if (f.trees_opt->count() > 0) cfg.vc.n_trees = f.trees;
    if (cfg.top_k < 1) throw idal::ConfigError("top_k must be at least 1");
    return cfg;
}

std::vector<idal::MultiModalCase> load_cases(const idal::Manifest& manifest,
                                             const std::string& exclude_id = {}) {
    std::vector<idal::MultiModalCase> cases;
    for (const auto& entry : manifest.cases) {
        if (entry.id == exclude_id) continue;
        cases.push_back(idal::load_case(entry));
    }
    return cases;
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw idal::IoError(idal::msg("cannot open '", path.string(), "' for writing"));
    out << j.dump(2) << '\n';
    if (!out) throw idal::IoError(idal::msg("short write to '", path.string(), "'"));
}

struct SynthFlags {
    std::string out;
    int cases = 18;
    int clusters = 3;
    std::uint64_t seed = 0;
    int dim = 48;
    double noise_sigma = 0.04;
    std::vector<int> lesions;     // min max
    std::vector<double> radius;   // min max, mm
    int threads = 0;
};

int cmd_synth(const SynthFlags& f) {
    idal::SynthConfig cfg;
    cfg.n_cases = f.cases;
    cfg.n_clusters = f.clusters;
    cfg.seed = f.seed;
    cfg.dims = {f.dim, f.dim, f.dim};
    cfg.noise_sigma = f.noise_sigma;
    if (!f.lesions.empty()) cfg.lesion_count_range = {f.lesions[0], f.lesions[1]};
    if (!f.radius.empty()) cfg.lesion_radius_range = {f.radius[0], f.radius[1]};
    const auto result = idal::generate_dataset(cfg, f.out, f.threads);
    std::cout << "wrote " << result.cases.size() << " cases to " << f.out << "\n";
    return kExitOk;
}

struct TrainFlags {
    std::string manifest;
    std::string out;
    std::string reuse_sim;
    PipeFlags pipe;
};

int cmd_train(const TrainFlags& f) {
    const auto cfg = resolve_config(f.pipe);
    const auto manifest = idal::load_manifest(f.manifest);
    const auto cases = load_cases(manifest);

    idal::SimilarityMatrix reused;
    const idal::SimilarityMatrix* reuse = nullptr;
    if (!f.reuse_sim.empty()) {
        reused = idal::load_similarity_csv(f.reuse_sim);
        reuse = &reused;
    }
    const auto result = idal::train_offline(cases, cfg, reuse);
    idal::save_model(result.model, f.out);
    std::cout << "trained on " << result.model.case_ids.size() << " cases; model written to "
              << f.out << "\n";
    if (result.model.csf_heuristic)
        std::cout << "note: no CSF scribbles found, normalization uses the intensity heuristic\n";
    return kExitOk;
}

struct SegmentFlags {
    std::string manifest;
    std::string model_dir;
    std::string target;
    std::string out;
    std::string method = "idal";
    PipeFlags pipe;
};

int cmd_segment(const SegmentFlags& f) {
    if (f.method != "idal" && f.method != "pooled" && f.method != "oracle")
        throw idal::ConfigError(idal::msg("unknown method '", f.method, "'"));
    if (f.method != "pooled" && f.model_dir.empty())
        throw idal::ConfigError(idal::msg("--method ", f.method, " requires --model"));

    idal::PipelineConfig cfg;
    idal::IdalModel model;
    if (!f.model_dir.empty()) {
        model = idal::load_model(f.model_dir);
        cfg = model.config;
        // Explicit flags still override the stored config.
        if (f.pipe.seed_opt->count() > 0) cfg.seed = f.pipe.seed;
        if (f.pipe.threads_opt->count() > 0) cfg.threads = f.pipe.threads;
        if (f.pipe.k_opt->count() > 0) cfg.top_k = f.pipe.top_k;
        if (f.pipe.trees_opt->count() > 0) cfg.vc.n_trees = f.pipe.trees;
        if (cfg.top_k < 1) throw idal::ConfigError("top_k must be at least 1");
        model.config = cfg;
    } else {
        cfg = resolve_config(f.pipe);
    }

    const auto manifest = idal::load_manifest(f.manifest);
    const auto target_case = idal::load_case(manifest.find(f.target));
    const auto query_case = idal::QueryCase::from_case(target_case);

    // Training cases: everything except the target.
    auto cases = load_cases(manifest, f.target);
    if (cases.empty()) throw idal::TrainingError("no training cases besides the target");

    const idal::CsfModel* csf = nullptr;
    idal::CsfModel fitted_csf;
    if (!f.model_dir.empty() && model.csf.trained()) {
        csf = &model.csf;
    } else {
        std::vector<const idal::MultiModalCase*> with_scribbles;
        for (const auto& c : cases)
            if (c.csf_scribbles.has_value()) with_scribbles.push_back(&c);
        if (!with_scribbles.empty()) {
            fitted_csf = idal::fit_csf_model(with_scribbles, idal::derive_seed(cfg.seed, 5),
                                             idal::resolve_threads(cfg.threads));
            csf = &fitted_csf;
        }
    }

    std::vector<idal::CasePrep> preps;
    for (const auto& c : cases) {
        if (!c.gt.has_value() || !c.sur.has_value()) continue;
        preps.push_back(idal::prep_case(c, csf, cfg));
    }
    if (preps.empty()) throw idal::TrainingError("no training cases carry gt and sur volumes");
    const idal::PrepView view = idal::make_prep_view(preps);

    idal::SegmentationResult seg;
    try {
        const auto query = idal::prep_query(query_case, csf, cfg);
        if (f.method == "idal") {
            idal::IdalModel selection_model = std::move(model);
            const auto& known = selection_model.case_ids;
            if (std::find(known.begin(), known.end(), f.target) != known.end())
                selection_model = idal::remove_case(selection_model, f.target);
            seg = idal::segment(selection_model, view, query);
        } else if (f.method == "pooled") {
            idal::IdalModel stub;
            stub.config = cfg;
            seg = idal::segment_pooled(stub, view, query);
        } else {
            const auto& known = model.sim.case_ids;
            if (std::find(known.begin(), known.end(), f.target) == known.end()) {
                std::cerr << "error: oracle selection needs the target's ground-truth "
                             "similarity column; case '"
                          << f.target << "' is not in the model's similarity matrix\n";
                return kExitSegmentation;
            }
            const auto selected = idal::select_cases_oracle(model.sim, f.target, cfg.top_k);
            seg = idal::segment_with_selection(cfg, view, selected, query, "oracle",
                                               idal::case_seed(cfg.seed, f.target, 8));
        }
    } catch (const idal::TrainingError&) {
        throw;
    } catch (const idal::Error& e) {
        std::cerr << "error: segmentation failed: " << e.what() << "\n";
        return kExitSegmentation;
    }

    const std::filesystem::path out_dir(f.out);
    const std::string stem = f.target + "_" + f.method;
    idal::write_mask(seg.mask, (out_dir / (stem + "_mask.nii.gz")).string(), target_case.t1);
    write_json(seg.provenance, out_dir / (stem + "_provenance.json"));
    std::cout << "segmented '" << f.target << "' with method " << f.method << "; selected:";
    for (const auto& id : seg.selected_case_ids) std::cout << ' ' << id;
    std::cout << "\n";
    return kExitOk;
}

struct LooFlags {
    std::string manifest;
    std::string out;
    std::string methods = "idal,pooled,oracle";
    PipeFlags pipe;
};

int cmd_loo(const LooFlags& f) {
    const auto cfg = resolve_config(f.pipe);
    const auto manifest = idal::load_manifest(f.manifest);
    const auto cases = load_cases(manifest);

    std::vector<std::string> methods;
    std::stringstream ss(f.methods);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) methods.push_back(tok);
    if (methods.empty()) throw idal::ConfigError("--methods selected nothing");

    const auto report = idal::leave_one_out(cases, cfg, methods);
    idal::write_reports(report, f.out);

    const auto summary = idal::summary_json(report);
    for (const auto& item : summary.at("methods").items()) {
        const auto& s = item.value();
        std::cout << item.key() << ": mean dice " << s.at("mean").get<double>() << ", median "
                  << s.at("median").get<double>() << " over " << s.at("count").get<std::size_t>()
                  << " cases\n";
    }
    std::cout << "sc hit rate: " << report.sc_hit_rate << "\n";
    std::cout << "reports written to " << f.out << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lesion segmentation with input-adaptive training-case selection"};
    app.require_subcommand(1);

    SynthFlags synth_flags;
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--out", synth_flags.out, "output directory")->required();
    synth->add_option("--cases", synth_flags.cases, "number of cases (default 18)");
    synth->add_option("--clusters", synth_flags.clusters,
                      "number of appearance clusters (default 3)");
    synth->add_option("--seed", synth_flags.seed, "master seed (default 0)");
    synth->add_option("--dim", synth_flags.dim, "cubic volume edge length (default 48)");
    synth->add_option("--lesions", synth_flags.lesions, "lesion count range: MIN MAX")
        ->expected(2);
    synth->add_option("--radius", synth_flags.radius, "lesion radius range in mm: MIN MAX")
        ->expected(2);
    synth->add_option("--noise-sigma", synth_flags.noise_sigma,
                      "additive noise level (default 0.04)");
    synth->add_option("--threads", synth_flags.threads, "worker threads (default 0: all cores)");

    TrainFlags train_flags;
    auto* train = app.add_subcommand("train", "train the offline model from a manifest");
    train->add_option("--manifest", train_flags.manifest, "dataset manifest")->required();
    train->add_option("--out", train_flags.out, "model output directory")->required();
    train->add_option("--reuse-sim", train_flags.reuse_sim,
                      "reuse a previously computed sim_matrix.csv");
    add_pipe_flags(train, train_flags.pipe);

    SegmentFlags segment_flags;
    auto* segment = app.add_subcommand("segment", "segment one case");
    segment->add_option("--manifest", segment_flags.manifest, "dataset manifest")->required();
    segment->add_option("--case", segment_flags.target, "target case id")->required();
    segment->add_option("--out", segment_flags.out, "output directory")->required();
    segment->add_option("--model", segment_flags.model_dir,
                        "model directory (required for idal and oracle)");
    segment->add_option("--method", segment_flags.method, "idal, pooled, or oracle");
    add_pipe_flags(segment, segment_flags.pipe);

    LooFlags loo_flags;
    auto* loo = app.add_subcommand("loo", "leave-one-out evaluation");
    loo->add_option("--manifest", loo_flags.manifest, "dataset manifest")->required();
    loo->add_option("--out", loo_flags.out, "report output directory")->required();
    loo->add_option("--methods", loo_flags.methods,
                    "comma-separated subset of idal,pooled,oracle");
    add_pipe_flags(loo, loo_flags.pipe);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_flags);
        if (train->parsed()) return cmd_train(train_flags);
        if (segment->parsed()) return cmd_segment(segment_flags);
        if (loo->parsed()) return cmd_loo(loo_flags);
    } catch (const idal::EvalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitEvaluation;
    } catch (const idal::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const idal::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const idal::TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitTraining;
    } catch (const idal::GeometryError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSegmentation;
    } catch (const idal::InvariantError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSegmentation;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitInternal;  // unreachable: one subcommand is required
}
