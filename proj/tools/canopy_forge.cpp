#include "canopy/allometry.hpp"
#include "canopy/errors.hpp"
#include "canopy/features.hpp"
#include "canopy/json_fields.hpp"
#include "canopy/model.hpp"
#include "canopy/pipeline.hpp"
#include "canopy/sampling.hpp"
#include "canopy/synth.hpp"
#include "canopy/util.hpp"
#include "canopy/validation.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace canopy;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;
    bool quiet = false;
};

Logger make_logger(const Globals& g) {
    if (g.quiet) return [](const std::string&) {};
    return [](const std::string& msg) { std::cout << msg << std::endl; };
}

std::uint64_t effective_seed(const Globals& g, std::uint64_t config_seed) {
    if (g.seed) return *g.seed;
    if (const char* env = std::getenv("CANOPY_FORGE_SEED")) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument(env);
            return v;
        } catch (const std::exception&) {
            throw ConfigError(std::string("CANOPY_FORGE_SEED: not an unsigned integer: ") + env);
        }
    }
    return config_seed;
}

json read_json_file(const fs::path& path, const std::string& what) {
    std::ifstream is(path);
    if (!is) throw ConfigError(what + ": cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return cfg::parse(ss.str(), what);
}

std::string read_text(const fs::path& path, const std::string& what) {
    std::ifstream is(path);
    if (!is) throw ConfigError(what + ": cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Manifest next to a file output: "<stem>.manifest.json".
fs::path sibling_manifest(const fs::path& out) {
    fs::path stem = raster_stem(out);
    if (stem.extension() == ".json" || stem.extension() == ".csv") stem.replace_extension();
    return fs::path(stem.string() + ".manifest.json");
}

class Run {
public:
    Run(std::string command, const Globals& g) : g_(g), t0_(std::chrono::steady_clock::now()) {
        m_.command = std::move(command);
        m_.threads = resolve_threads(g.threads);
    }
    RunManifest& manifest() { return m_; }
    unsigned threads() const { return m_.threads; }
    void finish(const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs, const fs::path& out_base,
                const fs::path& manifest_path) {
        m_.inputs = digest_paths(inputs);
        m_.outputs = digest_paths(outputs, out_base);
        m_.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        write_manifest(m_, manifest_path);
        if (!g_.quiet) std::cout << m_.command << ": manifest " << manifest_path.string() << std::endl;
    }

private:
    const Globals& g_;
    std::chrono::steady_clock::time_point t0_;
    RunManifest m_;
};

std::vector<fs::path> raster_files(const fs::path& stem) { return {header_path(stem), payload_path(stem)}; }

std::optional<LeafType> leaf_filter(const std::string& s) {
    if (s.empty()) return std::nullopt;
    try {
        return parse_leaf_type(s);
    } catch (const ArgumentError& e) {
        throw ConfigError(std::string("--leaf-type: ") + e.what());
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"canopy-forge: forest height, volume and biomass mapping from multi-sensor rasters"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "Random seed (overrides CANOPY_FORGE_SEED and config)");
    app.add_option("--threads", g.threads, "Worker threads (0 = all cores); outputs do not depend on it");
    app.add_flag("--quiet", g.quiet, "Suppress progress logs");
    app.fallthrough();

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic scene with ground truth");
    std::string synth_spec, synth_out;
    synth->add_option("--spec", synth_spec, "Scene spec JSON")->required();
    synth->add_option("--out", synth_out, "Output directory")->required();

    // features
    auto* features = app.add_subcommand("features", "Build the 38-band feature stack from scene lists");
    std::string feat_config, feat_out;
    features->add_option("--config", feat_config, "Features config JSON")->required();
    features->add_option("--out", feat_out, "Output directory")->required();

    // extract
    auto* extract = app.add_subcommand("extract", "Build per-stratum learning tables from footprints");
    std::string ex_stack, ex_ser, ex_dlt, ex_fp, ex_out, ex_quality;
    std::size_t ex_min_rows = kMinStratumRows;
    extract->add_option("--stack", ex_stack, "Stack manifest JSON")->required();
    extract->add_option("--ser", ex_ser, "SER raster")->required();
    extract->add_option("--dlt", ex_dlt, "Dominant leaf type raster")->required();
    extract->add_option("--footprints", ex_fp, "Footprint CSV")->required();
    extract->add_option("--out", ex_out, "Output directory for tables")->required();
    extract->add_option("--quality", ex_quality, "Quality filter JSON");
    extract->add_option("--min-rows", ex_min_rows, "Minimum rows per stratum before merging");

    // train
    auto* train = app.add_subcommand("train", "Train one linear-forest model per stratum");
    std::string tr_tables, tr_out, tr_grid;
    int tr_folds = 10;
    train->add_option("--tables", tr_tables, "Directory of learning tables")->required();
    train->add_option("--out", tr_out, "Output directory for models")->required();
    train->add_option("--grid", tr_grid, "Hyperparameter grid JSON");
    train->add_option("--folds", tr_folds, "Cross-validation folds")->check(CLI::Range(2, 1000));

    // predict
    auto* predict = app.add_subcommand("predict", "Predict a wall-to-wall height map");
    std::string pr_models, pr_stack, pr_ser, pr_dlt, pr_out;
    int pr_tile = 256;
    predict->add_option("--models", pr_models, "Directory of model files")->required();
    predict->add_option("--stack", pr_stack, "Stack manifest JSON")->required();
    predict->add_option("--ser", pr_ser, "SER raster")->required();
    predict->add_option("--dlt", pr_dlt, "Dominant leaf type raster")->required();
    predict->add_option("--out", pr_out, "Output raster stem")->required();
    predict->add_option("--tile-size", pr_tile, "Tile edge in pixels")->check(CLI::PositiveNumber);

    // allometry
    auto* allometry = app.add_subcommand("allometry", "Fit or apply power-law allometries");
    allometry->require_subcommand(1);
    auto* al_fit = allometry->add_subcommand("fit", "Fit y = a*H^b on plot data");
    std::string af_plots, af_target = "volume", af_leaf, af_out, af_bounds;
    al_fit->add_option("--plots", af_plots, "Plot CSV")->required();
    al_fit->add_option("--target", af_target, "volume or agb")->check(CLI::IsMember({"volume", "agb"}));
    al_fit->add_option("--leaf-type", af_leaf, "b|c (omit to fit both, one file each)");
    al_fit->add_option("--out", af_out, "Law JSON (or directory when fitting both)")->required();
    al_fit->add_option("--bounds", af_bounds, "Parameter bounds JSON");
    auto* al_apply = allometry->add_subcommand("apply", "Convert a height map with fitted laws");
    std::string aa_height, aa_dlt, aa_laws, aa_target = "volume", aa_out;
    al_apply->add_option("--height", aa_height, "Height raster")->required();
    al_apply->add_option("--dlt", aa_dlt, "Dominant leaf type raster")->required();
    al_apply->add_option("--laws", aa_laws, "Directory with law_<target>_<leaf>.json")->required();
    al_apply->add_option("--target", aa_target, "volume or agb")->check(CLI::IsMember({"volume", "agb"}));
    al_apply->add_option("--out", aa_out, "Output raster stem")->required();

    // validate
    auto* validate = app.add_subcommand("validate", "Compare a map against plots, a CHM or synthetic truth");
    std::string va_map, va_target = "height", va_plots, va_chm, va_dlt, va_truth, va_classes, va_fp, va_out,
                va_scatter, va_group = "site";
    validate->add_option("--map", va_map, "Predicted raster")->required();
    validate->add_option("--target", va_target, "height, volume or agb")
        ->check(CLI::IsMember({"height", "volume", "agb"}));
    validate->add_option("--plots", va_plots, "Plot CSV");
    validate->add_option("--chm", va_chm, "Fine-resolution CHM raster (height maps only)");
    validate->add_option("--dlt", va_dlt, "Dominant leaf type raster");
    validate->add_option("--truth", va_truth, "Synthetic scene directory");
    validate->add_option("--classes", va_classes, "Class raster for aggregation (needs --truth)");
    validate->add_option("--footprints", va_fp, "Footprints whose pixels are excluded from truth comparison");
    validate->add_option("--group-by", va_group, "site or none")->check(CLI::IsMember({"site", "none"}));
    validate->add_option("--out", va_out, "Report JSON")->required();
    validate->add_option("--scatter", va_scatter, "CSV of (ref, pred) pairs");

    // pipeline
    auto* pipeline = app.add_subcommand("pipeline", "Run features, extract, train, predict, allometry, validate");
    std::string pl_config;
    pipeline->add_option("--config", pl_config, "Pipeline config JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        if (app.get_subcommands().empty() || dynamic_cast<const CLI::RequiredError*>(&e) == nullptr)
            std::cerr << app.help() << std::endl;
        return 1;
    }
    if (*seed_opt) g.seed = seed_value;
    const Logger log = make_logger(g);

    try {
        if (*synth) {
            Run run("synth", g);
            SceneSpec spec = scene_spec_from_json(read_text(synth_spec, "--spec"));
            spec.seed = effective_seed(g, spec.seed);
            run.manifest().seed = spec.seed;
            run.manifest().config = json::parse(scene_spec_to_json(spec));
            const SynthOutputs out = write_synthetic_scene(spec, synth_out, run.threads());
            log("synth: wrote " + std::to_string(out.files.size()) + " files to " + synth_out);
            run.finish({synth_spec}, out.files, synth_out, fs::path(synth_out) / "manifest.json");
        } else if (*features) {
            Run run("features", g);
            const json config = read_json_file(feat_config, "--config");
            run.manifest().config = config;
            std::vector<fs::path> inputs{feat_config};
            const FeatureStack stack =
                build_features_from_config(config, fs::path(feat_config).parent_path(), run.threads(), &inputs, log);
            const fs::path manifest = write_stack(stack, feat_out);
            std::vector<fs::path> outputs{manifest};
            for (const auto& n : stack.names())
                for (const auto& f : raster_files(fs::path(feat_out) / n)) outputs.push_back(f);
            run.finish(inputs, outputs, feat_out, fs::path(feat_out) / "manifest.json");
        } else if (*extract) {
            Run run("extract", g);
            QualityFilter quality;
            json qjson;
            if (!ex_quality.empty()) {
                qjson = read_json_file(ex_quality, "--quality");
                quality = quality_from_json(qjson, "quality");
            }
            run.manifest().config = {{"stack", ex_stack}, {"ser", ex_ser},           {"dlt", ex_dlt},
                                     {"footprints", ex_fp}, {"quality", qjson},       {"min_rows", ex_min_rows}};
            const FeatureStack stack = read_stack(ex_stack);
            const ExtractResult r = run_extract(stack, read_categorical(ex_ser), read_categorical(ex_dlt), ex_fp,
                                                quality, ex_min_rows, ex_out, run.threads(), log);
            std::vector<fs::path> inputs{ex_stack, ex_ser, ex_dlt, ex_fp};
            for (const auto& n : stack.names()) inputs.push_back(fs::path(ex_stack).parent_path() / n);
            if (!ex_quality.empty()) inputs.push_back(ex_quality);
            run.finish(inputs, r.files, ex_out, fs::path(ex_out) / "manifest.json");
        } else if (*train) {
            Run run("train", g);
            json gjson;
            HyperparamGrid grid;
            if (!tr_grid.empty()) {
                gjson = read_json_file(tr_grid, "--grid");
                grid = grid_from_json(gjson, "grid");
            }
            const std::uint64_t seed = effective_seed(g, 42);
            run.manifest().seed = seed;
            run.manifest().config = {{"tables", tr_tables}, {"grid", gjson}, {"folds", tr_folds}};
            const TrainResult r = run_train(read_tables(tr_tables), grid, seed, tr_folds, tr_out, run.threads(), log);
            std::vector<fs::path> inputs{tr_tables};
            if (!tr_grid.empty()) inputs.push_back(tr_grid);
            run.finish(inputs, r.files, tr_out, fs::path(tr_out) / "manifest.json");
        } else if (*predict) {
            Run run("predict", g);
            run.manifest().config = {{"models", pr_models}, {"stack", pr_stack}, {"ser", pr_ser},
                                     {"dlt", pr_dlt},       {"tile_size", pr_tile}};
            const FeatureStack stack = read_stack(pr_stack);
            const ModelSet models = load_models(pr_models);
            const Raster height =
                predict_map(models, stack, read_categorical(pr_ser), read_categorical(pr_dlt), pr_tile, run.threads());
            const fs::path stem = raster_stem(pr_out);
            write_raster(height, stem, "height");
            log("predict: " + std::to_string(height.count_valid()) + " pixels predicted");
            std::vector<fs::path> inputs{pr_models, pr_stack, pr_ser, pr_dlt};
            for (const auto& n : stack.names()) inputs.push_back(fs::path(pr_stack).parent_path() / n);
            run.finish(inputs, raster_files(stem), stem.parent_path(), sibling_manifest(stem));
        } else if (*al_fit) {
            Run run("allometry fit", g);
            json bjson;
            PowerLawBounds bounds;
            if (!af_bounds.empty()) {
                bjson = read_json_file(af_bounds, "--bounds");
                bounds = bounds_from_json(bjson, "bounds");
            }
            run.manifest().config = {{"plots", af_plots}, {"target", af_target}, {"leaf_type", af_leaf}, {"bounds", bjson}};
            const PlotLoad plots = load_plots(af_plots);
            for (const auto& e : plots.errors) std::cerr << (af_plots + ":" + std::to_string(e.line) + ": " + e.message) << std::endl;
            const AllometryTarget target = parse_allometry_target(af_target);
            const PowerLawSet laws = fit_laws(plots.plots, target, bounds, leaf_filter(af_leaf));
            std::vector<fs::path> outputs;
            fs::path base;
            if (!af_leaf.empty()) {
                save_law(laws.begin()->second, af_out);
                outputs.push_back(af_out);
                base = fs::path(af_out).parent_path();
            } else {
                for (const auto& [leaf, law] : laws) {
                    save_law(law, fs::path(af_out) / law_file_name(target, leaf));
                    outputs.push_back(fs::path(af_out) / law_file_name(target, leaf));
                }
                base = af_out;
            }
            for (const auto& [leaf, law] : laws)
                log("allometry: " + to_string(leaf) + ": a=" + format_double(law.a) + " b=" + format_double(law.b) +
                    " r2=" + format_double(law.fit_meta.r2));
            std::vector<fs::path> inputs{af_plots};
            if (!af_bounds.empty()) inputs.push_back(af_bounds);
            run.finish(inputs, outputs, base,
                       af_leaf.empty() ? fs::path(af_out) / "manifest.json" : sibling_manifest(af_out));
        } else if (*al_apply) {
            Run run("allometry apply", g);
            run.manifest().config = {{"height", aa_height}, {"dlt", aa_dlt}, {"laws", aa_laws}, {"target", aa_target}};
            const AllometryTarget target = parse_allometry_target(aa_target);
            const Raster out = apply_power_law(read_raster(aa_height), read_categorical(aa_dlt), load_laws(aa_laws, target));
            const fs::path stem = raster_stem(aa_out);
            write_raster(out, stem, aa_target);
            run.finish({aa_height, aa_dlt, aa_laws}, raster_files(stem), stem.parent_path(), sibling_manifest(stem));
        } else if (*validate) {
            Run run("validate", g);
            run.manifest().config = {{"map", va_map},     {"target", va_target}, {"plots", va_plots},
                                     {"chm", va_chm},     {"dlt", va_dlt},       {"truth", va_truth},
                                     {"classes", va_classes}, {"footprints", va_fp}, {"group_by", va_group}};
            std::vector<fs::path> inputs{va_map};
            ValidationInputs vin;
            Raster map = read_raster(va_map);
            if (va_target == "height") vin.height = map;
            else if (va_target == "volume") vin.volume = map;
            else vin.agb = map;
            vin.group_by = va_group == "site" ? GroupBy::site : GroupBy::none;
            if (!va_plots.empty()) {
                vin.plots = load_plots(va_plots).plots;
                inputs.push_back(va_plots);
            }
            if (!va_chm.empty()) {
                if (va_target != "height") throw ConfigError("--chm: only valid with --target height");
                vin.chm = read_raster(va_chm);
                inputs.push_back(va_chm);
            }
            if (!va_dlt.empty()) {
                vin.dlt = read_categorical(va_dlt);
                inputs.push_back(va_dlt);
            }
            if (!va_truth.empty()) {
                vin.truth_dir = fs::path(va_truth);
                const char* stems[] = {"true_height", "truth_volume", "truth_agb"};
                inputs.push_back(fs::path(va_truth) /
                                 stems[va_target == "height" ? 0 : va_target == "volume" ? 1 : 2]);
            }
            if (!va_classes.empty()) {
                if (va_truth.empty()) throw ConfigError("--classes: requires --truth");
                vin.classes = read_categorical(va_classes);
                inputs.push_back(va_classes);
            }
            if (!va_fp.empty()) {
                const FootprintLoad fp = load_footprints(va_fp, QualityFilter{});
                vin.excluded = footprint_mask(map.grid(), fp.samples);
                inputs.push_back(va_fp);
            }
            if (vin.plots.empty() && !vin.chm && !vin.truth_dir)
                throw ConfigError("validate: give at least one of --plots, --chm, --truth");
            std::vector<PairedValue> scatter;
            const json report = run_validate(vin, &scatter);
            {
                const fs::path out(va_out);
                if (out.has_parent_path()) fs::create_directories(out.parent_path());
                std::ofstream os(out, std::ios::trunc);
                if (!os) throw Error("cannot write " + va_out);
                os << report.dump(2) << '\n';
            }
            std::vector<fs::path> outputs{va_out};
            if (!va_scatter.empty()) {
                write_pairs_csv(scatter, va_scatter);
                outputs.push_back(va_scatter);
            }
            if (!g.quiet) std::cout << report.dump(2) << std::endl;
            run.finish(inputs, outputs, fs::path(va_out).parent_path(), sibling_manifest(va_out));
        } else if (*pipeline) {
            const json raw = read_json_file(pl_config, "--config");
            PipelineConfig config = parse_pipeline_config(raw, fs::path(pl_config).parent_path());
            config.seed = effective_seed(g, config.seed);
            const PipelineResult r = run_pipeline(config, resolve_threads(g.threads), log);
            if (!g.quiet) std::cout << r.report.dump(2) << std::endl;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const InputFormatError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const MisalignmentError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 0;
}
