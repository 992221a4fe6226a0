#include "canopy/pipeline.hpp"

#include "canopy/errors.hpp"
#include "canopy/json_fields.hpp"
#include "canopy/util.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>

namespace canopy {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void say(const Logger& log, const std::string& msg) {
    if (log) log(msg);
}

std::string rel_string(const fs::path& p, const fs::path& base) {
    if (!base.empty()) {
        const fs::path r = p.lexically_normal().lexically_relative(base.lexically_normal());
        if (!r.empty()) return r.generic_string();
    }
    return p.lexically_normal().generic_string();
}

void write_json(const json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

bool raster_exists(const fs::path& p) {
    return fs::exists(header_path(raster_stem(p))) && fs::exists(payload_path(raster_stem(p)));
}

} // namespace

json RunManifest::to_json() const {
    auto digests = [](const std::vector<FileDigest>& v) {
        json a = json::array();
        for (const auto& d : v) a.push_back({{"path", d.path}, {"sha256", d.sha256}});
        return a;
    };
    return {
        {"command", command},
        {"config", config},
        {"seed", seed},
        {"threads", threads},
        {"inputs", digests(inputs)},
        {"outputs", digests(outputs)},
        {"versions", {{"canopy_forge", kVersion}, {"cxx_standard", static_cast<long>(__cplusplus)}}},
        {"wall_time_s", wall_time_s},
    };
}

std::vector<FileDigest> digest_paths(const std::vector<fs::path>& paths, const fs::path& base) {
    std::vector<fs::path> files;
    for (const auto& p : paths) {
        if (fs::is_directory(p)) {
            std::vector<fs::path> found;
            for (const auto& e : fs::recursive_directory_iterator(p))
                if (e.is_regular_file()) found.push_back(e.path());
            std::sort(found.begin(), found.end());
            files.insert(files.end(), found.begin(), found.end());
        } else if (fs::is_regular_file(p) && p.string().find(".hdr.json") == std::string::npos &&
                   p.extension() != ".bin") {
            files.push_back(p);
        } else if (raster_exists(p)) {
            files.push_back(header_path(raster_stem(p)));
            files.push_back(payload_path(raster_stem(p)));
        } else if (fs::is_regular_file(p)) {
            files.push_back(p);
        } else {
            throw Error("cannot digest missing path " + p.string());
        }
    }
    std::vector<FileDigest> out;
    std::set<std::string> seen;
    for (const auto& f : files) {
        const std::string r = rel_string(f, base);
        if (!seen.insert(r).second) continue;
        out.push_back({r, sha256_file(f)});
    }
    return out;
}

void write_manifest(const RunManifest& manifest, const fs::path& path) { write_json(manifest.to_json(), path); }

// ------------------------------------------------------------- config parts

TextureParams texture_params_from_json(const json& j, const std::string& path) {
    TextureParams t;
    if (j.is_null()) return t;
    cfg::only_keys(j, path, {"offset", "radius", "levels", "orientations"});
    t.offset = cfg::optional_or<int>(j, "offset", path, t.offset);
    t.radius = cfg::optional_or<int>(j, "radius", path, t.radius);
    t.levels = cfg::optional_or<int>(j, "levels", path, t.levels);
    if (j.contains("orientations")) t.orientations = cfg::list_of<int>(j["orientations"], cfg::join(path, "orientations"));
    try {
        t.validate();
    } catch (const ArgumentError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return t;
}

QualityFilter quality_from_json(const json& j, const std::string& path) {
    QualityFilter q;
    if (j.is_null()) return q;
    cfg::only_keys(j, path, {"full_power_only", "min_sensitivity", "date_from", "date_to"});
    q.full_power_only = cfg::optional_or<bool>(j, "full_power_only", path, q.full_power_only);
    q.min_sensitivity = cfg::optional_or<double>(j, "min_sensitivity", path, q.min_sensitivity);
    q.date_from = cfg::optional_field<std::string>(j, "date_from", path);
    q.date_to = cfg::optional_field<std::string>(j, "date_to", path);
    return q;
}

HyperparamGrid grid_from_json(const json& j, const std::string& path) {
    HyperparamGrid g;
    if (j.is_null()) return g;
    cfg::only_keys(j, path, {"n_estimators", "max_features", "max_depth", "min_samples_split"});
    auto positive_list = [&](const char* key, std::vector<int>& dst) {
        if (!j.contains(key)) return;
        const std::string p = cfg::join(path, key);
        dst = cfg::list_of<int>(j[key], p);
        if (dst.empty()) throw ConfigError(p + ": must not be empty");
        for (std::size_t i = 0; i < dst.size(); ++i)
            if (dst[i] < 1) throw ConfigError(p + "[" + std::to_string(i) + "]: must be >= 1");
    };
    positive_list("n_estimators", g.n_estimators);
    positive_list("max_depth", g.max_depth);
    positive_list("min_samples_split", g.min_samples_split);
    if (j.contains("max_features")) {
        const std::string p = cfg::join(path, "max_features");
        const auto names = cfg::list_of<std::string>(j["max_features"], p);
        if (names.empty()) throw ConfigError(p + ": must not be empty");
        g.max_features.clear();
        for (std::size_t i = 0; i < names.size(); ++i) {
            try {
                g.max_features.push_back(parse_max_features(names[i]));
            } catch (const ArgumentError& e) {
                throw ConfigError(p + "[" + std::to_string(i) + "]: " + e.what());
            }
        }
    }
    return g;
}

PowerLawBounds bounds_from_json(const json& j, const std::string& path) {
    PowerLawBounds b;
    if (j.is_null()) return b;
    cfg::only_keys(j, path, {"a_min", "a_max", "b_min", "b_max"});
    b.a_min = cfg::optional_or<double>(j, "a_min", path, b.a_min);
    b.a_max = cfg::optional_or<double>(j, "a_max", path, b.a_max);
    b.b_min = cfg::optional_or<double>(j, "b_min", path, b.b_min);
    b.b_max = cfg::optional_or<double>(j, "b_max", path, b.b_max);
    if (!(b.a_min >= 0.0 && b.a_min < b.a_max)) throw ConfigError(path + ": need 0 <= a_min < a_max");
    if (!(b.b_min < b.b_max)) throw ConfigError(path + ": need b_min < b_max");
    return b;
}

// ---------------------------------------------------------------- features

namespace {

struct SceneEntry {
    std::string date;
    std::string orbit;
    std::map<std::string, fs::path> bands;
    std::optional<fs::path> mask;
};

std::vector<SceneEntry> scene_list(const json& arr, const std::string& path, const fs::path& base,
                                   std::initializer_list<const char*> bands, bool with_orbit, bool with_mask) {
    if (!arr.is_array() || arr.empty()) throw ConfigError(path + ": expected a non-empty array of scenes");
    std::vector<SceneEntry> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string sp = path + "[" + std::to_string(i) + "]";
        const json& s = arr[i];
        cfg::only_keys(s, sp, {"date", "orbit", "bands", "mask"});
        SceneEntry e;
        e.date = cfg::optional_or<std::string>(s, "date", sp, "");
        if (with_orbit) {
            e.orbit = cfg::required<std::string>(s, "orbit", sp);
            if (e.orbit != "asc" && e.orbit != "desc") throw ConfigError(sp + ".orbit: expected \"asc\" or \"desc\"");
        }
        if (!s.contains("bands")) throw ConfigError(sp + ".bands: required field missing");
        const json& b = s["bands"];
        cfg::require_object(b, sp + ".bands");
        for (const char* name : bands) {
            const fs::path p = resolve(base, cfg::required<std::string>(b, name, sp + ".bands"));
            if (!raster_exists(p)) throw ConfigError(sp + ".bands." + name + ": raster not found: " + p.string());
            e.bands[name] = p;
        }
        if (with_mask) {
            if (auto m = cfg::optional_field<std::string>(s, "mask", sp)) {
                const fs::path p = resolve(base, *m);
                if (!raster_exists(p)) throw ConfigError(sp + ".mask: raster not found: " + p.string());
                e.mask = p;
            }
        }
        out.push_back(std::move(e));
    }
    return out;
}

Raster temporal_mean_db(std::span<const Raster> series, int radius) {
    const auto filtered = speckle_filter_multitemporal(series, radius);
    return to_db(composite_mean(filtered));
}

} // namespace

FeatureStack build_features_from_config(const json& config, const fs::path& base, unsigned threads,
                                        std::vector<fs::path>* inputs, const Logger& log) {
    const std::string root = "features";
    cfg::only_keys(config, root, {"s1", "s2", "alos", "speckle_radius", "texture"});
    const int radius = cfg::optional_or<int>(config, "speckle_radius", root, 3);
    if (radius < 0) throw ConfigError("features.speckle_radius: must be >= 0");
    const TextureParams texture = texture_params_from_json(config.value("texture", json()), "features.texture");
    auto note_inputs = [&](const std::vector<SceneEntry>& scenes) {
        if (!inputs) return;
        for (const auto& s : scenes) {
            for (const auto& [n, p] : s.bands) inputs->push_back(p);
            if (s.mask) inputs->push_back(*s.mask);
        }
    };

    if (!config.contains("s1")) throw ConfigError("features.s1: required field missing");
    if (!config.contains("s2")) throw ConfigError("features.s2: required field missing");
    if (!config.contains("alos")) throw ConfigError("features.alos: required field missing");
    cfg::only_keys(config["s1"], "features.s1", {"winter", "summer"});
    cfg::only_keys(config["s2"], "features.s2", {"winter", "summer"});

    FeatureInputs in;
    for (const char* season : {"winter", "summer"}) {
        const std::string s1p = std::string("features.s1.") + season;
        if (!config["s1"].contains(season)) throw ConfigError(s1p + ": required field missing");
        const auto s1 = scene_list(config["s1"][season], s1p, base, {"VH", "VV"}, true, false);
        note_inputs(s1);
        say(log, "features: S1 " + std::string(season) + ", " + std::to_string(s1.size()) + " scenes");
        for (const char* pol : {"VH", "VV"}) {
            std::vector<Raster> series;
            for (const auto& s : s1) series.push_back(read_raster(s.bands.at(pol)));
            const auto filtered = speckle_filter_multitemporal(series, radius);
            std::vector<Raster> asc, desc;
            for (std::size_t i = 0; i < s1.size(); ++i) (s1[i].orbit == "asc" ? asc : desc).push_back(filtered[i]);
            Raster avg = asc.empty()    ? composite_mean(desc)
                         : desc.empty() ? composite_mean(asc)
                                        : orbit_average(composite_mean(asc), composite_mean(desc));
            Raster db = to_db(avg);
            const bool win = std::string(season) == "winter";
            const bool vh = std::string(pol) == "VH";
            (win ? (vh ? in.s1_vh_win : in.s1_vv_win) : (vh ? in.s1_vh_sum : in.s1_vv_sum)) = std::move(db);
        }

        const std::string s2p = std::string("features.s2.") + season;
        if (!config["s2"].contains(season)) throw ConfigError(s2p + ": required field missing");
        const auto s2 = scene_list(config["s2"][season], s2p, base, {"B2", "B3", "B4", "B5", "B6", "B8", "B8A", "B11"},
                                   false, true);
        note_inputs(s2);
        say(log, "features: S2 " + std::string(season) + ", " + std::to_string(s2.size()) + " scenes");
        std::vector<Raster> bi, ndvi, ndwi, nd56;
        std::vector<CategoricalRaster> masks;
        const bool any_mask = std::any_of(s2.begin(), s2.end(), [](const SceneEntry& e) { return e.mask.has_value(); });
        for (const auto& s : s2) {
            BandSet bands;
            for (const auto& [n, p] : s.bands) bands.emplace(n, read_raster(p));
            SpectralIndices idx = spectral_indices(bands);
            if (any_mask) masks.push_back(s.mask ? read_categorical(*s.mask) : CategoricalRaster(idx.bi.grid(), 1));
            bi.push_back(std::move(idx.bi));
            ndvi.push_back(std::move(idx.ndvi));
            ndwi.push_back(std::move(idx.ndwi));
            nd56.push_back(std::move(idx.nd56));
        }
        SpectralIndices comp{composite_mean(bi, masks), composite_mean(ndvi, masks), composite_mean(ndwi, masks),
                             composite_mean(nd56, masks)};
        (std::string(season) == "winter" ? in.s2_win : in.s2_sum) = std::move(comp);
    }

    const auto alos = scene_list(config["alos"], "features.alos", base, {"HH", "HV"}, false, false);
    note_inputs(alos);
    say(log, "features: ALOS, " + std::to_string(alos.size()) + " scenes");
    for (const char* pol : {"HH", "HV"}) {
        std::vector<Raster> series;
        for (const auto& s : alos) series.push_back(read_raster(s.bands.at(pol)));
        (std::string(pol) == "HH" ? in.alos_hh : in.alos_hv) = temporal_mean_db(series, radius);
    }

    say(log, "features: textures");
    return build_feature_stack(in, texture, threads);
}

// ----------------------------------------------------------------- extract

ExtractResult run_extract(const FeatureStack& stack, const CategoricalRaster& ser, const CategoricalRaster& dlt,
                          const fs::path& footprints_csv, const QualityFilter& quality, std::size_t min_stratum_rows,
                          const fs::path& out_dir, unsigned threads, const Logger& log) {
    ExtractResult out;
    out.load = load_footprints(footprints_csv, quality);
    for (const auto& e : out.load.errors)
        say(log, "extract: " + footprints_csv.string() + ":" + std::to_string(e.line) + ": " + e.message);
    for (const auto& w : out.load.warnings) say(log, "extract: warning: " + w);
    say(log, "extract: " + std::to_string(out.load.samples.size()) + " footprints kept, " +
                 std::to_string(out.load.dropped()) + " dropped by quality filters");

    auto tables = stratify_and_build(out.load.samples, stack, ser, dlt, &out.report, threads);
    out.tables = merge_small_strata(std::move(tables), min_stratum_rows);
    if (out.tables.empty()) throw InsufficientDataError("no stratum has enough footprints to train");

    fs::create_directories(out_dir);
    for (const auto& [key, table] : out.tables) {
        const json provenance = {
            {"footprints", footprints_csv.filename().string()},
            {"quality",
             {{"full_power_only", quality.full_power_only},
              {"min_sensitivity", quality.min_sensitivity},
              {"date_from", quality.date_from ? json(*quality.date_from) : json()},
              {"date_to", quality.date_to ? json(*quality.date_to) : json()}}},
            {"min_stratum_rows", min_stratum_rows},
            {"dropped",
             {{"beam", out.load.dropped_beam},
              {"sensitivity", out.load.dropped_sensitivity},
              {"date", out.load.dropped_date},
              {"nonforest", out.report.dropped_nonforest},
              {"no_ser", out.report.dropped_no_ser},
              {"outside", out.report.dropped_outside},
              {"nodata_features", out.report.dropped_nodata_features}}},
        };
        const fs::path csv = out_dir / ("table_" + stratum_tag(key) + ".csv");
        write_learning_table(table, csv, provenance.dump());
        out.files.push_back(csv);
        out.files.push_back(fs::path(csv).replace_extension(".json"));
        say(log, "extract: stratum " + to_string(key) + ": " + std::to_string(table.rows()) + " rows");
    }
    return out;
}

std::vector<LearningTable> read_tables(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw InputFormatError("tables directory not found: " + dir.string());
    std::vector<fs::path> csvs;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_regular_file() && name.rfind("table_", 0) == 0 && e.path().extension() == ".csv")
            csvs.push_back(e.path());
    }
    std::sort(csvs.begin(), csvs.end());
    if (csvs.empty()) throw InputFormatError("no table_*.csv files in " + dir.string());
    std::vector<LearningTable> out;
    for (const auto& p : csvs) out.push_back(read_learning_table(p));
    return out;
}

// ------------------------------------------------------------------- train

TrainResult run_train(const std::vector<LearningTable>& tables, const HyperparamGrid& grid, std::uint64_t seed,
                      int folds, const fs::path& out_dir, unsigned threads, const Logger& log) {
    TrainResult out;
    fs::create_directories(out_dir);
    for (const auto& table : tables) {
        say(log, "train: stratum " + to_string(table.stratum) + " (" + std::to_string(table.rows()) + " rows)");
        StratumTraining t = train_stratum(table, grid, seed, threads, folds);
        const std::string tag = stratum_tag(table.stratum);
        const fs::path model_path = out_dir / model_file_name(table.stratum);
        save_model(t.model, model_path);

        json scores = json::array();
        for (const auto& g : t.cv.grid)
            scores.push_back({{"n_estimators", g.hyperparams.n_estimators},
                              {"max_features", to_string(g.hyperparams.max_features)},
                              {"max_depth", g.hyperparams.max_depth},
                              {"min_samples_split", g.hyperparams.min_samples_split},
                              {"mean_mae", g.mean_mae}});
        const json cv = {
            {"stratum", to_string(table.stratum)},
            {"rows", table.rows()},
            {"folds", folds},
            {"selected",
             {{"n_estimators", t.cv.selected.n_estimators},
              {"max_features", to_string(t.cv.selected.max_features)},
              {"max_depth", t.cv.selected.max_depth},
              {"min_samples_split", t.cv.selected.min_samples_split}}},
            {"cv_mae", t.model.training_meta.cv_mae},
            {"removed_ids", t.removed_ids},
            {"grid", scores},
        };
        const fs::path cv_path = out_dir / ("cv_" + tag + ".json");
        write_json(cv, cv_path);
        out.files.push_back(model_path);
        out.files.push_back(cv_path);
        say(log, "train: stratum " + to_string(table.stratum) + ": cv MAE " + format_double(t.model.training_meta.cv_mae) +
                     " m, " + std::to_string(t.removed_ids.size()) + " outliers removed");
        out.models.add(table.stratum, std::move(t.model));
    }
    return out;
}

// --------------------------------------------------------------- allometry

PowerLawSet fit_laws(std::span<const PlotRecord> plots, AllometryTarget target, const PowerLawBounds& bounds,
                     std::optional<LeafType> only) {
    PowerLawSet laws;
    for (LeafType leaf : {LeafType::broadleaved, LeafType::coniferous}) {
        if (only && *only != leaf) continue;
        std::vector<double> h, y;
        for (const auto& p : plots) {
            if (p.leaf_type != leaf) continue;
            const auto v = target == AllometryTarget::volume ? p.volume : p.agb;
            if (!v) continue;
            h.push_back(p.hdom);
            y.push_back(*v);
        }
        if (h.empty()) continue;
        PowerLaw law = fit_power_law(h, y, bounds);
        law.target = target;
        law.leaf_type = leaf;
        laws.emplace(leaf, law);
    }
    if (laws.empty()) throw FitError("no plot carries a " + to_string(target) + " value for the requested leaf type");
    return laws;
}

// ---------------------------------------------------------------- validate

json metrics_to_json(const MetricsReport& m) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };
    return {{"n", m.n},       {"r2", opt(m.r2)},       {"mae", m.mae}, {"rmae", opt(m.rmae)},
            {"rmse", m.rmse}, {"rrmse", opt(m.rrmse)}, {"bias", m.bias}};
}

std::vector<bool> footprint_mask(const Grid& grid, std::span<const FootprintSample> samples) {
    std::vector<bool> mask(grid.size(), false);
    for (const auto& s : samples)
        for (const auto& [c, r] : footprint_pixels(grid, s.x, s.y)) mask[static_cast<std::size_t>(r) * grid.width + c] = true;
    return mask;
}

namespace {

json plot_rows(const Raster& map, std::span<const PlotRecord> plots, PlotTarget target, GroupBy group_by,
               std::vector<PairedValue>* scatter) {
    std::map<std::string, std::vector<PlotRecord>> by_site;
    for (const auto& p : plots) by_site[group_by == GroupBy::site ? to_string(p.source) : "all"].push_back(p);
    json rows = json::array();
    for (const auto& [site, site_plots] : by_site) {
        for (const char* group : {"all", "broadleaved", "coniferous"}) {
            std::vector<PlotRecord> subset;
            for (const auto& p : site_plots)
                if (std::string(group) == "all" || to_string(p.leaf_type) == group) subset.push_back(p);
            json row = {{"site", site}, {"group", group}};
            try {
                const PlotComparison cmp = compare_map_plots(map, subset, target, GroupBy::none);
                row.update(metrics_to_json(cmp.groups.at("all")));
                if (scatter && std::string(group) == "all")
                    for (auto pv : cmp.pairs) {
                        pv.group = site;
                        scatter->push_back(std::move(pv));
                    }
            } catch (const Error&) {
                row["n"] = 0;
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

Raster masked(const Raster& r, const std::vector<bool>& excluded) {
    if (excluded.empty()) return r;
    Raster out = r;
    for (std::size_t i = 0; i < excluded.size(); ++i)
        if (excluded[i]) out.values()[i] = out.nodata();
    return out;
}

} // namespace

json run_validate(const ValidationInputs& in, std::vector<PairedValue>* scatter) {
    json report = json::object();
    const std::pair<const char*, const std::optional<Raster>*> maps[] = {
        {"height", &in.height}, {"volume", &in.volume}, {"agb", &in.agb}};
    const PlotTarget targets[] = {PlotTarget::height, PlotTarget::volume, PlotTarget::agb};

    if (!in.plots.empty()) {
        json plots = json::object();
        for (std::size_t k = 0; k < 3; ++k)
            if (*maps[k].second)
                plots[maps[k].first] = plot_rows(**maps[k].second, in.plots, targets[k], in.group_by,
                                                 k == 0 ? scatter : nullptr);
        report["plots"] = plots;
    }

    if (in.chm && in.height) {
        const ChmComparison c = compare_map_chm(*in.height, *in.chm, in.dlt ? &*in.dlt : nullptr);
        json chm = {{"all", metrics_to_json(c.all)}};
        for (const auto& [g, m] : c.by_leaf_type) chm[g] = metrics_to_json(m);
        report["chm"] = chm;
    }

    if (in.truth_dir) {
        const char* truth_stems[] = {"true_height", "truth_volume", "truth_agb"};
        json truth = json::object();
        json aggregated = json::object();
        std::size_t excluded = 0;
        for (bool e : in.excluded) excluded += e;
        for (std::size_t k = 0; k < 3; ++k) {
            if (!*maps[k].second) continue;
            const Raster& pred = **maps[k].second;
            const Raster ref = read_raster(*in.truth_dir / truth_stems[k]);
            assert_aligned({&pred, &ref});
            if (!in.excluded.empty() && in.excluded.size() != pred.values().size())
                throw ArgumentError("exclusion mask does not match the map size");
            std::vector<double> p, r;
            for (std::size_t i = 0; i < pred.values().size(); ++i) {
                if (!in.excluded.empty() && in.excluded[i]) continue;
                const float a = pred.values()[i], b = ref.values()[i];
                if (a == pred.nodata() || b == ref.nodata()) continue;
                p.push_back(a);
                r.push_back(b);
            }
            if (p.empty()) continue;
            const MetricsReport pixel = compute_metrics(p, r);
            truth[maps[k].first] = metrics_to_json(pixel);
            if (in.classes) {
                const AggregationResult agg = aggregate_by_class(masked(pred, in.excluded), ref, *in.classes);
                aggregated[maps[k].first] = {{"n_classes", agg.classes.size()},
                                             {"class_level", metrics_to_json(agg.report)},
                                             {"pixel_level", metrics_to_json(pixel)}};
            }
        }
        truth["excluded_footprint_pixels"] = excluded;
        report["truth"] = truth;
        if (in.classes) report["aggregated"] = aggregated;
    }
    return report;
}

// ---------------------------------------------------------------- pipeline

PipelineConfig parse_pipeline_config(const json& j, const fs::path& base) {
    PipelineConfig c;
    c.raw = j;
    c.base = base;
    cfg::only_keys(j, "", {"seed", "out", "inputs", "quality", "training", "texture", "allometry", "validation",
                           "tile_size"});
    c.seed = cfg::optional_or<std::uint64_t>(j, "seed", "", c.seed);
    c.out = resolve(base, cfg::required<std::string>(j, "out", ""));

    if (!j.contains("inputs")) throw ConfigError("inputs: required field missing");
    const json& in = j["inputs"];
    cfg::only_keys(in, "inputs", {"stack", "features", "ser", "dlt", "footprints", "plots"});
    const bool has_stack = in.contains("stack"), has_features = in.contains("features");
    if (has_stack == has_features) throw ConfigError("inputs: exactly one of 'stack' and 'features' is required");
    if (has_stack) {
        c.stack = resolve(base, cfg::required<std::string>(in, "stack", "inputs"));
        if (!fs::is_regular_file(*c.stack)) throw ConfigError("inputs.stack: file not found: " + c.stack->string());
    } else {
        cfg::require_object(in["features"], "inputs.features");
        c.features = in["features"];
    }
    auto raster_input = [&](const char* key) {
        const fs::path p = resolve(base, cfg::required<std::string>(in, key, "inputs"));
        if (!raster_exists(p)) throw ConfigError(std::string("inputs.") + key + ": raster not found: " + p.string());
        return p;
    };
    auto file_input = [&](const char* key) {
        const fs::path p = resolve(base, cfg::required<std::string>(in, key, "inputs"));
        if (!fs::is_regular_file(p)) throw ConfigError(std::string("inputs.") + key + ": file not found: " + p.string());
        return p;
    };
    c.ser = raster_input("ser");
    c.dlt = raster_input("dlt");
    c.footprints = file_input("footprints");
    c.plots = file_input("plots");

    c.quality = quality_from_json(j.value("quality", json()), "quality");
    if (j.contains("training")) {
        const json& t = j["training"];
        cfg::only_keys(t, "training", {"grid", "folds", "min_stratum_rows"});
        c.grid = grid_from_json(t.value("grid", json()), "training.grid");
        c.folds = cfg::optional_or<int>(t, "folds", "training", c.folds);
        if (c.folds < 2) throw ConfigError("training.folds: must be >= 2");
        c.min_stratum_rows = cfg::optional_or<std::size_t>(t, "min_stratum_rows", "training", c.min_stratum_rows);
    }
    c.texture = texture_params_from_json(j.value("texture", json()), "texture");
    if (j.contains("allometry")) {
        cfg::only_keys(j["allometry"], "allometry", {"bounds"});
        c.bounds = bounds_from_json(j["allometry"].value("bounds", json()), "allometry.bounds");
    }
    c.tile_size = cfg::optional_or<int>(j, "tile_size", "", c.tile_size);
    if (c.tile_size < 1) throw ConfigError("tile_size: must be >= 1");

    if (j.contains("validation")) {
        const json& v = j["validation"];
        cfg::only_keys(v, "validation", {"chm", "truth", "classes", "group_by"});
        if (auto p = cfg::optional_field<std::string>(v, "chm", "validation")) {
            c.chm = resolve(base, *p);
            if (!raster_exists(*c.chm)) throw ConfigError("validation.chm: raster not found: " + c.chm->string());
        }
        if (auto p = cfg::optional_field<std::string>(v, "truth", "validation")) {
            c.truth = resolve(base, *p);
            if (!fs::is_directory(*c.truth)) throw ConfigError("validation.truth: directory not found: " + c.truth->string());
        }
        if (auto p = cfg::optional_field<std::string>(v, "classes", "validation")) {
            c.classes = resolve(base, *p);
            if (!raster_exists(*c.classes))
                throw ConfigError("validation.classes: raster not found: " + c.classes->string());
        }
        const std::string g = cfg::optional_or<std::string>(v, "group_by", "validation", "site");
        if (g == "site") c.group_by = GroupBy::site;
        else if (g == "none") c.group_by = GroupBy::none;
        else throw ConfigError("validation.group_by: expected \"site\" or \"none\"");
    }
    return c;
}

PipelineResult run_pipeline(const PipelineConfig& c, unsigned threads, const Logger& log) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(c.out);
    std::vector<fs::path> inputs;

    FeatureStack stack;
    if (c.stack) {
        say(log, "pipeline: reading feature stack " + c.stack->string());
        stack = read_stack(*c.stack);
        inputs.push_back(*c.stack);
        for (const auto& name : stack.names()) inputs.push_back(c.stack->parent_path() / name);
    } else {
        json features = *c.features;
        if (!features.contains("texture")) {
            features["texture"] = {{"offset", c.texture.offset},
                                   {"radius", c.texture.radius},
                                   {"levels", c.texture.levels},
                                   {"orientations", c.texture.orientations}};
        }
        stack = build_features_from_config(features, c.base, threads, &inputs, log);
        write_stack(stack, c.out / "features");
    }
    check_canonical_stack(stack);
    const CategoricalRaster ser = read_categorical(c.ser);
    const CategoricalRaster dlt = read_categorical(c.dlt);
    inputs.insert(inputs.end(), {c.ser, c.dlt, c.footprints, c.plots});

    const ExtractResult ex = run_extract(stack, ser, dlt, c.footprints, c.quality, c.min_stratum_rows, c.out / "tables",
                                         threads, log);
    std::vector<LearningTable> tables;
    for (const auto& [k, t] : ex.tables) tables.push_back(t);
    const TrainResult tr = run_train(tables, c.grid, c.seed, c.folds, c.out / "models", threads, log);

    say(log, "predict: height map");
    const Raster height = predict_map(tr.models, stack, ser, dlt, c.tile_size, threads);
    write_raster(height, c.out / "maps" / "height", "height");

    const PlotLoad plots = load_plots(c.plots);
    for (const auto& e : plots.errors) say(log, "allometry: " + c.plots.string() + ":" + std::to_string(e.line) + ": " + e.message);
    std::map<AllometryTarget, Raster> derived;
    for (AllometryTarget target : {AllometryTarget::volume, AllometryTarget::agb}) {
        const PowerLawSet laws = fit_laws(plots.plots, target, c.bounds);
        for (const auto& [leaf, law] : laws) {
            save_law(law, c.out / "laws" / law_file_name(target, leaf));
            say(log, "allometry: " + to_string(target) + " " + to_string(leaf) + ": a=" + format_double(law.a) +
                         " b=" + format_double(law.b) + " r2=" + format_double(law.fit_meta.r2));
        }
        Raster map = apply_power_law(height, dlt, laws);
        write_raster(map, c.out / "maps" / to_string(target), to_string(target));
        derived.emplace(target, std::move(map));
    }

    say(log, "validate");
    ValidationInputs vin;
    vin.height = height;
    vin.volume = derived.at(AllometryTarget::volume);
    vin.agb = derived.at(AllometryTarget::agb);
    vin.plots = plots.plots;
    vin.group_by = c.group_by;
    vin.dlt = dlt;
    if (c.chm) {
        vin.chm = read_raster(*c.chm);
        inputs.push_back(*c.chm);
    }
    if (c.truth) {
        vin.truth_dir = *c.truth;
        vin.excluded = footprint_mask(height.grid(), ex.load.samples);
        for (const char* s : {"true_height", "truth_volume", "truth_agb"}) inputs.push_back(*c.truth / s);
    }
    if (c.classes) {
        vin.classes = read_categorical(*c.classes);
        inputs.push_back(*c.classes);
    }
    std::vector<PairedValue> scatter;
    PipelineResult result;
    result.report = run_validate(vin, &scatter);
    write_json(result.report, c.out / "validation" / "report.json");
    write_pairs_csv(scatter, (c.out / "validation" / "pairs_height.csv").string());

    RunManifest& m = result.manifest;
    m.command = "pipeline";
    m.config = c.raw;
    m.seed = c.seed;
    m.threads = threads;
    m.inputs = digest_paths(inputs, c.base);
    std::vector<fs::path> outs;
    for (const char* sub : {"features", "tables", "models", "maps", "laws", "validation"})
        if (fs::exists(c.out / sub)) outs.push_back(c.out / sub);
    m.outputs = digest_paths(outs, c.out);
    m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.manifest_path = c.out / "manifest.json";
    write_manifest(m, result.manifest_path);
    say(log, "pipeline: manifest " + result.manifest_path.string());
    return result;
}

} // namespace canopy
