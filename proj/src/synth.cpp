#include "canopy/synth.hpp"

#include "canopy/errors.hpp"
#include "canopy/json_fields.hpp"
#include "canopy/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace canopy {

namespace fs = std::filesystem;
using nlohmann::json;

Grid SceneSpec::grid() const {
    Grid g;
    g.width = width;
    g.height = height;
    g.pixel_size = pixel_size;
    g.origin_x = origin_x;
    g.origin_y = origin_y;
    return g;
}

void SceneSpec::validate() const {
    auto fail = [](const std::string& field, const std::string& msg) { throw ConfigError("scene." + field + ": " + msg); };
    if (width < 1) fail("width", "must be >= 1");
    if (height < 1) fail("height", "must be >= 1");
    if (!(pixel_size > 0.0)) fail("pixel_size", "must be > 0");
    if (n_stands < 1) fail("n_stands", "must be >= 1");
    if (!(height_min > 0.0 && height_min < height_max && height_max < 60.0))
        fail("height_range", "must satisfy 0 < min < max < 60");
    if (!std::isinf(saturation_height) && !(saturation_height >= height_min && saturation_height <= height_max))
        fail("saturation_height", "must lie in height_range or be \"inf\"");
    if (!(leaf_mix >= 0.0 && leaf_mix <= 1.0)) fail("leaf_mix", "must lie in [0, 1]");
    if (!(noise_sd >= 0.0)) fail("noise_sd", "must be >= 0");
    if (!(nonforest_fraction >= 0.0 && nonforest_fraction < 1.0)) fail("nonforest_fraction", "must lie in [0, 1)");
    for (std::size_t i = 0; i < ser_layout.size(); ++i) {
        const SerZone& z = ser_layout[i];
        const std::string f = "ser_layout[" + std::to_string(i) + "]";
        if (z.code == 0) fail(f + ".code", "must be >= 1");
        if (!(z.col0 >= 0 && z.col0 < z.col1 && z.col1 <= width)) fail(f, "columns must satisfy 0 <= col0 < col1 <= width");
        if (!(z.row0 >= 0 && z.row0 < z.row1 && z.row1 <= height)) fail(f, "rows must satisfy 0 <= row0 < row1 <= height");
    }
    if (!(tracks.along_m > 0.0)) fail("footprints.along_m", "must be > 0");
    if (!(tracks.across_m > 0.0)) fail("footprints.across_m", "must be > 0");
    if (tracks.n_tracks < 1) fail("footprints.n_tracks", "must be >= 1");
    if (!(tracks.error_sd >= 0.0)) fail("footprints.error_sd", "must be >= 0");
    if (n_plots < 0) fail("plots.n", "must be >= 0");
    for (const auto& [name, law] : {std::pair{"broadleaved", volume_broadleaved}, std::pair{"coniferous", volume_coniferous}})
        if (!(law.a > 0.0 && law.b > 0.0)) fail(std::string("plots.volume_laws.") + name, "a and b must be > 0");
    const double ratio = pixel_size / chm_pixel_size;
    if (!(chm_pixel_size > 0.0) || std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1.0)
        fail("chm_pixel_size", "must divide pixel_size");
}

namespace {

LawParams law_from(const json& j, const std::string& path, LawParams fallback) {
    if (j.is_null()) return fallback;
    cfg::only_keys(j, path, {"a", "b"});
    return {cfg::optional_or<double>(j, "a", path, fallback.a), cfg::optional_or<double>(j, "b", path, fallback.b)};
}

} // namespace

SceneSpec scene_spec_from_json(const std::string& text) {
    const json j = cfg::parse(text, "scene");
    const std::string p = "scene";
    cfg::only_keys(j, p,
                   {"width", "height", "pixel_size", "origin_x", "origin_y", "n_stands", "height_range", "ser_layout",
                    "leaf_mix", "noise_sd", "saturation_height", "nonforest_fraction", "footprints", "plots",
                    "chm_pixel_size", "seed"});
    SceneSpec s;
    s.width = cfg::optional_or<int>(j, "width", p, s.width);
    s.height = cfg::optional_or<int>(j, "height", p, s.height);
    s.pixel_size = cfg::optional_or<double>(j, "pixel_size", p, s.pixel_size);
    s.origin_x = cfg::optional_or<double>(j, "origin_x", p, s.origin_x);
    s.origin_y = cfg::optional_or<double>(j, "origin_y", p, s.origin_y);
    s.n_stands = cfg::optional_or<int>(j, "n_stands", p, s.n_stands);
    if (j.contains("height_range")) {
        const auto r = cfg::list_of<double>(j["height_range"], "scene.height_range");
        if (r.size() != 2) throw ConfigError("scene.height_range: expected [min, max]");
        s.height_min = r[0];
        s.height_max = r[1];
    }
    if (j.contains("ser_layout")) {
        const json& zones = j["ser_layout"];
        if (!zones.is_array()) throw ConfigError("scene.ser_layout: expected array");
        for (std::size_t i = 0; i < zones.size(); ++i) {
            const std::string zp = "scene.ser_layout[" + std::to_string(i) + "]";
            cfg::only_keys(zones[i], zp, {"code", "col0", "row0", "col1", "row1"});
            SerZone z;
            z.code = cfg::required<std::uint16_t>(zones[i], "code", zp);
            z.col0 = cfg::required<int>(zones[i], "col0", zp);
            z.row0 = cfg::required<int>(zones[i], "row0", zp);
            z.col1 = cfg::required<int>(zones[i], "col1", zp);
            z.row1 = cfg::required<int>(zones[i], "row1", zp);
            s.ser_layout.push_back(z);
        }
    }
    s.leaf_mix = cfg::optional_or<double>(j, "leaf_mix", p, s.leaf_mix);
    s.noise_sd = cfg::optional_or<double>(j, "noise_sd", p, s.noise_sd);
    if (j.contains("saturation_height")) {
        const json& v = j["saturation_height"];
        if (v.is_string() && (v == "inf" || v == "infinity")) s.saturation_height = std::numeric_limits<double>::infinity();
        else if (!v.is_null()) s.saturation_height = cfg::as<double>(v, "scene.saturation_height");
    }
    s.nonforest_fraction = cfg::optional_or<double>(j, "nonforest_fraction", p, s.nonforest_fraction);
    if (j.contains("footprints")) {
        const json& f = j["footprints"];
        const std::string fp = "scene.footprints";
        cfg::only_keys(f, fp, {"along_m", "across_m", "n_tracks", "error_sd"});
        s.tracks.along_m = cfg::optional_or<double>(f, "along_m", fp, s.tracks.along_m);
        s.tracks.across_m = cfg::optional_or<double>(f, "across_m", fp, s.tracks.across_m);
        s.tracks.n_tracks = cfg::optional_or<int>(f, "n_tracks", fp, s.tracks.n_tracks);
        s.tracks.error_sd = cfg::optional_or<double>(f, "error_sd", fp, s.tracks.error_sd);
    }
    if (j.contains("plots")) {
        const json& pl = j["plots"];
        const std::string pp = "scene.plots";
        cfg::only_keys(pl, pp, {"n", "volume_laws"});
        s.n_plots = cfg::optional_or<int>(pl, "n", pp, s.n_plots);
        if (pl.contains("volume_laws")) {
            const json& laws = pl["volume_laws"];
            const std::string lp = pp + ".volume_laws";
            cfg::only_keys(laws, lp, {"broadleaved", "coniferous"});
            s.volume_broadleaved = law_from(laws.value("broadleaved", json()), lp + ".broadleaved", s.volume_broadleaved);
            s.volume_coniferous = law_from(laws.value("coniferous", json()), lp + ".coniferous", s.volume_coniferous);
        }
    }
    s.chm_pixel_size = cfg::optional_or<double>(j, "chm_pixel_size", p, s.chm_pixel_size);
    s.seed = cfg::optional_or<std::uint64_t>(j, "seed", p, s.seed);
    s.validate();
    return s;
}

std::string scene_spec_to_json(const SceneSpec& s) {
    json zones = json::array();
    for (const auto& z : s.ser_layout)
        zones.push_back({{"code", z.code}, {"col0", z.col0}, {"row0", z.row0}, {"col1", z.col1}, {"row1", z.row1}});
    json j = {
        {"width", s.width},
        {"height", s.height},
        {"pixel_size", s.pixel_size},
        {"origin_x", s.origin_x},
        {"origin_y", s.origin_y},
        {"n_stands", s.n_stands},
        {"height_range", {s.height_min, s.height_max}},
        {"ser_layout", zones},
        {"leaf_mix", s.leaf_mix},
        {"noise_sd", s.noise_sd},
        {"nonforest_fraction", s.nonforest_fraction},
        {"footprints",
         {{"along_m", s.tracks.along_m},
          {"across_m", s.tracks.across_m},
          {"n_tracks", s.tracks.n_tracks},
          {"error_sd", s.tracks.error_sd}}},
        {"plots",
         {{"n", s.n_plots},
          {"volume_laws",
           {{"broadleaved", {{"a", s.volume_broadleaved.a}, {"b", s.volume_broadleaved.b}}},
            {"coniferous", {{"a", s.volume_coniferous.a}, {"b", s.volume_coniferous.b}}}}}}},
        {"chm_pixel_size", s.chm_pixel_size},
        {"seed", s.seed},
    };
    if (std::isinf(s.saturation_height)) j["saturation_height"] = "inf";
    else j["saturation_height"] = s.saturation_height;
    return j.dump(2);
}

SyntheticScene gen_scene(const SceneSpec& spec) {
    if (spec.n_stands > 0 && static_cast<std::size_t>(spec.n_stands) > static_cast<std::size_t>(spec.width) * spec.height)
        throw ArgumentError("n_stands exceeds the number of pixels");
    spec.validate();
    const Grid grid = spec.grid();
    Rng rng(mix64(spec.seed ^ 0x5ce7eULL));

    struct Stand {
        double cx, cy;
        float height;
        std::uint16_t leaf;
    };
    std::vector<Stand> stands(static_cast<std::size_t>(spec.n_stands));
    for (auto& s : stands) {
        s.cx = rng.uniform(0.0, spec.width);
        s.cy = rng.uniform(0.0, spec.height);
        const bool forest = rng.uniform() >= spec.nonforest_fraction;
        const double h = rng.uniform(spec.height_min, spec.height_max);
        const bool broad = rng.uniform() < spec.leaf_mix;
        s.height = forest ? static_cast<float>(h) : 0.0f;
        s.leaf = forest ? static_cast<std::uint16_t>(broad ? LeafType::broadleaved : LeafType::coniferous) : 0;
    }

    SyntheticScene scene{Raster(grid, 0.0f), CategoricalRaster(grid), CategoricalRaster(grid), CategoricalRaster(grid)};
    for (int row = 0; row < spec.height; ++row) {
        for (int col = 0; col < spec.width; ++col) {
            const double px = col + 0.5, py = row + 0.5;
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < stands.size(); ++k) {
                const double dx = stands[k].cx - px, dy = stands[k].cy - py;
                const double d = dx * dx + dy * dy;
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            scene.true_height.at(col, row) = stands[best].height;
            scene.dlt.at(col, row) = stands[best].leaf;
            scene.stand_map.at(col, row) = static_cast<std::uint16_t>(best + 1);
        }
    }

    std::vector<SerZone> layout = spec.ser_layout;
    if (layout.empty()) {
        const int half = std::max(1, spec.width / 2);
        layout.push_back({1, 0, 0, half, spec.height});
        if (half < spec.width) layout.push_back({2, half, 0, spec.width, spec.height});
    }
    for (const auto& z : layout)
        for (int row = z.row0; row < z.row1; ++row)
            for (int col = z.col0; col < z.col1; ++col) scene.ser.at(col, row) = z.code;
    return scene;
}

double response_shape(double height, const SceneSpec& spec) {
    if (std::isinf(spec.saturation_height)) return height / spec.height_max;
    const double s = spec.saturation_height;
    return -std::expm1(-height / s) / -std::expm1(-spec.height_max / s);
}

namespace {

struct BandTemplate {
    const char* prefix;
    double beta_lo, beta_hi, alpha_lo, alpha_hi, lo, hi;
};

// Value ranges loosely follow the sensors: backscatter in dB, indices in
// [-1, 1], brightness in reflectance units.
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr BandTemplate kTemplates[] = {
    {"s1_vh", -22.0, -18.0, 3.0, 6.0, -kInf, kInf},  {"s1_vv", -15.0, -11.0, 2.0, 4.0, -kInf, kInf},
    {"s2_bi", 0.15, 0.25, 0.05, 0.10, 0.0, kInf},    {"s2_ndvi", 0.30, 0.40, 0.30, 0.45, -1.0, 1.0},
    {"s2_ndwi", 0.00, 0.10, 0.20, 0.35, -1.0, 1.0},  {"s2_nd56", 0.05, 0.10, 0.10, 0.20, -1.0, 1.0},
    {"alos_hh", -14.0, -10.0, 2.0, 4.0, -kInf, kInf}, {"alos_hv", -22.0, -18.0, 4.0, 7.0, -kInf, kInf},
};

const BandTemplate& template_for(const std::string& name) {
    for (const auto& t : kTemplates)
        if (name.rfind(t.prefix, 0) == 0) return t;
    throw ConsistencyError("no response template for band " + name);
}

} // namespace

SyntheticFeatures gen_features(const Raster& true_height, const SceneSpec& spec, unsigned threads) {
    const auto& names = canonical_feature_names();
    constexpr std::size_t kResponseBands = 14;
    Rng rng(mix64(spec.seed ^ 0xfea7ULL));

    SyntheticFeatures out;
    for (std::size_t i = 0; i < kResponseBands; ++i) {
        const BandTemplate& t = template_for(names[i]);
        BandResponse r{names[i], 0.0, 0.0};
        r.alpha = rng.uniform(t.alpha_lo, t.alpha_hi);
        r.beta = rng.uniform(t.beta_lo, t.beta_hi);
        out.responses.push_back(r);
    }

    std::vector<Raster> bands;
    for (std::size_t i = 0; i < kResponseBands; ++i) {
        const BandTemplate& t = template_for(names[i]);
        const BandResponse& r = out.responses[i];
        Raster band(true_height.grid());
        const auto h = true_height.values();
        auto v = band.values();
        for (std::size_t k = 0; k < v.size(); ++k) {
            if (h[k] == true_height.nodata()) {
                v[k] = band.nodata();
                continue;
            }
            const double g = r.alpha * response_shape(h[k], spec) + r.beta;
            const double noisy = g * (1.0 + spec.noise_sd * rng.normal());
            v[k] = static_cast<float>(std::clamp(noisy, t.lo, t.hi));
        }
        bands.push_back(std::move(band));
    }

    FeatureInputs in;
    in.s1_vh_win = bands[0];
    in.s1_vv_win = bands[1];
    in.s1_vh_sum = bands[2];
    in.s1_vv_sum = bands[3];
    in.s2_win = {bands[4], bands[5], bands[6], bands[7]};
    in.s2_sum = {bands[8], bands[9], bands[10], bands[11]};
    in.alos_hh = bands[12];
    in.alos_hv = bands[13];
    out.stack = build_feature_stack(in, TextureParams{}, threads);
    return out;
}

std::vector<FootprintSample> gen_footprints(const SyntheticScene& scene, const TrackSpec& tracks, std::uint64_t seed) {
    const Grid& g = scene.true_height.grid();
    const double width_m = g.width * g.pixel_size;
    const double height_m = g.height * g.pixel_size;
    const int n_tracks = std::min(tracks.n_tracks, static_cast<int>(std::floor(width_m / tracks.across_m)));
    const int per_track = static_cast<int>(std::floor(height_m / tracks.along_m));
    if (n_tracks < 1 || per_track < 1) throw ArgumentError("scene is smaller than one track spacing");

    const double x0 = g.origin_x + (width_m - (n_tracks - 1) * tracks.across_m) / 2.0;
    const double y0 = g.origin_y - (height_m - (per_track - 1) * tracks.along_m) / 2.0;
    Rng rng(mix64(seed ^ 0xf00dULL));
    std::vector<FootprintSample> out;
    out.reserve(static_cast<std::size_t>(n_tracks) * per_track);
    char id[32];
    for (int t = 0; t < n_tracks; ++t) {
        for (int k = 0; k < per_track; ++k) {
            FootprintSample s;
            s.x = x0 + t * tracks.across_m;
            s.y = y0 - k * tracks.along_m;
            const auto [col, row] = g.pixel_of(s.x, s.y);
            const double h = scene.true_height.at(col, row);
            s.rh98 = std::max(0.0, h + tracks.error_sd * rng.normal());
            s.beam = BeamClass::full_power;
            s.sensitivity = 0.99;
            s.date = "2020-07-01";
            std::snprintf(id, sizeof id, "gt%03d_%05d", t, k);
            s.id = id;
            out.push_back(std::move(s));
        }
    }
    return out;
}

std::vector<PlotRecord> gen_plots(const SyntheticScene& scene, int n, const LawParams& broadleaved,
                                  const LawParams& coniferous, std::uint64_t seed) {
    if (n < 0) throw ArgumentError("plot count must be >= 0");
    std::vector<PlotRecord> out;
    if (n == 0) return out;
    const Grid& g = scene.dlt.grid();
    std::vector<std::size_t> forest;
    for (std::size_t i = 0; i < scene.dlt.codes().size(); ++i)
        if (leaf_type_from_code(scene.dlt.codes()[i])) forest.push_back(i);
    if (forest.empty()) throw ArgumentError("scene has no forest pixel to place plots on");

    Rng rng(mix64(seed ^ 0x9107ULL));
    char id[32];
    for (int i = 0; i < n; ++i) {
        const std::size_t k = forest[rng.below(forest.size())];
        const int col = static_cast<int>(k % static_cast<std::size_t>(g.width));
        const int row = static_cast<int>(k / static_cast<std::size_t>(g.width));
        PlotRecord p;
        p.x = g.origin_x + (col + rng.uniform(0.05, 0.95)) * g.pixel_size;
        p.y = g.origin_y - (row + rng.uniform(0.05, 0.95)) * g.pixel_size;
        p.leaf_type = *leaf_type_from_code(scene.dlt.codes()[k]);
        p.hdom = scene.true_height.values()[k];
        const LawParams& law = p.leaf_type == LeafType::broadleaved ? broadleaved : coniferous;
        const double volume = law.a * std::pow(p.hdom, law.b);
        p.volume = volume;
        p.agb = volume_to_agb(volume, p.leaf_type);
        p.source = PlotSource::synthetic;
        std::snprintf(id, sizeof id, "p%05d", i);
        p.id = id;
        out.push_back(std::move(p));
    }
    return out;
}

Raster make_chm(const Raster& true_height, double fine_pixel_size) {
    const Grid& g = true_height.grid();
    const double ratio = g.pixel_size / fine_pixel_size;
    const int f = static_cast<int>(std::lround(ratio));
    if (f < 1 || std::abs(ratio - f) > 1e-9) throw ArgumentError("CHM pixel size must divide the scene pixel size");
    Grid fine = g;
    fine.width = g.width * f;
    fine.height = g.height * f;
    fine.pixel_size = fine_pixel_size;
    Raster chm(fine);
    for (int row = 0; row < fine.height; ++row)
        for (int col = 0; col < fine.width; ++col) chm.at(col, row) = true_height.at(col / f, row / f);
    return chm;
}

Raster truth_allometry(const SyntheticScene& scene, const SceneSpec& spec, AllometryTarget target) {
    Raster out(scene.true_height.grid());
    for (std::size_t i = 0; i < out.values().size(); ++i) {
        const auto leaf = leaf_type_from_code(scene.dlt.codes()[i]);
        if (!leaf) continue;
        const LawParams& law = *leaf == LeafType::broadleaved ? spec.volume_broadleaved : spec.volume_coniferous;
        double v = law.a * std::pow(static_cast<double>(scene.true_height.values()[i]), law.b);
        if (target == AllometryTarget::agb) v = volume_to_agb(v, *leaf);
        out.values()[i] = static_cast<float>(v);
    }
    return out;
}

SynthOutputs write_synthetic_scene(const SceneSpec& spec, const fs::path& dir, unsigned threads) {
    fs::create_directories(dir);
    SynthOutputs out;
    auto raster_files = [&](const fs::path& stem) {
        out.files.push_back(header_path(stem));
        out.files.push_back(payload_path(stem));
    };

    const SyntheticScene scene = gen_scene(spec);
    write_raster(scene.true_height, dir / "true_height", "true_height");
    write_raster(scene.ser, dir / "ser", "ser");
    write_raster(scene.dlt, dir / "dlt", "dlt");
    write_raster(scene.stand_map, dir / "stand_map", "stand_map");
    write_raster(make_chm(scene.true_height, spec.chm_pixel_size), dir / "chm", "chm");
    write_raster(truth_allometry(scene, spec, AllometryTarget::volume), dir / "truth_volume", "volume");
    write_raster(truth_allometry(scene, spec, AllometryTarget::agb), dir / "truth_agb", "agb");
    for (const char* stem : {"true_height", "ser", "dlt", "stand_map", "chm", "truth_volume", "truth_agb"})
        raster_files(dir / stem);

    const SyntheticFeatures features = gen_features(scene.true_height, spec, threads);
    out.stack_manifest = write_stack(features.stack, dir / "features");
    for (const auto& name : features.stack.names()) raster_files(dir / "features" / name);
    out.files.push_back(out.stack_manifest);

    const auto footprints = gen_footprints(scene, spec.tracks, spec.seed);
    write_footprints(footprints, dir / "footprints.csv");
    out.files.push_back(dir / "footprints.csv");
    const auto plots = gen_plots(scene, spec.n_plots, spec.volume_broadleaved, spec.volume_coniferous, spec.seed);
    write_plots(plots, dir / "plots.csv");
    out.files.push_back(dir / "plots.csv");

    json responses = json::array();
    for (const auto& r : features.responses) responses.push_back({{"band", r.name}, {"alpha", r.alpha}, {"beta", r.beta}});
    const json truth = {
        {"spec", json::parse(scene_spec_to_json(spec))},
        {"responses", responses},
        {"response_shape", "alpha * (1 - exp(-H/s)) / (1 - exp(-Hmax/s)) + beta"},
        {"agb_ratios", {{"broadleaved", kBroadleavedRatio}, {"coniferous", kConiferousRatio}}},
        {"n_footprints", footprints.size()},
        {"n_plots", plots.size()},
    };
    std::ofstream os(dir / "truth.json", std::ios::trunc);
    if (!os) throw Error("cannot write " + (dir / "truth.json").string());
    os << truth.dump(2) << '\n';
    out.files.push_back(dir / "truth.json");
    return out;
}

} // namespace canopy
