#pragma once

#include "canopy/allometry.hpp"
#include "canopy/features.hpp"
#include "canopy/raster.hpp"
#include "canopy/sampling.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace canopy {

/// Half-open pixel rectangle [col0, col1) x [row0, row1) carrying one SER code.
struct SerZone {
    std::uint16_t code = 1;
    int col0 = 0, row0 = 0, col1 = 0, row1 = 0;
};

struct TrackSpec {
    double along_m = 60.0;
    double across_m = 600.0;
    int n_tracks = 8;
    double error_sd = 2.0;
};

struct LawParams {
    double a = 1.0;
    double b = 1.0;
};

struct SceneSpec {
    int width = 256;
    int height = 256;
    double pixel_size = 10.0;
    double origin_x = 600000.0;
    double origin_y = 6800000.0;
    int n_stands = 100;
    double height_min = 5.0;
    double height_max = 35.0;
    /// Empty layout: left half SER 1, right half SER 2.
    std::vector<SerZone> ser_layout;
    double leaf_mix = 0.5;
    double noise_sd = 0.05;
    double saturation_height = std::numeric_limits<double>::infinity();
    /// Share of stands that are non-forest (DLT 0, height 0).
    double nonforest_fraction = 0.1;
    TrackSpec tracks;
    int n_plots = 200;
    LawParams volume_broadleaved{2.0, 1.5};
    LawParams volume_coniferous{1.6, 1.6};
    double chm_pixel_size = 5.0;
    std::uint64_t seed = 42;

    Grid grid() const;
    /// Throws ConfigError naming the offending field.
    void validate() const;
};

SceneSpec scene_spec_from_json(const std::string& text);
std::string scene_spec_to_json(const SceneSpec& spec);

struct SyntheticScene {
    Raster true_height;
    CategoricalRaster ser;
    CategoricalRaster dlt;
    CategoricalRaster stand_map; // stand index + 1
};

SyntheticScene gen_scene(const SceneSpec& spec);

/// g(H) = alpha * r(H) + beta with r(H) = (1 - exp(-H/s)) / (1 - exp(-Hmax/s)),
/// which tends to H / Hmax when s is infinite.
struct BandResponse {
    std::string name;
    double alpha = 0.0;
    double beta = 0.0;
};

double response_shape(double height, const SceneSpec& spec);

struct SyntheticFeatures {
    FeatureStack stack;
    std::vector<BandResponse> responses; // the 14 non-texture bands
};

/// Response bands with multiplicative noise; textures come from glcm_textures.
SyntheticFeatures gen_features(const Raster& true_height, const SceneSpec& spec, unsigned threads = 1);

/// Parallel north-south tracks at across_m spacing, min(n_tracks,
/// floor(scene width / across_m)) of them, centred in the scene.
std::vector<FootprintSample> gen_footprints(const SyntheticScene& scene, const TrackSpec& tracks, std::uint64_t seed);

/// Plots at random in-forest locations with volume = a*H^b of the plot's
/// leaf type and agb = ratio * volume.
std::vector<PlotRecord> gen_plots(const SyntheticScene& scene, int n, const LawParams& broadleaved,
                                  const LawParams& coniferous, std::uint64_t seed);

/// Nearest-neighbour upsampling of the true height to a finer pixel size.
Raster make_chm(const Raster& true_height, double fine_pixel_size);

/// Per-pixel volume or AGB implied by the true height and the scene's laws;
/// nodata off forest.
Raster truth_allometry(const SyntheticScene& scene, const SceneSpec& spec, AllometryTarget target);

struct SynthOutputs {
    std::filesystem::path stack_manifest;
    std::vector<std::filesystem::path> files;
};

/// Generates the whole scene and writes rasters, features/, footprints.csv,
/// plots.csv and truth.json into `dir`.
SynthOutputs write_synthetic_scene(const SceneSpec& spec, const std::filesystem::path& dir, unsigned threads = 1);

} // namespace canopy
