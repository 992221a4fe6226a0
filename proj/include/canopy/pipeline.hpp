#pragma once

// Stage runners behind the canopy-forge subcommands and the run manifest
// that records each invocation.

#include "canopy/allometry.hpp"
#include "canopy/features.hpp"
#include "canopy/model.hpp"
#include "canopy/sampling.hpp"
#include "canopy/validation.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace canopy {

inline constexpr const char* kVersion = "0.1.0";

using Logger = std::function<void(const std::string&)>;

struct FileDigest {
    std::string path;
    std::string sha256;
};

struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::vector<FileDigest> inputs;
    std::vector<FileDigest> outputs;
    double wall_time_s = 0.0;

    nlohmann::json to_json() const;
};

/// Digests of files, expanding raster stems to header + payload and
/// directories to their sorted regular files. Paths are recorded relative
/// to `base` when they lie under it.
std::vector<FileDigest> digest_paths(const std::vector<std::filesystem::path>& paths,
                                     const std::filesystem::path& base = {});
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

// ---------------------------------------------------------------- features

/// Scene lists for the features stage. Paths are resolved against `base`.
///   {"s1": {"winter": [{"date", "orbit": "asc"|"desc", "bands": {"VH", "VV"}}], "summer": [...]},
///    "s2": {"winter": [{"date", "bands": {"B2", ...}, "mask"?}], "summer": [...]},
///    "alos": [{"date", "bands": {"HH", "HV"}}],
///    "speckle_radius"?: 3, "texture"?: {...}}
FeatureStack build_features_from_config(const nlohmann::json& config, const std::filesystem::path& base,
                                        unsigned threads, std::vector<std::filesystem::path>* inputs = nullptr,
                                        const Logger& log = {});

TextureParams texture_params_from_json(const nlohmann::json& j, const std::string& path);
QualityFilter quality_from_json(const nlohmann::json& j, const std::string& path);
HyperparamGrid grid_from_json(const nlohmann::json& j, const std::string& path);
PowerLawBounds bounds_from_json(const nlohmann::json& j, const std::string& path);

// ----------------------------------------------------------------- extract

struct ExtractResult {
    std::map<StratumKey, LearningTable> tables;
    StratifyReport report;
    FootprintLoad load;
    std::vector<std::filesystem::path> files;
};

/// Loads footprints, builds per-stratum tables, merges small strata and
/// writes table_<tag>.csv (+ .json sidecar) into `out_dir`.
ExtractResult run_extract(const FeatureStack& stack, const CategoricalRaster& ser, const CategoricalRaster& dlt,
                          const std::filesystem::path& footprints_csv, const QualityFilter& quality,
                          std::size_t min_stratum_rows, const std::filesystem::path& out_dir, unsigned threads,
                          const Logger& log = {});

std::vector<LearningTable> read_tables(const std::filesystem::path& dir);

// ------------------------------------------------------------------- train

struct TrainResult {
    ModelSet models;
    std::vector<std::filesystem::path> files;
};

/// Trains every table and writes model_<tag>.json and cv_<tag>.json.
TrainResult run_train(const std::vector<LearningTable>& tables, const HyperparamGrid& grid, std::uint64_t seed,
                      int folds, const std::filesystem::path& out_dir, unsigned threads, const Logger& log = {});

// --------------------------------------------------------------- allometry

/// Fits one law per leaf type present in the plots having the target value.
PowerLawSet fit_laws(std::span<const PlotRecord> plots, AllometryTarget target, const PowerLawBounds& bounds,
                     std::optional<LeafType> only = std::nullopt);

// ---------------------------------------------------------------- validate

struct ValidationInputs {
    std::optional<Raster> height, volume, agb;
    std::vector<PlotRecord> plots;
    GroupBy group_by = GroupBy::site;
    std::optional<Raster> chm;
    std::optional<CategoricalRaster> dlt;
    /// Synthetic truth directory (true_height, truth_volume, truth_agb).
    std::optional<std::filesystem::path> truth_dir;
    std::optional<CategoricalRaster> classes;
    /// Pixels excluded from truth comparisons (footprint coverage).
    std::vector<bool> excluded;
};

/// Report with per-site x {all, broadleaved, coniferous} plot rows, CHM
/// comparison, held-out truth comparison and class aggregation, each when
/// its inputs are present.
nlohmann::json run_validate(const ValidationInputs& in, std::vector<PairedValue>* scatter = nullptr);

nlohmann::json metrics_to_json(const MetricsReport& m);

/// Mask of pixels covered by any footprint.
std::vector<bool> footprint_mask(const Grid& grid, std::span<const FootprintSample> samples);

// ---------------------------------------------------------------- pipeline

struct PipelineConfig {
    nlohmann::json raw; // snapshot as given
    std::filesystem::path base;
    std::uint64_t seed = 42;
    std::filesystem::path out;
    std::optional<std::filesystem::path> stack;
    std::optional<nlohmann::json> features;
    std::filesystem::path ser, dlt, footprints, plots;
    QualityFilter quality;
    HyperparamGrid grid;
    int folds = 10;
    std::size_t min_stratum_rows = kMinStratumRows;
    TextureParams texture;
    PowerLawBounds bounds;
    int tile_size = 256;
    std::optional<std::filesystem::path> chm, truth, classes;
    GroupBy group_by = GroupBy::site;
};

/// Parses and validates a pipeline config; relative paths resolve against
/// `base`. Throws ConfigError with the dotted field path.
PipelineConfig parse_pipeline_config(const nlohmann::json& j, const std::filesystem::path& base);

struct PipelineResult {
    nlohmann::json report;
    RunManifest manifest;
    std::filesystem::path manifest_path;
};

/// features -> extract -> train -> predict -> allometry -> validate.
PipelineResult run_pipeline(const PipelineConfig& config, unsigned threads, const Logger& log = {});

} // namespace canopy
