#pragma once

#include "canopy/raster.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace canopy {

enum class BeamClass { full_power, coverage };
enum class LeafType : std::uint16_t { broadleaved = 1, coniferous = 2 };
enum class PlotSource { NFI, ONF, synthetic };

std::string to_string(BeamClass b);
std::string to_string(LeafType t);
std::string to_string(PlotSource s);
/// Accepts "broadleaved"/"b" and "coniferous"/"c".
LeafType parse_leaf_type(const std::string& s);
/// DLT raster code to leaf type; nullopt for non-forest or unknown codes.
std::optional<LeafType> leaf_type_from_code(std::uint16_t code);

struct FootprintSample {
    std::string id;
    double x = 0.0, y = 0.0;
    double rh98 = 0.0;
    BeamClass beam = BeamClass::full_power;
    double sensitivity = 1.0;
    std::string date; // ISO yyyy-mm-dd
};

struct PlotRecord {
    std::string id;
    double x = 0.0, y = 0.0;
    double hdom = 0.0;
    std::optional<double> volume;
    std::optional<double> agb;
    LeafType leaf_type = LeafType::broadleaved;
    PlotSource source = PlotSource::synthetic;
};

struct QualityFilter {
    bool full_power_only = true;
    /// Strict: a sample is kept only if sensitivity > min_sensitivity.
    double min_sensitivity = 0.95;
    /// Optional inclusive ISO date range.
    std::optional<std::string> date_from;
    std::optional<std::string> date_to;
};

struct RowError {
    std::size_t line = 0;
    std::string message;
};

struct FootprintLoad {
    std::vector<FootprintSample> samples;
    std::size_t rows_read = 0;
    std::size_t dropped_beam = 0;
    std::size_t dropped_sensitivity = 0;
    std::size_t dropped_date = 0;
    std::vector<RowError> errors;
    std::vector<std::string> warnings;

    std::size_t dropped() const { return dropped_beam + dropped_sensitivity + dropped_date; }
};

bool passes_quality(const FootprintSample& s, const QualityFilter& q);

FootprintLoad load_footprints(const std::filesystem::path& path, const QualityFilter& quality);
void write_footprints(std::span<const FootprintSample> samples, const std::filesystem::path& path);

struct PlotLoad {
    std::vector<PlotRecord> plots;
    std::vector<RowError> errors;
};

PlotLoad load_plots(const std::filesystem::path& path);
void write_plots(std::span<const PlotRecord> plots, const std::filesystem::path& path);

inline constexpr double kFootprintRadius = 12.5;

/// In-bounds pixels whose centers lie within `radius` of (x, y).
std::vector<std::pair<int, int>> footprint_pixels(const Grid& grid, double x, double y, double radius = kFootprintRadius);

/// Per-band mean over the footprint's pixels. nullopt when the center is
/// outside the grid or some band has no valid pixel.
std::optional<std::vector<double>> extract_footprint_features(const FootprintSample& sample, const FeatureStack& stack,
                                                              double radius = kFootprintRadius);

/// ser_code 0 marks the leaf-type-wide fallback stratum covering every SER.
struct StratumKey {
    std::uint32_t ser_code = 0;
    LeafType leaf_type = LeafType::broadleaved;

    bool is_fallback() const { return ser_code == 0; }
    auto operator<=>(const StratumKey&) const = default;
};

std::string to_string(const StratumKey& k);
/// File-name tag: "<ser>_<leaftype>", ser is "all" for the fallback.
std::string stratum_tag(const StratumKey& k);

struct LearningTable {
    StratumKey stratum;
    std::vector<std::string> feature_names;
    std::vector<double> X; // row-major rows() x cols()
    std::vector<double> y;
    std::vector<std::string> sample_ids;

    std::size_t rows() const { return y.size(); }
    std::size_t cols() const { return feature_names.size(); }
    std::span<const double> row(std::size_t i) const { return {X.data() + i * cols(), cols()}; }
    void append(std::span<const double> features, double target, const std::string& id);
    /// Rows whose index has keep[i] true, order preserved.
    LearningTable subset(const std::vector<bool>& keep) const;
};

struct StratifyReport {
    std::size_t input = 0;
    std::size_t dropped_nonforest = 0;
    std::size_t dropped_no_ser = 0;
    std::size_t dropped_outside = 0;
    std::size_t dropped_nodata_features = 0;
    std::size_t kept() const {
        return input - dropped_nonforest - dropped_no_ser - dropped_outside - dropped_nodata_features;
    }
};

/// Tables keyed by the SER and DLT codes under each sample center. Rows
/// are ordered by sample id.
std::map<StratumKey, LearningTable> stratify_and_build(std::span<const FootprintSample> samples,
                                                       const FeatureStack& stack, const CategoricalRaster& ser,
                                                       const CategoricalRaster& dlt, StratifyReport* report = nullptr,
                                                       unsigned threads = 1);

inline constexpr std::size_t kMinStratumRows = 200;

/// Strata with fewer than min_rows rows are dropped in favour of a
/// per-leaf-type fallback table holding every row of that leaf type.
std::map<StratumKey, LearningTable> merge_small_strata(std::map<StratumKey, LearningTable> tables,
                                                       std::size_t min_rows = kMinStratumRows);

/// CSV (id, features..., rh98) plus a JSON sidecar with stratum, feature
/// order and provenance.
void write_learning_table(const LearningTable& table, const std::filesystem::path& csv_path,
                          const std::string& provenance_json = "{}");
LearningTable read_learning_table(const std::filesystem::path& csv_path);

/// Splits a CSV line on commas (no quoting support).
std::vector<std::string> split_csv_line(const std::string& line);

} // namespace canopy
