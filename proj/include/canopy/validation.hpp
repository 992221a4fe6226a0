#pragma once

#include "canopy/raster.hpp"
#include "canopy/sampling.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace canopy {

/// Six-statistic comparison of predictions against references.
/// Relative metrics are percentages of mean(ref); r2 is the squared
/// Pearson correlation and bias the mean signed error (pred - ref).
struct MetricsReport {
    std::size_t n = 0;
    std::optional<double> r2;
    double rmse = 0.0;
    double mae = 0.0;
    std::optional<double> rrmse;
    std::optional<double> rmae;
    double bias = 0.0;
};

MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> ref);

enum class PlotTarget { height, volume, agb };
std::string to_string(PlotTarget t);

enum class GroupBy { none, leaf_type, site };

/// Reference value of a plot for a target; nullopt when the plot lacks it.
std::optional<double> plot_reference(const PlotRecord& plot, PlotTarget target);

struct PairedValue {
    std::string id;
    std::string group;
    double ref = 0.0;
    double pred = 0.0;
};

struct PlotComparison {
    std::map<std::string, MetricsReport> groups;
    std::vector<PairedValue> pairs;
    std::size_t dropped_nodata = 0;
    std::size_t dropped_outside = 0;
    std::size_t dropped_missing_reference = 0;
};

/// Pairs each plot with the map value of the pixel containing it. Sites
/// are the plots' source labels. Throws Error if no plot has a valid pair.
PlotComparison compare_map_plots(const Raster& map, std::span<const PlotRecord> plots, PlotTarget target,
                                 GroupBy group_by);

struct ChmComparison {
    MetricsReport all;
    std::map<std::string, MetricsReport> by_leaf_type;
    std::vector<PairedValue> pairs;
};

/// Max-resamples the fine CHM onto the prediction grid and compares the
/// overlapping pixels. The CHM origin must sit on the prediction grid.
ChmComparison compare_map_chm(const Raster& pred, const Raster& chm_fine, const CategoricalRaster* dlt = nullptr);

struct ClassAggregate {
    std::uint32_t code = 0;
    std::size_t n = 0;
    double mean_pred = 0.0;
    double mean_ref = 0.0;
};

struct AggregationResult {
    std::vector<ClassAggregate> classes; // ascending code
    MetricsReport report;                // over class means
};

/// Class means of paired values, then metrics over the class means.
/// Pairs with class code 0 are ignored.
AggregationResult aggregate_by_class(std::span<const double> pred, std::span<const double> ref,
                                     std::span<const std::uint32_t> classes);
/// Pixel pairs of two maps grouped by a class raster.
AggregationResult aggregate_by_class(const Raster& pred, const Raster& ref, const CategoricalRaster& classes);
/// Plot pairs with the class read from the raster under each plot.
AggregationResult aggregate_by_class(const Raster& pred, std::span<const PlotRecord> plots, PlotTarget target,
                                     const CategoricalRaster& classes);
/// Plot pairs with the class supplied per plot.
AggregationResult aggregate_by_class(const Raster& pred, std::span<const PlotRecord> plots, PlotTarget target,
                                     const std::function<std::uint32_t(const PlotRecord&)>& class_of);

/// Writes (id, group, ref, pred) rows for scatter plotting.
void write_pairs_csv(std::span<const PairedValue> pairs, const std::string& path);

} // namespace canopy
