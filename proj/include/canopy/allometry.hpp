#pragma once

#include "canopy/raster.hpp"
#include "canopy/sampling.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>

namespace canopy {

enum class AllometryTarget { volume, agb };
std::string to_string(AllometryTarget t);
AllometryTarget parse_allometry_target(const std::string& s);

/// Parameter box for y = a * H^b; a_min is exclusive.
struct PowerLawBounds {
    double a_min = 0.001;
    double a_max = 100.0;
    double b_min = 0.5;
    double b_max = 3.0;
};

struct PowerLawFitMeta {
    std::size_t n = 0;
    double r2 = 0.0;
    double sse = 0.0;
    int iterations = 0;
    bool a_at_bound = false;
    bool b_at_bound = false;
    PowerLawBounds bounds;
};

struct PowerLaw {
    double a = 1.0;
    double b = 1.0;
    AllometryTarget target = AllometryTarget::volume;
    LeafType leaf_type = LeafType::broadleaved;
    PowerLawFitMeta fit_meta;

    double operator()(double height) const;
};

/// Dry-biomass tons per m^3 of stem volume.
inline constexpr double kBroadleavedRatio = 0.89;
inline constexpr double kConiferousRatio = 0.59;

double conversion_ratio(LeafType leaf);
double volume_to_agb(double volume, LeafType leaf);

/// Bounded least-squares fit of y = a * H^b: log-log initialization, then
/// projected Gauss-Newton with step halving in the original space.
/// `sse_trace`, if given, receives the SSE after every accepted iterate.
PowerLaw fit_power_law(std::span<const double> heights, std::span<const double> targets,
                       const PowerLawBounds& bounds = {}, std::vector<double>* sse_trace = nullptr);

double power_law_sse(std::span<const double> heights, std::span<const double> targets, double a, double b);

using PowerLawSet = std::map<LeafType, PowerLaw>;

/// Per-pixel a*H^b with the law of the pixel's leaf type.
Raster apply_power_law(const Raster& height, const CategoricalRaster& dlt, const PowerLawSet& laws);

std::string law_to_json(const PowerLaw& law);
PowerLaw law_from_json(const std::string& text);
void save_law(const PowerLaw& law, const std::filesystem::path& path);
PowerLaw load_law(const std::filesystem::path& path);
std::string law_file_name(AllometryTarget target, LeafType leaf);
/// Laws of one target found in `dir` (law_<target>_<leaftype>.json).
PowerLawSet load_laws(const std::filesystem::path& dir, AllometryTarget target);

} // namespace canopy
