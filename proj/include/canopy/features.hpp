#pragma once

#include "canopy/raster.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace canopy {

inline constexpr std::size_t kFeatureCount = 38;

/// The 38 stack band names in canonical order.
const std::vector<std::string>& canonical_feature_names();

/// Named per-date band rasters (e.g. "B2", "VH", "HH").
using BandSet = std::map<std::string, Raster>;

struct SpectralIndices {
    Raster bi;
    Raster ndvi;
    Raster ndwi;
    Raster nd56;
};

/// BI, NDVI, NDWI and ND56 from a Sentinel-2 band set. Requires B2, B3,
/// B4, B5, B6, B8, B8A and B11.
SpectralIndices spectral_indices(const BandSet& s2);

/// Per-pixel uniform-weight mean over scenes. A value counts when it is
/// not nodata and, if masks are given, its mask code is 1.
Raster composite_mean(std::span<const Raster> scenes, std::span<const CategoricalRaster> masks = {});

/// Mean of ascending and descending intensities with one-sided fallback.
Raster orbit_average(const Raster& asc, const Raster& desc);

/// Multi-image ratio speckle filter:
///   J_k = <I_k>/N * sum_i I_i / <I_i>
/// with <.> the local mean over a (2r+1)^2 window ignoring nodata.
std::vector<Raster> speckle_filter_multitemporal(std::span<const Raster> stack, int window_radius = 3);

/// 10*log10 of linear intensity; non-positive or nodata input gives nodata.
Raster to_db(const Raster& linear);

struct TextureParams {
    int offset = 1;
    int radius = 3;
    int levels = 100;
    std::vector<int> orientations{0, 45, 90, 135};

    void validate() const;
};

struct TextureRasters {
    Raster homogeneity;
    Raster contrast;
    Raster correlation;
};

/// Haralick metrics of one window. Metrics are undefined (has_* false)
/// when no orientation has a valid pair, or, for correlation, when every
/// orientation has zero grey-level variance.
struct TextureValues {
    bool has_hom_con = false;
    bool has_correlation = false;
    double homogeneity = 0.0;
    double contrast = 0.0;
    double correlation = 0.0;
};

/// `bins` is a row-major side x side window of grey levels, -1 for
/// invalid cells. Pairs are formed at the params' offset for each
/// orientation and counted symmetrically; metrics are averaged over
/// orientations.
TextureValues glcm_window(std::span<const int> bins, int side, const TextureParams& params);

/// Grey level of `v` given the quantization bounds; clamps to [0, levels-1].
int quantize(double v, double lo, double hi, int levels);

TextureRasters glcm_textures(const Raster& source, const TextureParams& params = {}, unsigned threads = 1);

/// Preprocessed inputs of the 38-band stack. Backscatter bands are in dB.
struct FeatureInputs {
    Raster s1_vh_win, s1_vv_win, s1_vh_sum, s1_vv_sum;
    SpectralIndices s2_win, s2_sum;
    Raster alos_hh, alos_hv;
};

FeatureStack build_feature_stack(const FeatureInputs& in, const TextureParams& params = {}, unsigned threads = 1);

/// Throws ConsistencyError unless the stack holds exactly the canonical bands in order.
void check_canonical_stack(const FeatureStack& stack);

/// Writes every band as `<dir>/<name>` plus `<dir>/stack.json` listing the
/// bands in order with paths relative to the manifest. Returns the manifest path.
std::filesystem::path write_stack(const FeatureStack& stack, const std::filesystem::path& dir);
FeatureStack read_stack(const std::filesystem::path& manifest);

} // namespace canopy
