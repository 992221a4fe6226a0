#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace canopy {

inline constexpr float kDefaultNodata = -9999.0f;

/// Axis-aligned north-up grid. Origin is the top-left corner of the
/// top-left pixel; rows increase southward.
struct Grid {
    int width = 1;
    int height = 1;
    double origin_x = 0.0;
    double origin_y = 0.0;
    double pixel_size = 10.0;
    float nodata = kDefaultNodata;

    std::size_t size() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    double center_x(int col) const { return origin_x + (col + 0.5) * pixel_size; }
    double center_y(int row) const { return origin_y - (row + 0.5) * pixel_size; }
    bool contains(int col, int row) const { return col >= 0 && row >= 0 && col < width && row < height; }
    /// Pixel containing a point; may lie outside the grid.
    std::pair<int, int> pixel_of(double x, double y) const;

    void validate() const;
    bool operator==(const Grid&) const = default;
};

class Raster {
public:
    Raster() = default;
    explicit Raster(const Grid& grid);
    Raster(const Grid& grid, float fill);
    Raster(const Grid& grid, std::vector<float> values);

    const Grid& grid() const { return grid_; }
    int width() const { return grid_.width; }
    int height() const { return grid_.height; }
    float nodata() const { return grid_.nodata; }

    float at(int col, int row) const { return values_[index(col, row)]; }
    float& at(int col, int row) { return values_[index(col, row)]; }
    bool is_nodata(int col, int row) const { return at(col, row) == grid_.nodata; }
    bool is_nodata_value(float v) const { return v == grid_.nodata; }

    std::span<const float> values() const { return values_; }
    std::span<float> values() { return values_; }

    std::size_t index(int col, int row) const {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(grid_.width) + static_cast<std::size_t>(col);
    }

    /// Min/max over valid cells. Throws ArgumentError if none is valid.
    std::pair<float, float> valid_range() const;
    std::size_t count_valid() const;

private:
    Grid grid_;
    std::vector<float> values_;
};

/// Code 0 means "no class".
class CategoricalRaster {
public:
    CategoricalRaster() = default;
    explicit CategoricalRaster(const Grid& grid, std::uint16_t fill = 0);
    CategoricalRaster(const Grid& grid, std::vector<std::uint16_t> codes);

    const Grid& grid() const { return grid_; }
    int width() const { return grid_.width; }
    int height() const { return grid_.height; }

    std::uint16_t at(int col, int row) const { return codes_[index(col, row)]; }
    std::uint16_t& at(int col, int row) { return codes_[index(col, row)]; }
    std::span<const std::uint16_t> codes() const { return codes_; }
    std::span<std::uint16_t> codes() { return codes_; }

    std::size_t index(int col, int row) const {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(grid_.width) + static_cast<std::size_t>(col);
    }

private:
    Grid grid_;
    std::vector<std::uint16_t> codes_;
};

/// Grid-aligned ordered set of named bands.
class FeatureStack {
public:
    FeatureStack() = default;
    explicit FeatureStack(const Grid& grid) : grid_(grid), has_grid_(true) {}

    const Grid& grid() const { return grid_; }
    std::size_t size() const { return bands_.size(); }
    bool empty() const { return bands_.empty(); }

    /// Throws MisalignmentError on grid mismatch, ArgumentError on duplicate name.
    void add(std::string name, Raster band);

    const Raster& band(std::size_t i) const { return bands_[i].second; }
    const Raster& band(const std::string& name) const;
    const std::string& name(std::size_t i) const { return bands_[i].first; }
    std::vector<std::string> names() const;
    bool contains(const std::string& name) const;

private:
    Grid grid_;
    bool has_grid_ = false;
    std::vector<std::pair<std::string, Raster>> bands_;
};

using AnyRaster = std::variant<const Raster*, const CategoricalRaster*>;

/// Throws MisalignmentError naming the first raster (by index) whose grid
/// differs from the first one, and the first differing field.
void assert_aligned(std::span<const Grid> grids);
void assert_aligned(std::initializer_list<AnyRaster> rasters);

/// Max-aggregate onto a coarser grid, ignoring nodata.
Raster resample_max(const Raster& fine, double coarse_pixel_size);

/// (2r+1)^2 values in row-major order, out-of-bounds cells set to nodata.
std::vector<float> window(const Raster& raster, int center_col, int center_row, int radius);

// On-disk format: <stem>.hdr.json + <stem>.bin, little-endian row-major.

std::filesystem::path header_path(const std::filesystem::path& stem);
std::filesystem::path payload_path(const std::filesystem::path& stem);
/// Accepts either the stem or the path to the .hdr.json / .bin file.
std::filesystem::path raster_stem(const std::filesystem::path& path);

void write_raster(const Raster& raster, const std::filesystem::path& stem, const std::string& band_name = "");
void write_raster(const CategoricalRaster& raster, const std::filesystem::path& stem, const std::string& band_name = "");
Raster read_raster(const std::filesystem::path& stem);
CategoricalRaster read_categorical(const std::filesystem::path& stem);
/// Reads only the header's band_name (empty if absent).
std::string read_band_name(const std::filesystem::path& stem);

} // namespace canopy
