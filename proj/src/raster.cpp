#include "canopy/raster.hpp"

#include "canopy/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace canopy {

namespace fs = std::filesystem;
using nlohmann::json;

std::pair<int, int> Grid::pixel_of(double x, double y) const {
    const int col = static_cast<int>(std::floor((x - origin_x) / pixel_size));
    const int row = static_cast<int>(std::floor((origin_y - y) / pixel_size));
    return {col, row};
}

void Grid::validate() const {
    if (width < 1 || height < 1)
        throw ArgumentError("grid dimensions must be >= 1, got " + std::to_string(width) + "x" + std::to_string(height));
    if (!(pixel_size > 0.0) || !std::isfinite(pixel_size))
        throw ArgumentError("grid pixel_size must be > 0");
    if (std::isnan(nodata))
        throw ArgumentError("nodata sentinel must not be NaN");
}

Raster::Raster(const Grid& grid) : Raster(grid, grid.nodata) {}

Raster::Raster(const Grid& grid, float fill) : grid_(grid), values_(grid.size(), fill) {
    grid_.validate();
}

Raster::Raster(const Grid& grid, std::vector<float> values) : grid_(grid), values_(std::move(values)) {
    grid_.validate();
    if (values_.size() != grid_.size())
        throw ArgumentError("raster value count " + std::to_string(values_.size()) + " does not match grid size " +
                            std::to_string(grid_.size()));
}

std::pair<float, float> Raster::valid_range() const {
    float lo = 0.0f, hi = 0.0f;
    bool any = false;
    for (float v : values_) {
        if (v == grid_.nodata) continue;
        if (!any) {
            lo = hi = v;
            any = true;
        } else {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (!any) throw ArgumentError("raster has no valid cell");
    return {lo, hi};
}

std::size_t Raster::count_valid() const {
    return static_cast<std::size_t>(std::count_if(values_.begin(), values_.end(), [&](float v) { return v != grid_.nodata; }));
}

CategoricalRaster::CategoricalRaster(const Grid& grid, std::uint16_t fill) : grid_(grid), codes_(grid.size(), fill) {
    grid_.validate();
}

CategoricalRaster::CategoricalRaster(const Grid& grid, std::vector<std::uint16_t> codes)
    : grid_(grid), codes_(std::move(codes)) {
    grid_.validate();
    if (codes_.size() != grid_.size())
        throw ArgumentError("categorical raster code count does not match grid size");
}

void FeatureStack::add(std::string name, Raster band) {
    if (!has_grid_) {
        grid_ = band.grid();
        has_grid_ = true;
    }
    const Grid grids[] = {grid_, band.grid()};
    assert_aligned(grids);
    if (contains(name)) throw ArgumentError("duplicate band name '" + name + "'");
    bands_.emplace_back(std::move(name), std::move(band));
}

const Raster& FeatureStack::band(const std::string& name) const {
    for (const auto& [n, r] : bands_)
        if (n == name) return r;
    throw ArgumentError("no band named '" + name + "'");
}

std::vector<std::string> FeatureStack::names() const {
    std::vector<std::string> out;
    out.reserve(bands_.size());
    for (const auto& b : bands_) out.push_back(b.first);
    return out;
}

bool FeatureStack::contains(const std::string& name) const {
    return std::any_of(bands_.begin(), bands_.end(), [&](const auto& b) { return b.first == name; });
}

void assert_aligned(std::span<const Grid> grids) {
    if (grids.empty()) return;
    const Grid& ref = grids.front();
    for (std::size_t i = 1; i < grids.size(); ++i) {
        const Grid& g = grids[i];
        const char* field = nullptr;
        if (g.width != ref.width) field = "width";
        else if (g.height != ref.height) field = "height";
        else if (g.origin_x != ref.origin_x) field = "origin_x";
        else if (g.origin_y != ref.origin_y) field = "origin_y";
        else if (g.pixel_size != ref.pixel_size) field = "pixel_size";
        if (field)
            throw MisalignmentError("raster #" + std::to_string(i) + " misaligned on " + field, i, field);
    }
}

void assert_aligned(std::initializer_list<AnyRaster> rasters) {
    std::vector<Grid> grids;
    grids.reserve(rasters.size());
    for (const auto& r : rasters)
        std::visit([&](const auto* p) { grids.push_back(p->grid()); }, r);
    assert_aligned(grids);
}

Raster resample_max(const Raster& fine, double coarse_pixel_size) {
    const Grid& fg = fine.grid();
    const double ratio_f = coarse_pixel_size / fg.pixel_size;
    const long ratio = std::lround(ratio_f);
    if (ratio < 1 || std::abs(ratio_f - static_cast<double>(ratio)) > 1e-9)
        throw ArgumentError("coarse pixel size must be an integer multiple of the fine pixel size");
    if (fg.width % ratio != 0 || fg.height % ratio != 0)
        throw ArgumentError("fine raster dimensions are not divisible by the resampling ratio");

    Grid cg = fg;
    cg.width = fg.width / static_cast<int>(ratio);
    cg.height = fg.height / static_cast<int>(ratio);
    cg.pixel_size = coarse_pixel_size;
    Raster out(cg);
    const int k = static_cast<int>(ratio);
    for (int r = 0; r < cg.height; ++r) {
        for (int c = 0; c < cg.width; ++c) {
            bool any = false;
            float best = 0.0f;
            for (int dr = 0; dr < k; ++dr)
                for (int dc = 0; dc < k; ++dc) {
                    const float v = fine.at(c * k + dc, r * k + dr);
                    if (v == fg.nodata) continue;
                    if (!any || v > best) best = v;
                    any = true;
                }
            if (any) out.at(c, r) = best;
        }
    }
    return out;
}

std::vector<float> window(const Raster& raster, int center_col, int center_row, int radius) {
    if (radius < 0) throw ArgumentError("window radius must be >= 0");
    const int side = 2 * radius + 1;
    std::vector<float> out(static_cast<std::size_t>(side) * side, raster.nodata());
    std::size_t i = 0;
    for (int r = center_row - radius; r <= center_row + radius; ++r)
        for (int c = center_col - radius; c <= center_col + radius; ++c, ++i)
            if (raster.grid().contains(c, r)) out[i] = raster.at(c, r);
    return out;
}

// ---- file format ----

fs::path header_path(const fs::path& stem) { return fs::path(stem.string() + ".hdr.json"); }
fs::path payload_path(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }

fs::path raster_stem(const fs::path& path) {
    const std::string s = path.string();
    constexpr std::string_view hdr = ".hdr.json";
    constexpr std::string_view bin = ".bin";
    if (s.size() > hdr.size() && s.ends_with(hdr)) return s.substr(0, s.size() - hdr.size());
    if (s.size() > bin.size() && s.ends_with(bin)) return s.substr(0, s.size() - bin.size());
    return path;
}

namespace {

template <class T>
void write_payload(const fs::path& path, std::span<const T> values) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (T v : values) {
            unsigned char b[sizeof(T)];
            std::memcpy(b, &v, sizeof(T));
            std::reverse(b, b + sizeof(T));
            os.write(reinterpret_cast<const char*>(b), sizeof(T));
        }
    }
    if (!os) throw Error("failed writing " + path.string());
}

template <class T>
std::vector<T> read_payload(const fs::path& path, std::size_t expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputFormatError("cannot open payload " + path.string());
    is.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(is.tellg());
    is.seekg(0);
    if (bytes != expected * sizeof(T))
        throw PayloadLengthError("payload " + path.string() + " holds " + std::to_string(bytes / sizeof(T)) +
                                 " values (" + std::to_string(bytes) + " bytes), header requires " +
                                 std::to_string(expected));
    std::vector<T> out(expected);
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if constexpr (std::endian::native != std::endian::little) {
        for (T& v : out) {
            unsigned char b[sizeof(T)];
            std::memcpy(b, &v, sizeof(T));
            std::reverse(b, b + sizeof(T));
            std::memcpy(&v, b, sizeof(T));
        }
    }
    return out;
}

void write_header(const Grid& g, const fs::path& stem, const char* dtype, const std::string& band_name) {
    json h;
    h["width"] = g.width;
    h["height"] = g.height;
    h["origin_x"] = g.origin_x;
    h["origin_y"] = g.origin_y;
    h["pixel_size"] = g.pixel_size;
    h["nodata"] = g.nodata;
    h["dtype"] = dtype;
    h["band_name"] = band_name;
    std::ofstream os(header_path(stem), std::ios::trunc);
    if (!os) throw Error("cannot open " + header_path(stem).string() + " for writing");
    os << h.dump(2) << '\n';
}

struct Header {
    Grid grid;
    std::string dtype;
    std::string band_name;
};

Header read_header(const fs::path& stem) {
    const fs::path hp = header_path(stem);
    std::ifstream is(hp);
    if (!is) throw InputFormatError("cannot open header " + hp.string());
    json h;
    try {
        h = json::parse(is);
    } catch (const json::exception& e) {
        throw InputFormatError("malformed header " + hp.string() + ": " + e.what());
    }
    Header out;
    try {
        out.grid.width = h.at("width").get<int>();
        out.grid.height = h.at("height").get<int>();
        out.grid.origin_x = h.at("origin_x").get<double>();
        out.grid.origin_y = h.at("origin_y").get<double>();
        out.grid.pixel_size = h.at("pixel_size").get<double>();
        out.grid.nodata = h.contains("nodata") ? h["nodata"].get<float>() : kDefaultNodata;
        out.dtype = h.at("dtype").get<std::string>();
        if (h.contains("band_name") && h["band_name"].is_string()) out.band_name = h["band_name"].get<std::string>();
    } catch (const json::exception& e) {
        throw InputFormatError("malformed header " + hp.string() + ": " + e.what());
    }
    try {
        out.grid.validate();
    } catch (const ArgumentError& e) {
        throw InputFormatError("malformed header " + hp.string() + ": " + e.what());
    }
    if (out.dtype != "float32" && out.dtype != "uint16")
        throw UnknownDtypeError("unknown dtype '" + out.dtype + "' in " + hp.string());
    return out;
}

} // namespace

void write_raster(const Raster& raster, const fs::path& stem, const std::string& band_name) {
    for (float v : raster.values())
        if (std::isnan(v)) throw ArgumentError("refusing to write NaN value to " + stem.string());
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    write_header(raster.grid(), stem, "float32", band_name);
    write_payload<float>(payload_path(stem), raster.values());
}

void write_raster(const CategoricalRaster& raster, const fs::path& stem, const std::string& band_name) {
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    write_header(raster.grid(), stem, "uint16", band_name);
    write_payload<std::uint16_t>(payload_path(stem), raster.codes());
}

Raster read_raster(const fs::path& path) {
    const fs::path stem = raster_stem(path);
    const Header h = read_header(stem);
    if (h.dtype != "float32") throw UnknownDtypeError("expected float32 raster, got " + h.dtype + " in " + stem.string());
    return Raster(h.grid, read_payload<float>(payload_path(stem), h.grid.size()));
}

CategoricalRaster read_categorical(const fs::path& path) {
    const fs::path stem = raster_stem(path);
    const Header h = read_header(stem);
    if (h.dtype != "uint16") throw UnknownDtypeError("expected uint16 raster, got " + h.dtype + " in " + stem.string());
    return CategoricalRaster(h.grid, read_payload<std::uint16_t>(payload_path(stem), h.grid.size()));
}

std::string read_band_name(const fs::path& path) { return read_header(raster_stem(path)).band_name; }

} // namespace canopy
