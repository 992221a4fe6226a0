#include "canopy/features.hpp"

#include "canopy/errors.hpp"
#include "canopy/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace canopy {

const std::vector<std::string>& canonical_feature_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const char* season : {"win", "sum"})
            for (const char* pol : {"vh", "vv"}) n.push_back(std::string("s1_") + pol + "_" + season);
        for (const char* season : {"win", "sum"})
            for (const char* idx : {"bi", "ndvi", "ndwi", "nd56"}) n.push_back(std::string("s2_") + idx + "_" + season);
        n.emplace_back("alos_hh");
        n.emplace_back("alos_hv");
        for (const char* src : {"s1vh", "s1vv", "ndvi", "bi"})
            for (const char* season : {"win", "sum"})
                for (const char* metric : {"hom", "con", "cor"})
                    n.push_back(std::string("tex_") + src + "_" + season + "_" + metric);
        return n;
    }();
    return names;
}

namespace {

const Raster& require_band(const BandSet& bands, const std::string& name) {
    auto it = bands.find(name);
    if (it == bands.end()) throw ArgumentError("missing band " + name);
    return it->second;
}

Raster normalized_difference(const Raster& a, const Raster& b) {
    Raster out(a.grid());
    const auto va = a.values();
    const auto vb = b.values();
    auto vo = out.values();
    for (std::size_t i = 0; i < vo.size(); ++i) {
        if (va[i] == a.nodata() || vb[i] == b.nodata()) continue;
        const double den = static_cast<double>(va[i]) + vb[i];
        if (den == 0.0) continue;
        vo[i] = static_cast<float>((static_cast<double>(va[i]) - vb[i]) / den);
    }
    return out;
}

} // namespace

SpectralIndices spectral_indices(const BandSet& s2) {
    const Raster& b2 = require_band(s2, "B2");
    const Raster& b3 = require_band(s2, "B3");
    const Raster& b4 = require_band(s2, "B4");
    const Raster& b5 = require_band(s2, "B5");
    const Raster& b6 = require_band(s2, "B6");
    const Raster& b8 = require_band(s2, "B8");
    const Raster& b8a = require_band(s2, "B8A");
    const Raster& b11 = require_band(s2, "B11");
    assert_aligned({&b2, &b3, &b4, &b5, &b6, &b8, &b8a, &b11});

    SpectralIndices out{Raster(b2.grid()), {}, {}, {}};
    auto bi = out.bi.values();
    for (std::size_t i = 0; i < bi.size(); ++i) {
        const float x = b2.values()[i], y = b3.values()[i], z = b4.values()[i];
        if (x == b2.nodata() || y == b3.nodata() || z == b4.nodata()) continue;
        const double dx = x, dy = y, dz = z;
        bi[i] = static_cast<float>(std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    out.ndvi = normalized_difference(b8, b4);
    out.ndwi = normalized_difference(b8a, b11);
    out.nd56 = normalized_difference(b6, b5);
    return out;
}

Raster composite_mean(std::span<const Raster> scenes, std::span<const CategoricalRaster> masks) {
    if (scenes.empty()) throw ArgumentError("composite_mean needs at least one scene");
    if (!masks.empty() && masks.size() != scenes.size())
        throw ArgumentError("composite_mean: mask count differs from scene count");
    std::vector<Grid> grids;
    for (const auto& s : scenes) grids.push_back(s.grid());
    for (const auto& m : masks) grids.push_back(m.grid());
    assert_aligned(grids);

    Raster out(scenes.front().grid());
    auto vo = out.values();
    for (std::size_t i = 0; i < vo.size(); ++i) {
        double sum = 0.0;
        int n = 0;
        for (std::size_t s = 0; s < scenes.size(); ++s) {
            const float v = scenes[s].values()[i];
            if (v == scenes[s].nodata()) continue;
            if (!masks.empty() && masks[s].codes()[i] != 1) continue;
            sum += v;
            ++n;
        }
        if (n > 0) vo[i] = static_cast<float>(sum / n);
    }
    return out;
}

Raster orbit_average(const Raster& asc, const Raster& desc) {
    assert_aligned({&asc, &desc});
    Raster out(asc.grid());
    auto vo = out.values();
    for (std::size_t i = 0; i < vo.size(); ++i) {
        const float a = asc.values()[i], d = desc.values()[i];
        const bool va = a != asc.nodata(), vd = d != desc.nodata();
        if (va && vd) vo[i] = static_cast<float>((static_cast<double>(a) + d) / 2.0);
        else if (va) vo[i] = a;
        else if (vd) vo[i] = d;
    }
    return out;
}

namespace {

/// Summed-area tables of values and valid counts, (w+1)x(h+1).
struct IntegralImage {
    int w = 0, h = 0;
    std::vector<double> sum;
    std::vector<long> count;

    explicit IntegralImage(const Raster& r) : w(r.width()), h(r.height()) {
        sum.assign(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
        count.assign(sum.size(), 0);
        for (int y = 0; y < h; ++y) {
            double row_sum = 0.0;
            long row_count = 0;
            for (int x = 0; x < w; ++x) {
                const float v = r.at(x, y);
                if (v != r.nodata()) {
                    row_sum += v;
                    ++row_count;
                }
                sum[at(x + 1, y + 1)] = sum[at(x + 1, y)] + row_sum;
                count[at(x + 1, y + 1)] = count[at(x + 1, y)] + row_count;
            }
        }
    }
    std::size_t at(int x, int y) const { return static_cast<std::size_t>(y) * (w + 1) + x; }

    /// Mean over the clipped window; returns false if it holds no valid cell.
    bool mean(int cx, int cy, int radius, double& out) const {
        const int x0 = std::max(0, cx - radius), x1 = std::min(w, cx + radius + 1);
        const int y0 = std::max(0, cy - radius), y1 = std::min(h, cy + radius + 1);
        const long n = count[at(x1, y1)] - count[at(x0, y1)] - count[at(x1, y0)] + count[at(x0, y0)];
        if (n == 0) return false;
        const double s = sum[at(x1, y1)] - sum[at(x0, y1)] - sum[at(x1, y0)] + sum[at(x0, y0)];
        out = s / static_cast<double>(n);
        return true;
    }
};

} // namespace

std::vector<Raster> speckle_filter_multitemporal(std::span<const Raster> stack, int window_radius) {
    if (stack.empty()) throw ArgumentError("speckle filter needs at least one image");
    if (window_radius < 0) throw ArgumentError("speckle filter window radius must be >= 0");
    std::vector<Grid> grids;
    for (const auto& r : stack) grids.push_back(r.grid());
    assert_aligned(grids);

    const std::size_t n = stack.size();
    std::vector<IntegralImage> integrals;
    integrals.reserve(n);
    for (const auto& r : stack) integrals.emplace_back(r);

    std::vector<Raster> out;
    for (const auto& r : stack) out.emplace_back(r.grid());

    const Grid& g = stack.front().grid();
    std::vector<double> local(n);
    for (int y = 0; y < g.height; ++y) {
        for (int x = 0; x < g.width; ++x) {
            bool ok = true;
            double ratio_sum = 0.0;
            for (std::size_t i = 0; i < n && ok; ++i) {
                const float v = stack[i].at(x, y);
                if (v == stack[i].nodata() || !integrals[i].mean(x, y, window_radius, local[i]) || local[i] == 0.0) {
                    ok = false;
                    break;
                }
                ratio_sum += v / local[i];
            }
            if (!ok) continue;
            for (std::size_t k = 0; k < n; ++k)
                out[k].at(x, y) = static_cast<float>(local[k] / static_cast<double>(n) * ratio_sum);
        }
    }
    return out;
}

Raster to_db(const Raster& linear) {
    Raster out(linear.grid());
    auto vo = out.values();
    const auto vi = linear.values();
    for (std::size_t i = 0; i < vo.size(); ++i)
        if (vi[i] != linear.nodata() && vi[i] > 0.0f) vo[i] = static_cast<float>(10.0 * std::log10(static_cast<double>(vi[i])));
    return out;
}

void TextureParams::validate() const {
    if (levels < 2) throw ArgumentError("texture levels must be >= 2");
    if (offset < 1) throw ArgumentError("texture offset must be >= 1");
    if (radius < 0) throw ArgumentError("texture radius must be >= 0");
    if (orientations.empty()) throw ArgumentError("texture needs at least one orientation");
    for (int o : orientations)
        if (o != 0 && o != 45 && o != 90 && o != 135)
            throw ArgumentError("texture orientation must be one of 0, 45, 90, 135; got " + std::to_string(o));
}

int quantize(double v, double lo, double hi, int levels) {
    if (!(hi > lo)) return 0;
    const double t = (v - lo) / (hi - lo) * levels;
    const int bin = static_cast<int>(std::floor(t));
    return std::clamp(bin, 0, levels - 1);
}

namespace {

/// Column/row displacement; rows grow southward so 45 deg points up-right.
std::pair<int, int> displacement(int orientation, int offset) {
    switch (orientation) {
    case 0: return {offset, 0};
    case 45: return {offset, -offset};
    case 90: return {0, -offset};
    default: return {-offset, -offset};
    }
}

} // namespace

TextureValues glcm_window(std::span<const int> bins, int side, const TextureParams& params) {
    TextureValues out;
    int hom_con_n = 0, cor_n = 0;
    double hom_acc = 0.0, con_acc = 0.0, cor_acc = 0.0;
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(static_cast<std::size_t>(side) * side);

    for (int orientation : params.orientations) {
        const auto [dx, dy] = displacement(orientation, params.offset);
        pairs.clear();
        for (int y = 0; y < side; ++y) {
            const int y2 = y + dy;
            if (y2 < 0 || y2 >= side) continue;
            for (int x = 0; x < side; ++x) {
                const int x2 = x + dx;
                if (x2 < 0 || x2 >= side) continue;
                const int a = bins[static_cast<std::size_t>(y) * side + x];
                const int b = bins[static_cast<std::size_t>(y2) * side + x2];
                if (a < 0 || b < 0) continue;
                pairs.emplace_back(a, b);
            }
        }
        if (pairs.empty()) continue;

        // Symmetric counting: each pair contributes (a,b) and (b,a), so
        // both marginals share one mean and variance.
        const double np = static_cast<double>(pairs.size());
        double hom = 0.0, con = 0.0, mean = 0.0;
        for (const auto& [a, b] : pairs) {
            const double d = a - b;
            hom += 1.0 / (1.0 + d * d);
            con += d * d;
            mean += a + b;
        }
        hom /= np;
        con /= np;
        mean /= 2.0 * np;
        double var = 0.0, cov = 0.0;
        for (const auto& [a, b] : pairs) {
            const double da = a - mean, db = b - mean;
            var += da * da + db * db;
            cov += da * db;
        }
        var /= 2.0 * np;
        cov /= np;

        hom_acc += hom;
        con_acc += con;
        ++hom_con_n;
        if (var > 0.0) {
            cor_acc += cov / var;
            ++cor_n;
        }
    }
    if (hom_con_n > 0) {
        out.has_hom_con = true;
        out.homogeneity = hom_acc / hom_con_n;
        out.contrast = con_acc / hom_con_n;
    }
    if (cor_n > 0) {
        out.has_correlation = true;
        out.correlation = cor_acc / cor_n;
    }
    return out;
}

TextureRasters glcm_textures(const Raster& source, const TextureParams& params, unsigned threads) {
    params.validate();
    const Grid& g = source.grid();
    TextureRasters out{Raster(g), Raster(g), Raster(g)};
    if (source.count_valid() == 0) return out;

    const auto [lo, hi] = source.valid_range();
    std::vector<int> bins(g.size(), -1);
    for (std::size_t i = 0; i < bins.size(); ++i) {
        const float v = source.values()[i];
        if (v != g.nodata) bins[i] = quantize(v, lo, hi, params.levels);
    }

    const int r = params.radius;
    const int side = 2 * r + 1;
    parallel_for(static_cast<std::size_t>(g.height), threads, [&](std::size_t row_index) {
        const int y = static_cast<int>(row_index);
        std::vector<int> win(static_cast<std::size_t>(side) * side);
        for (int x = 0; x < g.width; ++x) {
            if (bins[source.index(x, y)] < 0) continue;
            std::size_t k = 0;
            for (int wy = y - r; wy <= y + r; ++wy)
                for (int wx = x - r; wx <= x + r; ++wx, ++k)
                    win[k] = g.contains(wx, wy) ? bins[source.index(wx, wy)] : -1;
            const TextureValues t = glcm_window(win, side, params);
            if (t.has_hom_con) {
                out.homogeneity.at(x, y) = static_cast<float>(t.homogeneity);
                out.contrast.at(x, y) = static_cast<float>(t.contrast);
            }
            if (t.has_correlation) out.correlation.at(x, y) = static_cast<float>(t.correlation);
        }
    });
    return out;
}

FeatureStack build_feature_stack(const FeatureInputs& in, const TextureParams& params, unsigned threads) {
    assert_aligned({&in.s1_vh_win, &in.s1_vv_win, &in.s1_vh_sum, &in.s1_vv_sum, &in.s2_win.bi, &in.s2_win.ndvi,
                    &in.s2_win.ndwi, &in.s2_win.nd56, &in.s2_sum.bi, &in.s2_sum.ndvi, &in.s2_sum.ndwi,
                    &in.s2_sum.nd56, &in.alos_hh, &in.alos_hv});
    params.validate();

    FeatureStack stack(in.s1_vh_win.grid());
    stack.add("s1_vh_win", in.s1_vh_win);
    stack.add("s1_vv_win", in.s1_vv_win);
    stack.add("s1_vh_sum", in.s1_vh_sum);
    stack.add("s1_vv_sum", in.s1_vv_sum);
    for (const auto& [season, idx] : {std::pair{"win", &in.s2_win}, std::pair{"sum", &in.s2_sum}}) {
        const std::string s(season);
        stack.add("s2_bi_" + s, idx->bi);
        stack.add("s2_ndvi_" + s, idx->ndvi);
        stack.add("s2_ndwi_" + s, idx->ndwi);
        stack.add("s2_nd56_" + s, idx->nd56);
    }
    stack.add("alos_hh", in.alos_hh);
    stack.add("alos_hv", in.alos_hv);

    const std::pair<const char*, const Raster*> sources[] = {
        {"s1vh_win", &in.s1_vh_win}, {"s1vh_sum", &in.s1_vh_sum}, {"s1vv_win", &in.s1_vv_win},
        {"s1vv_sum", &in.s1_vv_sum}, {"ndvi_win", &in.s2_win.ndvi}, {"ndvi_sum", &in.s2_sum.ndvi},
        {"bi_win", &in.s2_win.bi},   {"bi_sum", &in.s2_sum.bi},
    };
    for (const auto& [tag, raster] : sources) {
        TextureRasters t = glcm_textures(*raster, params, threads);
        const std::string base = std::string("tex_") + tag;
        stack.add(base + "_hom", std::move(t.homogeneity));
        stack.add(base + "_con", std::move(t.contrast));
        stack.add(base + "_cor", std::move(t.correlation));
    }
    check_canonical_stack(stack);
    return stack;
}

void check_canonical_stack(const FeatureStack& stack) {
    const auto& expected = canonical_feature_names();
    if (stack.size() != expected.size())
        throw ConsistencyError("feature stack has " + std::to_string(stack.size()) + " bands, expected " +
                               std::to_string(expected.size()));
    for (std::size_t i = 0; i < expected.size(); ++i)
        if (stack.name(i) != expected[i])
            throw ConsistencyError("feature stack band " + std::to_string(i) + " is '" + stack.name(i) +
                                   "', expected '" + expected[i] + "'");
}

std::filesystem::path write_stack(const FeatureStack& stack, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json bands = nlohmann::json::array();
    for (std::size_t i = 0; i < stack.size(); ++i) {
        write_raster(stack.band(i), dir / stack.name(i), stack.name(i));
        bands.push_back({{"name", stack.name(i)}, {"path", stack.name(i)}});
    }
    const Grid& g = stack.grid();
    const nlohmann::json manifest = {
        {"bands", bands},
        {"backscatter_scale", "dB"},
        {"s1_texture_input", "dB"},
        {"grid",
         {{"width", g.width}, {"height", g.height}, {"origin_x", g.origin_x}, {"origin_y", g.origin_y},
          {"pixel_size", g.pixel_size}}},
    };
    const fs::path path = dir / "stack.json";
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    os << manifest.dump(2) << '\n';
    return path;
}

FeatureStack read_stack(const std::filesystem::path& manifest) {
    std::ifstream is(manifest);
    if (!is) throw InputFormatError("cannot open stack manifest " + manifest.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw InputFormatError("malformed stack manifest " + manifest.string() + ": " + e.what());
    }
    if (!j.contains("bands") || !j["bands"].is_array())
        throw InputFormatError("stack manifest " + manifest.string() + " has no 'bands' array");
    FeatureStack stack;
    const auto base = manifest.parent_path();
    for (const auto& b : j["bands"]) {
        if (!b.contains("name") || !b.contains("path") || !b["name"].is_string() || !b["path"].is_string())
            throw InputFormatError("stack manifest band entries need string 'name' and 'path'");
        stack.add(b["name"].get<std::string>(), read_raster(base / b["path"].get<std::string>()));
    }
    return stack;
}

} // namespace canopy
