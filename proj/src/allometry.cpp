#include "canopy/allometry.hpp"

#include "canopy/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

namespace canopy {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(AllometryTarget t) { return t == AllometryTarget::volume ? "volume" : "agb"; }

AllometryTarget parse_allometry_target(const std::string& s) {
    if (s == "volume") return AllometryTarget::volume;
    if (s == "agb") return AllometryTarget::agb;
    throw ArgumentError("unknown allometry target '" + s + "'");
}

double PowerLaw::operator()(double height) const {
    if (height == 0.0) return 0.0;
    return a * std::pow(height, b);
}

double conversion_ratio(LeafType leaf) {
    return leaf == LeafType::broadleaved ? kBroadleavedRatio : kConiferousRatio;
}

double volume_to_agb(double volume, LeafType leaf) {
    if (volume < 0.0 || std::isnan(volume)) throw ArgumentError("volume must be >= 0");
    return volume * conversion_ratio(leaf);
}

double power_law_sse(std::span<const double> heights, std::span<const double> targets, double a, double b) {
    double sse = 0.0;
    for (std::size_t i = 0; i < heights.size(); ++i) {
        const double r = targets[i] - a * std::pow(heights[i], b);
        sse += r * r;
    }
    return sse;
}

namespace {

struct Box {
    PowerLawBounds b;
    double a_lo() const { return std::nextafter(b.a_min, std::numeric_limits<double>::infinity()); }
    std::array<double, 2> project(std::array<double, 2> p) const {
        return {std::clamp(p[0], a_lo(), b.a_max), std::clamp(p[1], b.b_min, b.b_max)};
    }
    bool at_lower(int i, const std::array<double, 2>& p) const { return i == 0 ? p[0] <= a_lo() : p[1] <= b.b_min; }
    bool at_upper(int i, const std::array<double, 2>& p) const { return i == 0 ? p[0] >= b.a_max : p[1] >= b.b_max; }
};

/// Gauss-Newton direction restricted to the free parameters.
std::array<double, 2> gn_step(const std::array<std::array<double, 2>, 2>& jtj, const std::array<double, 2>& jtr,
                              const std::array<bool, 2>& free) {
    std::array<double, 2> step{0.0, 0.0};
    if (free[0] && free[1]) {
        double a00 = jtj[0][0], a11 = jtj[1][1];
        const double a01 = jtj[0][1];
        double det = a00 * a11 - a01 * a01;
        if (!(std::abs(det) > 1e-14 * std::abs(a00 * a11))) {
            const double damp = 1e-10 * (a00 + a11);
            a00 += damp;
            a11 += damp;
            det = a00 * a11 - a01 * a01;
        }
        step[0] = (a11 * jtr[0] - a01 * jtr[1]) / det;
        step[1] = (a00 * jtr[1] - a01 * jtr[0]) / det;
    } else {
        for (int i = 0; i < 2; ++i)
            if (free[i] && jtj[i][i] > 0.0) step[i] = jtr[i] / jtj[i][i];
    }
    return step;
}

} // namespace

PowerLaw fit_power_law(std::span<const double> heights, std::span<const double> targets, const PowerLawBounds& bounds,
                       std::vector<double>* sse_trace) {
    const std::size_t n = heights.size();
    if (targets.size() != n) throw ArgumentError("heights and targets differ in length");
    if (n < 10) throw FitError("power-law fit needs at least 10 points, got " + std::to_string(n));
    if (!(bounds.a_min < bounds.a_max) || !(bounds.b_min < bounds.b_max) || bounds.a_min < 0.0)
        throw ArgumentError("invalid power-law bounds");
    for (std::size_t i = 0; i < n; ++i) {
        if (!(heights[i] > 0.0)) throw FitError("power-law fit needs heights > 0");
        if (!(targets[i] >= 0.0)) throw FitError("power-law fit needs targets >= 0");
    }

    // Log-log initialization on strictly positive targets.
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    std::size_t m = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(targets[i] > 0.0)) continue;
        const double lx = std::log(heights[i]), ly = std::log(targets[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        ++m;
    }
    if (m == 0) throw FitError("power-law fit: every target is zero");
    // With a single distinct height the exponent cannot be identified; start at b = 1.
    const double dm = static_cast<double>(m);
    const double denom = dm * sxx - sx * sx;
    double b0 = 1.0;
    if (m >= 2 && denom > 1e-12 * dm * sxx) b0 = (dm * sxy - sx * sy) / denom;
    const double loga = (sy - b0 * sx) / dm;

    const Box box{bounds};
    std::array<double, 2> p = box.project({std::exp(loga), b0});
    double sse = power_law_sse(heights, targets, p[0], p[1]);
    if (sse_trace) sse_trace->push_back(sse);

    int iterations = 0;
    for (; iterations < 100; ++iterations) {
        std::array<std::array<double, 2>, 2> jtj{};
        std::array<double, 2> jtr{};
        for (std::size_t i = 0; i < n; ++i) {
            const double hb = std::pow(heights[i], p[1]);
            const double ja = hb;
            const double jb = p[0] * hb * std::log(heights[i]);
            const double r = targets[i] - p[0] * hb;
            jtj[0][0] += ja * ja;
            jtj[0][1] += ja * jb;
            jtj[1][1] += jb * jb;
            jtr[0] += ja * r;
            jtr[1] += jb * r;
        }
        jtj[1][0] = jtj[0][1];

        // Parameters on a bound whose step points outward are held fixed.
        std::array<bool, 2> free{true, true};
        std::array<double, 2> step = gn_step(jtj, jtr, free);
        for (int pass = 0; pass < 2; ++pass) {
            bool changed = false;
            for (int i = 0; i < 2; ++i) {
                if (!free[i]) continue;
                if ((box.at_lower(i, p) && step[i] < 0.0) || (box.at_upper(i, p) && step[i] > 0.0)) {
                    free[i] = false;
                    changed = true;
                }
            }
            if (!changed) break;
            step = gn_step(jtj, jtr, free);
        }

        double t = 1.0;
        bool accepted = false;
        std::array<double, 2> candidate{};
        double candidate_sse = sse;
        for (int halving = 0; halving <= 20; ++halving, t *= 0.5) {
            candidate = box.project({p[0] + t * step[0], p[1] + t * step[1]});
            candidate_sse = power_law_sse(heights, targets, candidate[0], candidate[1]);
            if (candidate_sse <= sse) {
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
        const double rel = sse > 0.0 ? (sse - candidate_sse) / sse : 0.0;
        p = candidate;
        sse = candidate_sse;
        if (sse_trace) sse_trace->push_back(sse);
        if (rel < 1e-10) {
            ++iterations;
            break;
        }
    }

    PowerLaw law;
    law.a = p[0];
    law.b = p[1];
    law.fit_meta.n = n;
    law.fit_meta.sse = sse;
    law.fit_meta.iterations = iterations;
    law.fit_meta.bounds = bounds;
    law.fit_meta.a_at_bound = box.at_lower(0, p) || box.at_upper(0, p);
    law.fit_meta.b_at_bound = box.at_lower(1, p) || box.at_upper(1, p);

    double mp = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mp += law(heights[i]);
        my += targets[i];
    }
    mp /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double cov = 0.0, vp = 0.0, vy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dp = law(heights[i]) - mp, dy = targets[i] - my;
        cov += dp * dy;
        vp += dp * dp;
        vy += dy * dy;
    }
    law.fit_meta.r2 = (vp > 0.0 && vy > 0.0) ? cov * cov / (vp * vy) : 0.0;
    return law;
}

Raster apply_power_law(const Raster& height, const CategoricalRaster& dlt, const PowerLawSet& laws) {
    assert_aligned({&height, &dlt});
    Raster out(height.grid());
    for (int row = 0; row < height.height(); ++row) {
        for (int col = 0; col < height.width(); ++col) {
            const float h = height.at(col, row);
            if (h == height.nodata()) continue;
            const auto leaf = leaf_type_from_code(dlt.at(col, row));
            if (!leaf) continue;
            auto it = laws.find(*leaf);
            if (it == laws.end()) throw ConfigError("no power law for leaf type " + to_string(*leaf));
            out.at(col, row) = static_cast<float>(it->second(static_cast<double>(h)));
        }
    }
    return out;
}

std::string law_to_json(const PowerLaw& law) {
    json j;
    j["a"] = law.a;
    j["b"] = law.b;
    j["target"] = to_string(law.target);
    j["leaf_type"] = to_string(law.leaf_type);
    j["bounds"] = {{"a_min", law.fit_meta.bounds.a_min},
                   {"a_max", law.fit_meta.bounds.a_max},
                   {"b_min", law.fit_meta.bounds.b_min},
                   {"b_max", law.fit_meta.bounds.b_max},
                   {"a_min_exclusive", true}};
    j["n"] = law.fit_meta.n;
    j["r2"] = law.fit_meta.r2;
    j["sse"] = law.fit_meta.sse;
    j["iterations"] = law.fit_meta.iterations;
    j["a_at_bound"] = law.fit_meta.a_at_bound;
    j["b_at_bound"] = law.fit_meta.b_at_bound;
    return j.dump(2);
}

PowerLaw law_from_json(const std::string& text) {
    PowerLaw law;
    try {
        const json j = json::parse(text);
        law.a = j.at("a").get<double>();
        law.b = j.at("b").get<double>();
        law.target = parse_allometry_target(j.at("target").get<std::string>());
        law.leaf_type = parse_leaf_type(j.at("leaf_type").get<std::string>());
        if (j.contains("bounds")) {
            const json& b = j["bounds"];
            law.fit_meta.bounds = {b.at("a_min").get<double>(), b.at("a_max").get<double>(), b.at("b_min").get<double>(),
                                   b.at("b_max").get<double>()};
        }
        law.fit_meta.n = j.value("n", std::size_t{0});
        law.fit_meta.r2 = j.value("r2", 0.0);
        law.fit_meta.sse = j.value("sse", 0.0);
        law.fit_meta.iterations = j.value("iterations", 0);
        law.fit_meta.a_at_bound = j.value("a_at_bound", false);
        law.fit_meta.b_at_bound = j.value("b_at_bound", false);
    } catch (const json::exception& e) {
        throw InputFormatError(std::string("malformed law JSON: ") + e.what());
    } catch (const ArgumentError& e) {
        throw InputFormatError(std::string("malformed law JSON: ") + e.what());
    }
    return law;
}

void save_law(const PowerLaw& law, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    os << law_to_json(law) << '\n';
}

PowerLaw load_law(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw InputFormatError("cannot open law " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return law_from_json(ss.str());
}

std::string law_file_name(AllometryTarget target, LeafType leaf) {
    return "law_" + to_string(target) + "_" + to_string(leaf) + ".json";
}

PowerLawSet load_laws(const fs::path& dir, AllometryTarget target) {
    PowerLawSet laws;
    for (LeafType leaf : {LeafType::broadleaved, LeafType::coniferous}) {
        const fs::path p = dir / law_file_name(target, leaf);
        if (fs::exists(p)) laws.emplace(leaf, load_law(p));
    }
    if (laws.empty()) throw ConfigError("no " + to_string(target) + " laws found in " + dir.string());
    return laws;
}

} // namespace canopy
