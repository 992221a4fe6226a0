#include "canopy/allometry.hpp"
#include "canopy/errors.hpp"
#include "canopy/util.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace canopy;
using testing_support::TempDir;

namespace {

std::vector<double> height_range(double lo, double hi, double step) {
    std::vector<double> h;
    for (double v = lo; v <= hi + 1e-12; v += step) h.push_back(v);
    return h;
}

} // namespace

TEST_CASE("noiseless power law is recovered") {
    const auto H = height_range(5, 40, 1);
    std::vector<double> y;
    for (double h : H) y.push_back(2.0 * std::pow(h, 1.5));
    const PowerLaw law = fit_power_law(H, y);
    CHECK(law.a == doctest::Approx(2.0).epsilon(1e-4));
    CHECK(law.b == doctest::Approx(1.5).epsilon(1e-4));
    CHECK(law.fit_meta.n == H.size());
    CHECK(law.fit_meta.r2 == doctest::Approx(1.0));
    CHECK_FALSE(law.fit_meta.b_at_bound);
}

TEST_CASE("an exponent below the bound is clamped to it") {
    const auto H = height_range(5, 40, 1);
    std::vector<double> y;
    for (double h : H) y.push_back(2.0 * std::pow(h, 0.3));
    const PowerLaw law = fit_power_law(H, y);
    CHECK(law.b == 0.5);
    CHECK(law.fit_meta.b_at_bound);
    CHECK(law.a > 0.001);
    CHECK(law.a <= 100.0);
}

TEST_CASE("noisy fit agrees with a coarse grid-search oracle") {
    Rng rng(2024);
    std::vector<double> H, y;
    for (int i = 0; i < 5000; ++i) {
        const double h = rng.uniform(5.0, 40.0);
        H.push_back(h);
        y.push_back(2.5 * std::pow(h, 1.6) * (1.0 + 0.05 * rng.normal()));
    }
    const PowerLaw law = fit_power_law(H, y);
    CHECK(std::abs(law.a / 2.5 - 1.0) < 0.10);
    CHECK(std::abs(law.b - 1.6) < 0.05);

    double best_a = 0, best_b = 0, best = INFINITY;
    for (double a = 2.0; a <= 3.0 + 1e-9; a += 0.01)
        for (double b = 1.5; b <= 1.7 + 1e-9; b += 0.004) {
            const double sse = power_law_sse(H, y, a, b);
            if (sse < best) best = sse, best_a = a, best_b = b;
        }
    CHECK(law.fit_meta.sse <= best);
    CHECK(std::abs(law.a - best_a) < 0.05);
    CHECK(std::abs(law.b - best_b) < 0.01);
}

TEST_CASE("SSE never increases across iterations") {
    Rng rng(7);
    std::vector<double> H, y;
    for (int i = 0; i < 300; ++i) {
        const double h = rng.uniform(3.0, 35.0);
        H.push_back(h);
        y.push_back(std::max(0.0, 0.8 * std::pow(h, 2.1) + 40.0 * rng.normal()));
    }
    std::vector<double> trace;
    const PowerLaw law = fit_power_law(H, y, {}, &trace);
    REQUIRE_FALSE(trace.empty());
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1]);
    CHECK(law.fit_meta.sse == doctest::Approx(trace.back()));
    CHECK(law.fit_meta.iterations <= 100);
}

TEST_CASE("scaling the targets scales a and keeps b") {
    Rng rng(8);
    std::vector<double> H, vol, agb_b, agb_c;
    for (int i = 0; i < 400; ++i) {
        const double h = rng.uniform(5.0, 35.0);
        H.push_back(h);
        vol.push_back(1.7 * std::pow(h, 1.45) * (1.0 + 0.1 * rng.normal()));
        agb_b.push_back(volume_to_agb(vol.back(), LeafType::broadleaved));
        agb_c.push_back(volume_to_agb(vol.back(), LeafType::coniferous));
    }
    const PowerLaw v = fit_power_law(H, vol);
    const PowerLaw b = fit_power_law(H, agb_b);
    const PowerLaw c = fit_power_law(H, agb_c);
    CHECK(b.a == doctest::Approx(0.89 * v.a).epsilon(1e-6));
    CHECK(b.b == doctest::Approx(v.b).epsilon(1e-6));
    CHECK(c.a == doctest::Approx(0.59 * v.a).epsilon(1e-6));
    CHECK(c.b == doctest::Approx(v.b).epsilon(1e-6));
}

TEST_CASE("fit preconditions") {
    const auto H = height_range(5, 13, 1);
    std::vector<double> y(H.size(), 1.0);
    CHECK_THROWS_AS(fit_power_law(std::span(H).first(9), std::span(y).first(9)), FitError);
    std::vector<double> zeros(H.size(), 0.0);
    CHECK_THROWS_AS(fit_power_law(H, zeros), FitError);
    std::vector<double> neg = y;
    neg[2] = -1.0;
    CHECK_THROWS_AS(fit_power_law(H, neg), FitError);
}

TEST_CASE("volume to biomass ratios") {
    CHECK(volume_to_agb(100.0, LeafType::broadleaved) == doctest::Approx(89.0));
    CHECK(volume_to_agb(100.0, LeafType::coniferous) == doctest::Approx(59.0));
    CHECK(volume_to_agb(0.0, LeafType::coniferous) == 0.0);
    CHECK_THROWS_AS(volume_to_agb(-1.0, LeafType::broadleaved), ArgumentError);
}

TEST_CASE("applying laws per leaf type") {
    Grid g;
    g.width = 4;
    g.height = 1;
    const Raster h(g, std::vector<float>{20.0f, 0.0f, 20.0f, g.nodata});
    const CategoricalRaster dlt(g, std::vector<std::uint16_t>{1, 1, 65535, 2});
    PowerLawSet laws;
    laws[LeafType::broadleaved] = PowerLaw{2.0, 1.5, AllometryTarget::volume, LeafType::broadleaved, {}};
    laws[LeafType::coniferous] = PowerLaw{1.0, 2.0, AllometryTarget::volume, LeafType::coniferous, {}};
    const Raster y = apply_power_law(h, dlt, laws);
    CHECK(y.at(0, 0) == doctest::Approx(178.885).epsilon(1e-5));
    CHECK(y.at(1, 0) == 0.0f);
    CHECK(y.is_nodata(2, 0));
    CHECK(y.is_nodata(3, 0));

    PowerLawSet only_b{{LeafType::broadleaved, laws[LeafType::broadleaved]}};
    const CategoricalRaster conifer(g, std::vector<std::uint16_t>{1, 2, 1, 1});
    CHECK_THROWS_AS(apply_power_law(h, conifer, only_b), ConfigError);
}

TEST_CASE("applied laws are monotone in height") {
    Grid g;
    g.width = 200;
    g.height = 1;
    Raster h(g);
    for (int i = 0; i < 200; ++i) h.at(i, 0) = 0.25f * static_cast<float>(i);
    const CategoricalRaster dlt(g, 2);
    PowerLawSet laws{{LeafType::coniferous, PowerLaw{0.7, 0.9, AllometryTarget::agb, LeafType::coniferous, {}}}};
    const Raster y = apply_power_law(h, dlt, laws);
    for (int i = 1; i < 200; ++i) CHECK(y.at(i, 0) > y.at(i - 1, 0));
}

TEST_CASE("laws persist as JSON") {
    TempDir dir("laws");
    const auto H = height_range(5, 30, 0.5);
    std::vector<double> y;
    for (double h : H) y.push_back(0.3 * std::pow(h, 2.2));
    PowerLaw law = fit_power_law(H, y);
    law.target = AllometryTarget::agb;
    law.leaf_type = LeafType::coniferous;
    save_law(law, dir / law_file_name(law.target, law.leaf_type));
    CHECK(law_file_name(AllometryTarget::agb, LeafType::coniferous) == "law_agb_coniferous.json");
    const PowerLaw back = load_law(dir / "law_agb_coniferous.json");
    CHECK(back.a == law.a);
    CHECK(back.b == law.b);
    CHECK(back.fit_meta.n == law.fit_meta.n);
    CHECK(load_laws(dir.path(), AllometryTarget::agb).size() == 1);
    CHECK_THROWS_AS(load_laws(dir.path(), AllometryTarget::volume), ConfigError);
    CHECK_THROWS_AS(law_from_json("{\"a\": 1"), InputFormatError);
}
