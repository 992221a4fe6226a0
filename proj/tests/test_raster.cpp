#include "canopy/errors.hpp"
#include "canopy/raster.hpp"
#include "canopy/util.hpp"
#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <fstream>

using namespace canopy;
using testing_support::TempDir;

namespace {

Grid make_grid(int w, int h, double ps = 10.0) {
    Grid g;
    g.width = w;
    g.height = h;
    g.pixel_size = ps;
    g.origin_x = 1000.0;
    g.origin_y = 5000.0;
    return g;
}

void write_header(const std::filesystem::path& stem, int w, int h, const std::string& dtype) {
    nlohmann::json j = {{"width", w},     {"height", h},  {"origin_x", 0.0}, {"origin_y", 0.0},
                        {"pixel_size", 10.0}, {"nodata", -9999.0}, {"dtype", dtype}, {"band_name", "x"}};
    std::ofstream(header_path(stem)) << j.dump();
}

} // namespace

TEST_CASE("grid pixel centers follow the documented convention") {
    const Grid g = make_grid(4, 3);
    CHECK(g.center_x(0) == doctest::Approx(1005.0));
    CHECK(g.center_y(0) == doctest::Approx(4995.0));
    CHECK(g.center_y(2) == doctest::Approx(4975.0));
    CHECK(g.pixel_of(1005.0, 4995.0) == std::pair{0, 0});
    CHECK(g.pixel_of(1039.9, 4970.1) == std::pair{3, 2});
    CHECK_FALSE(g.contains(4, 0));
}

TEST_CASE("write then read is bit exact") {
    TempDir dir("raster_rt");
    Raster r(make_grid(2, 2), std::vector<float>{1, 2, 3, 4});
    write_raster(r, dir / "a", "band");
    const Raster back = read_raster(dir / "a");
    CHECK(back.grid() == r.grid());
    CHECK(std::equal(back.values().begin(), back.values().end(), r.values().begin()));
    CHECK(read_band_name(dir / "a") == "band");
    CHECK(read_raster(header_path(dir / "a")).values()[3] == 4.0f);
}

TEST_CASE("round trip preserves arbitrary finite floats and the nodata sentinel") {
    TempDir dir("raster_rand");
    Rng rng(3);
    Raster r(make_grid(17, 9));
    for (auto& v : r.values()) {
        std::uint32_t bits;
        do {
            bits = static_cast<std::uint32_t>(rng.next());
            std::memcpy(&v, &bits, sizeof v);
        } while (!std::isfinite(v));
    }
    r.at(0, 0) = r.nodata();
    write_raster(r, dir / "b");
    const Raster back = read_raster(dir / "b");
    CHECK(back.is_nodata(0, 0));
    CHECK(std::memcmp(back.values().data(), r.values().data(), r.values().size() * sizeof(float)) == 0);
}

TEST_CASE("categorical rasters round trip as uint16") {
    TempDir dir("raster_cat");
    CategoricalRaster c(make_grid(3, 2), std::vector<std::uint16_t>{0, 1, 2, 65535, 7, 1});
    write_raster(c, dir / "c");
    const CategoricalRaster back = read_categorical(dir / "c");
    CHECK(std::equal(back.codes().begin(), back.codes().end(), c.codes().begin()));
    CHECK_THROWS_AS(read_raster(dir / "c"), UnknownDtypeError);
}

TEST_CASE("reader reports distinct input-format errors") {
    TempDir dir("raster_err");
    SUBCASE("payload shorter than the header promises") {
        write_header(dir / "p", 2, 2, "float32");
        const float three[3] = {1, 2, 3};
        std::ofstream(payload_path(dir / "p"), std::ios::binary).write(reinterpret_cast<const char*>(three), sizeof three);
        CHECK_THROWS_AS(read_raster(dir / "p"), PayloadLengthError);
    }
    SUBCASE("unknown dtype") {
        write_header(dir / "d", 1, 1, "float64");
        const double one = 1.0;
        std::ofstream(payload_path(dir / "d"), std::ios::binary).write(reinterpret_cast<const char*>(&one), sizeof one);
        CHECK_THROWS_AS(read_raster(dir / "d"), UnknownDtypeError);
    }
    SUBCASE("malformed header") {
        std::ofstream(header_path(dir / "m")) << "{\"width\": 2,";
        std::ofstream(payload_path(dir / "m")) << "";
        try {
            read_raster(dir / "m");
            FAIL("expected an error");
        } catch (const PayloadLengthError&) {
            FAIL("wrong error kind");
        } catch (const UnknownDtypeError&) {
            FAIL("wrong error kind");
        } catch (const InputFormatError&) {
        }
    }
}

TEST_CASE("NaN is rejected at write time") {
    TempDir dir("raster_nan");
    Raster r(make_grid(1, 2), std::vector<float>{1.0f, std::nanf("")});
    CHECK_THROWS_AS(write_raster(r, dir / "n"), ArgumentError);
}

TEST_CASE("assert_aligned names the first offending raster and field") {
    const Raster a(make_grid(4, 4));
    const Raster b(make_grid(4, 4));
    CHECK_NOTHROW(assert_aligned({&a, &b}));

    const Raster coarse(make_grid(4, 4, 25.0));
    try {
        assert_aligned({&a, &b, &coarse});
        FAIL("expected misalignment");
    } catch (const MisalignmentError& e) {
        CHECK(e.index() == 2);
        CHECK(e.field() == "pixel_size");
    }

    Grid shifted = make_grid(4, 4);
    shifted.origin_x += 5.0;
    const CategoricalRaster s(shifted);
    try {
        assert_aligned({&a, &s});
        FAIL("expected misalignment");
    } catch (const MisalignmentError& e) {
        CHECK(e.index() == 1);
        CHECK(e.field() == "origin_x");
    }
}

TEST_CASE("alignment is reflexive and symmetric") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Grid g1 = make_grid(1 + static_cast<int>(rng.below(3)), 1 + static_cast<int>(rng.below(3)));
        Grid g2 = make_grid(1 + static_cast<int>(rng.below(3)), 1 + static_cast<int>(rng.below(3)));
        if (rng.below(2)) g2.origin_y += 10.0;
        const Grid ab[] = {g1, g2};
        const Grid ba[] = {g2, g1};
        const Grid aa[] = {g1, g1};
        CHECK_NOTHROW(assert_aligned(aa));
        bool ab_ok = true, ba_ok = true;
        try { assert_aligned(ab); } catch (const MisalignmentError&) { ab_ok = false; }
        try { assert_aligned(ba); } catch (const MisalignmentError&) { ba_ok = false; }
        CHECK(ab_ok == ba_ok);
    }
}

TEST_CASE("resample_max takes the block maximum and ignores nodata") {
    Raster fine(make_grid(10, 10, 1.0), 3.0f);
    fine.at(4, 7) = 23.4f;
    fine.at(0, 0) = fine.nodata();
    const Raster coarse = resample_max(fine, 10.0);
    REQUIRE(coarse.width() == 1);
    CHECK(coarse.at(0, 0) == 23.4f);
    CHECK(coarse.grid().pixel_size == 10.0);
    CHECK(coarse.grid().origin_x == fine.grid().origin_x);

    Raster empty(make_grid(10, 10, 1.0));
    CHECK(resample_max(empty, 10.0).is_nodata(0, 0));
}

TEST_CASE("resample_max matches a block-scan oracle on random data") {
    Rng rng(5);
    for (int ratio : {1, 2, 5, 10}) {
        Raster fine(make_grid(20, 20, 1.0));
        for (auto& v : fine.values()) v = rng.uniform() < 0.1 ? fine.nodata() : static_cast<float>(rng.uniform(0, 50));
        const Raster coarse = resample_max(fine, static_cast<double>(ratio));
        REQUIRE(coarse.width() == 20 / ratio);
        for (int r = 0; r < coarse.height(); ++r) {
            for (int c = 0; c < coarse.width(); ++c) {
                float best = fine.nodata();
                bool any = false;
                for (int i = 0; i < ratio; ++i)
                    for (int k = 0; k < ratio; ++k) {
                        const float v = fine.at(c * ratio + k, r * ratio + i);
                        if (v == fine.nodata()) continue;
                        best = any ? std::max(best, v) : v;
                        any = true;
                    }
                CHECK(coarse.at(c, r) == best);
            }
        }
        if (ratio == 1) CHECK(std::equal(coarse.values().begin(), coarse.values().end(), fine.values().begin()));
    }
}

TEST_CASE("resample_max is invariant to permutations inside a block") {
    Rng rng(9);
    Raster a(make_grid(4, 4, 1.0));
    for (auto& v : a.values()) v = static_cast<float>(rng.uniform(0, 10));
    Raster b = a;
    std::swap(b.at(0, 0), b.at(1, 1));
    std::swap(b.at(2, 3), b.at(3, 2));
    const Raster ra = resample_max(a, 2.0), rb = resample_max(b, 2.0);
    CHECK(std::equal(ra.values().begin(), ra.values().end(), rb.values().begin()));
}

TEST_CASE("resample_max rejects non-integer ratios") {
    const Raster fine(make_grid(10, 10, 1.0));
    CHECK_THROWS_AS(resample_max(fine, 2.5), ArgumentError);
    CHECK_THROWS_AS(resample_max(fine, 3.0), ArgumentError);
}

TEST_CASE("window extraction fills outside cells with nodata") {
    Raster r(make_grid(3, 3), std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    CHECK(window(r, 2, 1, 0) == std::vector<float>{6});
    CHECK(window(r, 1, 1, 1) == std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});

    Raster big(make_grid(10, 10), 1.0f);
    const auto w = window(big, 0, 0, 3);
    CHECK(w.size() == 49);
    CHECK(std::count(w.begin(), w.end(), big.nodata()) == 49 - 16);
    CHECK_THROWS_AS(window(big, 0, 0, -1), ArgumentError);
}

TEST_CASE("feature stack keeps order and rejects duplicates or misaligned bands") {
    FeatureStack s;
    s.add("b", Raster(make_grid(2, 2), 1.0f));
    s.add("a", Raster(make_grid(2, 2), 2.0f));
    CHECK(s.names() == std::vector<std::string>{"b", "a"});
    CHECK(s.band("a").at(0, 0) == 2.0f);
    CHECK_THROWS_AS(s.add("a", Raster(make_grid(2, 2))), ArgumentError);
    CHECK_THROWS_AS(s.add("c", Raster(make_grid(3, 2))), MisalignmentError);
}
