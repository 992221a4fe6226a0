#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using nlohmann::json;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

/// Runs the CLI with stdout and stderr captured into one string.
Run forge(const std::string& args, const fs::path& cwd, const std::string& env = "") {
    const fs::path log = cwd / "cli_output.txt";
    const std::string cmd = "cd '" + cwd.string() + "' && " + env + (env.empty() ? "" : " ") + "'" CANOPY_FORGE_BIN "' " +
                            args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream is(log);
    std::stringstream ss;
    ss << is.rdbuf();
    r.output = ss.str();
    return r;
}

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << text;
}

json read_json(const fs::path& p) {
    std::ifstream is(p);
    return json::parse(is);
}

const char* kScene = R"({
  "width": 96, "height": 96, "n_stands": 16, "height_range": [5, 35],
  "ser_layout": [{"code": 1, "col0": 0, "row0": 0, "col1": 48, "row1": 96},
                 {"code": 2, "col0": 48, "row0": 0, "col1": 96, "row1": 96}],
  "footprints": {"along_m": 30, "across_m": 60, "n_tracks": 16, "error_sd": 1.0},
  "plots": {"n": 80}, "seed": 2
})";

const char* kPipeline = R"({
  "seed": 9, "out": "%OUT%",
  "inputs": {"stack": "scene/features/stack.json", "ser": "scene/ser", "dlt": "scene/dlt",
             "footprints": "scene/footprints.csv", "plots": "scene/plots.csv"},
  "training": {"grid": {"n_estimators": [10], "max_features": ["sqrt"], "max_depth": [6, 10],
                        "min_samples_split": [5]},
               "folds": 4, "min_stratum_rows": 40},
  "validation": {"chm": "scene/chm", "truth": "scene", "classes": "scene/stand_map"}
})";

std::string pipeline_config(const std::string& out) {
    std::string s = kPipeline;
    s.replace(s.find("%OUT%"), 5, out);
    return s;
}

json without_volatile(json m) {
    m.erase("wall_time_s");
    m.erase("threads");
    return m;
}

} // namespace

TEST_CASE("usage errors exit with 1") {
    TempDir dir("cli_usage");
    const Run none = forge("", dir.path());
    CHECK(none.code == 1);
    const Run unknown = forge("frobnicate", dir.path());
    CHECK(unknown.code == 1);
    CHECK(unknown.output.find("synth") != std::string::npos);
    CHECK(forge("synth --out x", dir.path()).code == 1);
    CHECK(forge("--help", dir.path()).code == 0);
}

TEST_CASE("schema violations name the offending field") {
    TempDir dir("cli_schema");
    write_text(dir / "bad.json", R"({"width": "big"})");
    Run r = forge("synth --spec bad.json --out s", dir.path());
    CHECK(r.code == 1);
    CHECK(r.output.find("width") != std::string::npos);

    write_text(dir / "range.json", R"({"footprints": {"n_tracks": 0}})");
    r = forge("synth --spec range.json --out s", dir.path());
    CHECK(r.code == 1);
    CHECK(r.output.find("footprints.n_tracks") != std::string::npos);

    write_text(dir / "pipe.json", R"({"out": "o", "inputs": {"stack": "missing.json"}})");
    r = forge("pipeline --config pipe.json", dir.path());
    CHECK(r.code == 1);
    CHECK(r.output.find("inputs.stack") != std::string::npos);

    write_text(dir / "not_json.json", "{");
    CHECK(forge("pipeline --config not_json.json", dir.path()).code == 1);
}

TEST_CASE("synth, pipeline and standalone subcommands") {
    TempDir dir("cli_flow");
    write_text(dir / "scene.json", kScene);
    REQUIRE(forge("--quiet synth --spec scene.json --out scene", dir.path()).code == 0);
    const json synth_manifest = read_json(dir / "scene" / "manifest.json");
    CHECK(synth_manifest["command"] == "synth");
    CHECK(synth_manifest["seed"] == 2);
    CHECK_FALSE(synth_manifest["outputs"].empty());

    SUBCASE("seed precedence") {
        REQUIRE(forge("--quiet synth --spec scene.json --out env", dir.path(), "CANOPY_FORGE_SEED=5").code == 0);
        CHECK(read_json(dir / "env" / "manifest.json")["seed"] == 5);
        REQUIRE(forge("--quiet --seed 6 synth --spec scene.json --out flag", dir.path(), "CANOPY_FORGE_SEED=5").code == 0);
        CHECK(read_json(dir / "flag" / "manifest.json")["seed"] == 6);
    }

    SUBCASE("pipeline is reproducible across thread counts") {
        write_text(dir / "a.json", pipeline_config("run_a"));
        write_text(dir / "b.json", pipeline_config("run_b"));
        const Run a = forge("--threads 1 pipeline --config a.json", dir.path());
        REQUIRE_MESSAGE(a.code == 0, a.output);
        const Run b = forge("--quiet --threads 3 pipeline --config b.json", dir.path());
        REQUIRE_MESSAGE(b.code == 0, b.output);
        CHECK(b.output.empty());
        for (const char* f : {"maps/height.bin", "maps/volume.bin", "maps/agb.bin", "validation/report.json"})
            CHECK(fs::exists(dir / "run_a" / f));
        json ma = read_json(dir / "run_a" / "manifest.json");
        json mb = read_json(dir / "run_b" / "manifest.json");
        CHECK(ma["outputs"] == mb["outputs"]);
        CHECK(ma["inputs"] == mb["inputs"]);
        ma = without_volatile(ma);
        mb = without_volatile(mb);
        ma["config"].erase("out");
        mb["config"].erase("out");
        CHECK(ma == mb);

        const json report = read_json(dir / "run_a" / "validation" / "report.json");
        CHECK(report.contains("truth"));
        CHECK(report["truth"]["height"]["n"].get<int>() > 0);
    }

    SUBCASE("stage-by-stage commands") {
        REQUIRE(forge("--quiet extract --stack scene/features/stack.json --ser scene/ser --dlt scene/dlt "
                      "--footprints scene/footprints.csv --out tables --min-rows 40",
                      dir.path())
                    .code == 0);
        CHECK(fs::exists(dir / "tables" / "manifest.json"));
        write_text(dir / "grid.json", R"({"n_estimators": [10], "max_depth": [6], "max_features": ["all"],
                                         "min_samples_split": [5]})");
        REQUIRE(forge("--quiet train --tables tables --out models --grid grid.json --folds 4", dir.path()).code == 0);
        REQUIRE(forge("--quiet predict --models models --stack scene/features/stack.json --ser scene/ser "
                      "--dlt scene/dlt --out height --tile-size 17",
                      dir.path())
                    .code == 0);
        CHECK(fs::exists(dir / "height.hdr.json"));
        CHECK(fs::exists(dir / "height.manifest.json"));
        REQUIRE(forge("--quiet allometry fit --plots scene/plots.csv --target volume --out laws", dir.path()).code == 0);
        CHECK(fs::exists(dir / "laws" / "law_volume_broadleaved.json"));
        REQUIRE(forge("--quiet allometry fit --plots scene/plots.csv --target volume --leaf-type c "
                      "--out law_c.json",
                      dir.path())
                    .code == 0);
        REQUIRE(forge("--quiet allometry apply --height height --dlt scene/dlt --laws laws --target volume "
                      "--out volume",
                      dir.path())
                    .code == 0);
        const Run v = forge("--quiet validate --map height --target height --plots scene/plots.csv --chm scene/chm "
                            "--dlt scene/dlt --truth scene --classes scene/stand_map "
                            "--footprints scene/footprints.csv --out report.json --scatter pairs.csv",
                            dir.path());
        REQUIRE_MESSAGE(v.code == 0, v.output);
        const json report = read_json(dir / "report.json");
        CHECK(report.contains("plots"));
        CHECK(report.contains("chm"));
        CHECK(report.contains("aggregated"));
        CHECK(fs::exists(dir / "pairs.csv"));
    }

    SUBCASE("runtime failures exit with 2") {
        write_text(dir / "few.csv", "id,x,y,hdom,volume,agb,leaf_type,source\n"
                                    "p1,0,0,10,50,,broadleaved,NFI\n");
        const Run r = forge("--quiet allometry fit --plots few.csv --target volume --leaf-type b --out l.json",
                            dir.path());
        CHECK(r.code == 2);
        CHECK_FALSE(r.output.empty());
    }
}
