#include <ionfringe/cli.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ionfringe;
namespace fs = std::filesystem;
using cli::config_json;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    args.insert(args.begin(), "ionfringe");
    std::vector<const char*> argv;
    for (const auto& a : args)
        argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path source(const std::string& rel) { return fs::path(IONFRINGE_SOURCE_DIR) / rel; }

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ionfringe_cli_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p.parent_path());
    return p;
}

std::string write_config(const std::string& name, const config_json& j) {
    const fs::path p = scratch(name + ".json");
    std::ofstream(p) << j.dump(2);
    return p.string();
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

config_json json_of(const Run& r) { return config_json::parse(r.out); }

std::vector<std::vector<double>> csv_rows(const std::string& text) {
    std::istringstream is(text);
    return io::read_csv(is).rows;
}

const config_json& find_param(const config_json& fit, const std::string& name) {
    for (const auto& p : fit["parameters"])
        if (p["name"] == name)
            return p;
    throw std::runtime_error("no parameter " + name);
}

} // namespace

TEST(Cli, VersionHelpAndUsageErrors) {
    const auto v = run({"--version"});
    EXPECT_EQ(v.code, 0);
    EXPECT_NE(v.out.find("ionfringe"), std::string::npos);
    EXPECT_EQ(run({"--help"}).code, 0);
    EXPECT_EQ(run({}).code, cli::exit_config);
    EXPECT_EQ(run({"reproduce"}).code, cli::exit_config);
    EXPECT_EQ(run({"crystal", "--preset", "two-ion", "--format", "xml"}).code, cli::exit_config);
    EXPECT_EQ(run({"fit"}).code, cli::exit_config); // input required
}

TEST(Cli, ExitCodesAreDistinct) {
    std::set<int> codes{cli::exit_ok, cli::exit_internal, cli::exit_config, cli::exit_numerical, cli::exit_io};
    EXPECT_EQ(codes.size(), 5u);
}

// --- crystal ---------------------------------------------------------------

TEST(CliCrystal, PresetsReproduceTheKnownGeometries) {
    auto spacings = [](const std::string& preset) {
        const auto r = run({"crystal", "--preset", preset, "--format", "json"});
        EXPECT_EQ(r.code, 0) << r.err;
        return json_of(r)["crystal"]["spacings_m"].get<std::vector<double>>();
    };
    const auto two = spacings("two-ion");
    ASSERT_EQ(two.size(), 1u);
    EXPECT_NEAR(two[0], 5.8e-6, 0.03 * 5.8e-6);
    const auto four = spacings("four-ion");
    ASSERT_EQ(four.size(), 3u);
    EXPECT_NEAR(four[1], 7.2e-6, 0.03 * 7.2e-6);
    EXPECT_NEAR(four[0], 7.6e-6, 0.03 * 7.6e-6);
    EXPECT_NEAR(four[2], 7.6e-6, 0.03 * 7.6e-6);
    for (double s : spacings("equidistant"))
        EXPECT_NEAR(s, 9.1e-6, 1e-3 * 9.1e-6);
}

TEST(CliCrystal, ShippedPresetFilesMatchTheBuiltInPresets) {
    for (const std::string name : {"two-ion", "four-ion", "equidistant"}) {
        const auto a = run({"crystal", "--preset", name});
        const auto b = run({"crystal", "--config", source("presets/" + name + ".json").string()});
        ASSERT_EQ(a.code, 0) << a.err;
        ASSERT_EQ(b.code, 0) << b.err;
        EXPECT_EQ(csv_rows(a.out), csv_rows(b.out)) << name;
    }
}

TEST(CliCrystal, JsonCarriesModes) {
    const auto r = run({"crystal", "--preset", "two-ion", "--format", "json"});
    const auto j = json_of(r)["crystal"];
    const auto axial = j["modes"]["axial"]["frequencies_hz"].get<std::vector<double>>();
    EXPECT_NEAR(axial[0], 0.977e6, 1e-9 * 0.977e6);
    EXPECT_NEAR(axial[1], std::sqrt(3.0) * 0.977e6, 1e-9 * 0.977e6);
    EXPECT_EQ(j["modes"]["radial"].size(), 2u);
    EXPECT_FALSE(j["designed"].get<bool>());
}

TEST(CliCrystal, UnstableCrystalIsANumericalError) {
    // Radial confinement below the zigzag threshold for four ions.
    const auto cfg = write_config("zigzag", {{"crystal",
                                              {{"ions", 4},
                                               {"trap",
                                                {{"omega_z", "1 MHz"},
                                                 {"omega_r1", "1.2 MHz"},
                                                 {"omega_r2", "3 MHz"}}}}}});
    const auto r = run({"crystal", "--config", cfg});
    EXPECT_EQ(r.code, cli::exit_numerical) << r.err;
}

TEST(CliCrystal, PolynomialTrapWithUnitsPerPower) {
    // c_2 of a 1 MHz harmonic trap written as a polynomial.
    const double m = constants::mass_ca40_ion, w = two_pi * 1e6;
    const std::string c2 = io::format_double(0.5 * m * w * w) + " J/m^2";
    const auto poly = run({"crystal", "--config", write_config("poly", {{"crystal", {{"ions", 3}, {"trap", {{"axial_poly", {{"2", c2}}}}}}}})});
    const auto harm = run({"crystal", "--config", write_config("harm", {{"crystal", {{"ions", 3}, {"trap", {{"omega_z", "1 MHz"}}}}}})});
    ASSERT_EQ(poly.code, 0) << poly.err;
    ASSERT_EQ(harm.code, 0) << harm.err;
    const auto a = csv_rows(poly.out), b = csv_rows(harm.out);
    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_NEAR(a[i][1], b[i][1], 1e-12);

    const auto wrong = run({"crystal", "--config", write_config("poly_unit", {{"crystal", {{"ions", 3}, {"trap", {{"axial_poly", {{"2", "1e-12 J/m^4"}}}}}}}})});
    EXPECT_EQ(wrong.code, cli::exit_config);
    EXPECT_NE(wrong.err.find("crystal.trap.axial_poly.2"), std::string::npos) << wrong.err;
}

// --- config schema ---------------------------------------------------------

TEST(CliConfig, UnknownKeysAreRejectedWithTheirPath) {
    const config_json cfg{{"crystal", {{"ions", 2}, {"trap", {{"omega_z", "1 MHz"}, {"omga_r1", "2 MHz"}}}}}};
    const auto r = run({"crystal", "--config", write_config("typo", cfg)});
    EXPECT_EQ(r.code, cli::exit_config);
    EXPECT_NE(r.err.find("crystal.trap.omga_r1"), std::string::npos) << r.err;

    const auto top = run({"crystal", "--preset", "two-ion", "--config", write_config("extra", {{"colour", "red"}})});
    EXPECT_EQ(top.code, cli::exit_config);
    EXPECT_NE(top.err.find("colour"), std::string::npos) << top.err;
}

TEST(CliConfig, PhysicalQuantitiesNeedUnitsOfTheRightKind) {
    auto code_and_err = [](const config_json& trap) {
        return run({"crystal", "--config", write_config("units", {{"crystal", {{"ions", 2}, {"trap", trap}}}})});
    };
    const auto bare = code_and_err({{"omega_z", 0.977e6}});
    EXPECT_EQ(bare.code, cli::exit_config);
    EXPECT_NE(bare.err.find("explicit unit"), std::string::npos) << bare.err;
    EXPECT_EQ(code_and_err({{"omega_z", "0.977 um"}}).code, cli::exit_config);
    EXPECT_EQ(code_and_err({{"omega_z", "0.977 furlongs"}}).code, cli::exit_config);
    EXPECT_EQ(code_and_err({{"omega_z", "0.977MHz"}}).code, cli::exit_config);
    EXPECT_EQ(code_and_err({{"omega_z", "fast MHz"}}).code, cli::exit_config);
    EXPECT_EQ(code_and_err({{"omega_z", "-1 MHz"}}).code, cli::exit_config);

    // 977 kHz and 0.977 MHz are the same trap.
    const auto a = code_and_err({{"omega_z", "977 kHz"}});
    const auto b = code_and_err({{"omega_z", "0.977 MHz"}});
    ASSERT_EQ(a.code, 0);
    EXPECT_EQ(csv_rows(a.out), csv_rows(b.out));
}

TEST(CliConfig, MalformedOrMissingConfigFiles) {
    const fs::path p = scratch("broken.json");
    std::ofstream(p) << "{\"crystal\": ";
    EXPECT_EQ(run({"crystal", "--config", p.string()}).code, cli::exit_config);
    EXPECT_EQ(run({"crystal", "--config", "/nonexistent/config.json"}).code, cli::exit_io);
    const fs::path arr = scratch("array.json");
    std::ofstream(arr) << "[1, 2]";
    EXPECT_EQ(run({"crystal", "--config", arr.string()}).code, cli::exit_config);
}

TEST(CliConfig, HashIgnoresKeyOrderAndTracksContent) {
    const fs::path a = scratch("order_a.json"), b = scratch("order_b.json"), c = scratch("order_c.json");
    std::ofstream(a) << R"({"crystal": {"ions": 2, "trap": {"omega_z": "1 MHz", "omega_r1": "3 MHz"}}})";
    std::ofstream(b) << R"({"crystal": {"trap": {"omega_r1": "3 MHz", "omega_z": "1 MHz"}, "ions": 2}})";
    std::ofstream(c) << R"({"crystal": {"ions": 3, "trap": {"omega_z": "1 MHz", "omega_r1": "3 MHz"}}})";
    auto hash = [](const fs::path& p) {
        const auto r = run({"crystal", "--config", p.string(), "--format", "json"});
        return json_of(r)["meta"]["config_hash"].get<std::string>();
    };
    EXPECT_EQ(hash(a), hash(b));
    EXPECT_NE(hash(a), hash(c));
    EXPECT_EQ(hash(a).size(), 16u);
}

TEST(CliConfig, EveryOutputCarriesTheMetadataHeader) {
    for (const auto& args : std::vector<std::vector<std::string>>{
             {"crystal", "--preset", "two-ion"},
             {"visibility-scan", "--config", source("presets/visibility-scan.json").string()},
             {"gcpd", "--config", source("presets/heating-decay.json").string()},
             {"fit", source("tests/fixtures/two_ion.csv").string()}}) {
        const auto r = run(args);
        ASSERT_EQ(r.code, 0) << args[0] << ": " << r.err;
        EXPECT_EQ(r.out.rfind("# tool: ionfringe\n# version: ", 0), 0u) << args[0];
        EXPECT_NE(r.out.find("# config_hash: "), std::string::npos) << args[0];
        auto j = args;
        j.insert(j.end(), {"--format", "json"});
        const auto rj = run(j);
        ASSERT_EQ(rj.code, 0) << rj.err;
        const auto meta = json_of(rj)["meta"];
        EXPECT_EQ(meta["version"], io::version);
        EXPECT_EQ(meta["command"], args[0]);
    }
}

// --- visibility-scan -------------------------------------------------------

TEST(CliVisibilityScan, ZeroDriveEndpointAndTwoLevelLaw) {
    const config_json cfg{{"scan", {{"start", "0 MHz"}, {"stop", "50 MHz"}, {"points", 11}}},
                          {"cooling", {{"detuning", "-10 MHz"}}}};
    const auto r = run({"visibility-scan", "--config", write_config("scan0", cfg)});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = csv_rows(r.out);
    ASSERT_EQ(rows.size(), 11u);
    EXPECT_EQ(rows[0][2], 1.0);
    for (const auto& row : rows)
        EXPECT_NEAR(row[2], 1.0 / (1.0 + row[1]), 1e-15);
}

TEST(CliVisibilityScan, RepumpCurvesStraddleTheTwoLevelCurve) {
    const auto r = run({"visibility-scan", "--config", source("presets/visibility-scan.json").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = csv_rows(r.out);
    ASSERT_EQ(rows.size(), 201u);
    bool strong_above = false, weak_below = false;
    for (const auto& row : rows) {
        const double v2 = row[2], v60 = row[3], v20 = row[4];
        strong_above |= v60 > v2;
        weak_below |= v20 < v2;
        if (row[0] >= two_pi * 21.57e6 * 0.93) { // drive >= Gamma_ps
            EXPECT_GT(v60, v20);
        }
    }
    EXPECT_TRUE(strong_above);
    EXPECT_TRUE(weak_below);
}

TEST(CliVisibilityScan, DeterministicAcrossRunsAndThreadCounts) {
    const std::string cfg = source("presets/visibility-scan.json").string();
    const auto a = run({"visibility-scan", "--config", cfg, "--threads", "1"});
    const auto b = run({"visibility-scan", "--config", cfg, "--threads", "4"});
    const auto c = run({"visibility-scan", "--config", cfg});
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(a.out, c.out);
}

TEST(CliVisibilityScan, SaturationAxisAndJsonTable) {
    const config_json cfg{{"scan", {{"variable", "saturation"}, {"start", 0.1}, {"stop", 10.0}, {"points", 5}, {"spacing", "log"}}},
                          {"cooling", {{"detuning", "-10 MHz"}}},
                          {"two_level", true}};
    const auto r = run({"visibility-scan", "--config", write_config("scan_s", cfg), "--format", "json"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto t = json_of(r)["table"];
    const auto s = t["s397"].get<std::vector<double>>();
    const auto v = t["v_two_level"].get<std::vector<double>>();
    ASSERT_EQ(s.size(), 5u);
    EXPECT_NEAR(s[2], 1.0, 1e-12);
    EXPECT_NEAR(v[2], 0.5, 1e-12);

    const config_json bad{{"scan", {{"start", "0 MHz"}, {"stop", "1 MHz"}}},
                          {"cooling", {{"detuning", "-10 MHz"}, {"rabi", "1 MHz"}}}};
    EXPECT_EQ(run({"visibility-scan", "--config", write_config("scan_bad", bad)}).code, cli::exit_config);
}

// --- simulate and fit ------------------------------------------------------

TEST(CliSimulate, NoiselessPatternIsDeterministic) {
    config_json cfg = config_json::parse(slurp(source("presets/two-ion-fringes.json")));
    cfg.erase("camera");
    const std::string path = write_config("noiseless", cfg);
    const auto a = run({"simulate", "--config", path});
    const auto b = run({"simulate", "--config", path});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    const auto rows = csv_rows(a.out);
    ASSERT_EQ(rows.size(), 128u);
    double mean = 0.0;
    for (const auto& r : rows)
        mean += r[1] / 128.0;
    EXPECT_NEAR(mean, 1.0, 1e-12);
}

TEST(CliSimulate, SeededImagesAreReproducible) {
    const std::string cfg = source("presets/two-ion-fringes.json").string();
    const fs::path a = scratch("sim_a"), b = scratch("sim_b"), c = scratch("sim_c"), d = scratch("sim_d");
    ASSERT_EQ(run({"simulate", "--config", cfg, "--output", a.string(), "--threads", "1"}).code, 0);
    ASSERT_EQ(run({"simulate", "--config", cfg, "--output", b.string(), "--threads", "3"}).code, 0);
    ASSERT_EQ(run({"simulate", "--config", cfg, "--output", c.string(), "--seed", "2"}).code, 0);
    ASSERT_EQ(run({"simulate", "--config", cfg, "--output", d.string(), "--seed", "1"}).code, 0);
    for (const char* f : {"pattern.csv", "image.pgm", "columns.csv"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    EXPECT_NE(slurp(a / "image.pgm"), slurp(c / "image.pgm"));
    EXPECT_EQ(slurp(a / "image.pgm"), slurp(d / "image.pgm")); // preset seed is 1
    EXPECT_NE(slurp(a / "columns.csv").find("# seed: 1\n"), std::string::npos);
}

TEST(CliSimulate, CameraNeedsAnOutputDirectory) {
    const auto r = run({"simulate", "--config", source("presets/two-ion-fringes.json").string()});
    EXPECT_EQ(r.code, cli::exit_config);
}

TEST(CliSimulate, ThermalMotionLowersTheFringeContrast) {
    config_json cfg = config_json::parse(slurp(source("presets/two-ion-fringes.json")));
    cfg.erase("camera");
    auto contrast = [&](const std::string& name) {
        const auto r = run({"simulate", "--config", write_config(name, cfg), "--format", "json"});
        EXPECT_EQ(r.code, 0) << r.err;
        const auto i = json_of(r)["pattern"]["intensity"].get<std::vector<double>>();
        // Fringe amplitude near the centre, relative to the local mean.
        const double hi = *std::max_element(i.begin() + 54, i.begin() + 74);
        const double lo = *std::min_element(i.begin() + 54, i.begin() + 74);
        return (hi - lo) / (hi + lo);
    };
    const double frozen = contrast("frozen");
    cfg["thermal"] = {{"ion_rms", "96 nm"}};
    const double warm = contrast("warm");
    EXPECT_LT(warm, 0.5 * frozen);

    cfg["thermal"] = {{"temperature", "0.5 mK"}};
    EXPECT_EQ(run({"simulate", "--config", write_config("positions_only", cfg)}).code, cli::exit_config);
    cfg["crystal"] = {{"preset", "two-ion"}};
    EXPECT_EQ(run({"simulate", "--config", write_config("with_trap", cfg)}).code, 0);
}

TEST(CliSimulate, LaserDrivenCoherence) {
    config_json cfg = config_json::parse(slurp(source("presets/two-ion-fringes.json")));
    cfg.erase("camera");
    cfg.erase("coherence");
    cfg["lasers"] = {{"cooling", {{"detuning", "-10 MHz"}, {"saturation", 1.0}}}};
    const auto two = run({"simulate", "--config", write_config("two_level", cfg), "--format", "json"});
    ASSERT_EQ(two.code, 0) << two.err;
    EXPECT_NEAR(json_of(two)["coherence"]["visibility"].get<double>(), 0.5, 1e-12);
    cfg["lasers"]["repump"] = {{"detuning", "60 MHz"}, {"rabi", "60 Gamma_pd"}};
    const auto three = run({"simulate", "--config", write_config("three_level", cfg), "--format", "json"});
    ASSERT_EQ(three.code, 0) << three.err;
    const double v3 = json_of(three)["coherence"]["visibility"].get<double>();
    EXPECT_GT(v3, 0.0);
    EXPECT_LT(v3, 1.0);
}

TEST(CliFit, SimulatedPresetRoundTrip) {
    const fs::path dir = scratch("roundtrip");
    ASSERT_EQ(run({"simulate", "--config", source("presets/two-ion-fringes.json").string(), "--output", dir.string()}).code, 0);
    for (const char* input : {"columns.csv", "image.pgm"}) {
        const auto r = run({"fit", (dir / input).string(), "--format", "json"});
        ASSERT_EQ(r.code, 0) << r.err;
        const auto f = json_of(r)["fit"];
        const double d = f["spacings_m"]["value"][0], sd = f["spacings_m"]["error"][0];
        const double v = f["visibility"]["value"], sv = f["visibility"]["error"];
        const double w = f["psf_width_m"]["value"], sw = f["psf_width_m"]["error"];
        EXPECT_LT(std::abs(d - 6.4e-6), 4 * sd) << input;
        EXPECT_LT(std::abs(v - 0.452), 4 * sv) << input;
        EXPECT_LT(std::abs(w - 3.6e-6), 4 * sw) << input;
        EXPECT_TRUE(f["statistics"]["converged"].get<bool>());
    }
}

// Fixtures were generated from tests/fixtures/<name>.json with
// `ionfringe simulate`; the fits must land within 4 standard errors.
TEST(CliFit, ShippedFixtures) {
    struct Case {
        const char* name;
        config_json model;
        std::vector<double> spacings;
        double visibility;
    };
    const auto four = crystal::equilibrium_positions(
        crystal::TrapConfig::harmonic(constants::mass_ca40_ion, two_pi * 0.429e6), 4);
    const std::vector<Case> cases{
        {"two_ion", {{"kind", "free"}, {"order", 1}}, {6.4e-6}, 0.452},
        {"three_ion", {{"kind", "array"}, {"order", 3}}, {6.4e-6}, 0.3},
        {"four_ion", {{"kind", "array"}, {"order", 4}}, {four.spacings()[0], four.spacings()[1]}, 0.3},
    };
    for (const auto& c : cases) {
        const auto cfg = write_config(std::string("fixture_") + c.name, {{"model", c.model}});
        const auto r = run({"fit", source(std::string("tests/fixtures/") + c.name + ".csv").string(), "--config", cfg,
                            "--format", "json"});
        ASSERT_EQ(r.code, 0) << c.name << ": " << r.err;
        const auto f = json_of(r)["fit"];
        ASSERT_EQ(f["spacings_m"]["value"].size(), c.spacings.size()) << c.name;
        for (std::size_t k = 0; k < c.spacings.size(); ++k)
            EXPECT_LT(std::abs(f["spacings_m"]["value"][k].get<double>() - c.spacings[k]),
                      4 * f["spacings_m"]["error"][k].get<double>())
                << c.name << " spacing " << k;
        EXPECT_LT(std::abs(f["visibility"]["value"].get<double>() - c.visibility),
                  4 * f["visibility"]["error"].get<double>())
            << c.name;
        EXPECT_EQ(f["residuals"].size(), 128u);
    }
}

TEST(CliFit, MissingErrorColumnMeansPoissonErrors) {
    // The fixtures carry sqrt(counts) errors, so dropping the column must not
    // change the fit.
    const auto src = source("tests/fixtures/two_ion.csv");
    std::ifstream in(src);
    const fs::path two = scratch("two_column.csv");
    std::ofstream out(two);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#')
            continue;
        out << line.substr(0, line.rfind(',')) << '\n';
    }
    out.close();
    const auto a = run({"fit", src.string(), "--format", "json"});
    const auto b = run({"fit", two.string(), "--format", "json"});
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(json_of(a)["fit"]["parameters"], json_of(b)["fit"]["parameters"]);
}

TEST(CliFit, InputErrors) {
    const fs::path bad = scratch("bad.csv");
    std::ofstream(bad) << "x,counts\n0,1\n1,2\n2,oops\n";
    const auto r = run({"fit", bad.string()});
    EXPECT_EQ(r.code, cli::exit_io);
    EXPECT_NE(r.err.find("bad.csv:4"), std::string::npos) << r.err;

    const fs::path few = scratch("few.csv");
    std::ofstream(few) << "0,1\n1,2\n2,3\n";
    EXPECT_EQ(run({"fit", few.string()}).code, cli::exit_io);
    EXPECT_EQ(run({"fit", "/nonexistent/data.csv"}).code, cli::exit_io);

    const auto cfg = write_config("fit_region", {{"region", {{"cols", {0, 10}}}}});
    EXPECT_EQ(run({"fit", source("tests/fixtures/two_ion.csv").string(), "--config", cfg}).code, cli::exit_config);
    const auto bad_model = write_config("fit_model", {{"model", {{"kind", "array"}, {"order", 1}}}});
    EXPECT_EQ(run({"fit", source("tests/fixtures/two_ion.csv").string(), "--config", bad_model}).code,
              cli::exit_config);
}

TEST(CliFit, ImageRegion) {
    const fs::path dir = scratch("region");
    ASSERT_EQ(run({"simulate", "--config", source("presets/two-ion-fringes.json").string(), "--output", dir.string()}).code, 0);
    const auto cfg = write_config("region_cfg", {{"region", {{"rows", {0, 24}}}}});
    const auto r = run({"fit", (dir / "image.pgm").string(), "--config", cfg, "--format", "json"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto f = json_of(r)["fit"];
    // Half the rows: amplitude about half of the full image.
    const auto full = json_of(run({"fit", (dir / "image.pgm").string(), "--format", "json"}))["fit"];
    EXPECT_NEAR(find_param(f, "amplitude")["value"].get<double>() / find_param(full, "amplitude")["value"].get<double>(),
                0.5, 0.02);
}

// --- gcpd ------------------------------------------------------------------

TEST(CliGcpd, PresetSettlesAndFitsADecay) {
    const auto r = run({"gcpd", "--config", source("presets/heating-decay.json").string(), "--format", "json"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json_of(r);
    EXPECT_TRUE(j["settling"]["settled"].get<bool>());
    EXPECT_LT(j["settling"]["residual"].get<double>(), 1e-3);
    EXPECT_LT(j["settling"]["occupation_change"].get<double>(), 0.01);
    const auto v = j["series"]["visibility"].get<std::vector<double>>();
    ASSERT_EQ(v.size(), 11u);
    EXPECT_GT(v.front(), v.back());
    EXPECT_FALSE(j["decay_fit"]["tau_infinite"].get<bool>());
    // The Doppler step is not a pure exponential in V; the fitted time stays
    // within a few percent of the occupation time constant.
    EXPECT_NEAR(j["decay_fit"]["tau_s"].get<double>(), 0.7e-3, 0.05 * 0.7e-3);
}

TEST(CliGcpd, WeakHeatingRecoversTheTimeConstant) {
    config_json cfg = config_json::parse(slurp(source("presets/heating-decay.json")));
    cfg["heating"] = {{"tau", "0.7 ms"}, {"initial", {{"occupation", 10.0}}}, {"final", {{"occupation", 10.02}}}};
    cfg["schedule"]["gate"] = "0 us";
    cfg["sigma"] = 1e-8;
    const auto r = run({"gcpd", "--config", write_config("weak", cfg), "--format", "json"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NEAR(json_of(r)["decay_fit"]["tau_s"].get<double>(), 0.7e-3, 1e-3 * 0.7e-3);
}

TEST(CliGcpd, FrozenMotionIsFlatAndRecoolingRises) {
    config_json cfg = config_json::parse(slurp(source("presets/heating-decay.json")));
    cfg["heating"].erase("tau");
    auto r = run({"gcpd", "--config", write_config("frozen", cfg), "--format", "json"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto j = json_of(r);
    const auto v = j["series"]["visibility"].get<std::vector<double>>();
    for (double x : v)
        EXPECT_EQ(x, v.front());
    EXPECT_TRUE(j["decay_fit"]["tau_infinite"].get<bool>());
    EXPECT_TRUE(j["decay_fit"]["tau_s"].is_null());

    cfg = config_json::parse(slurp(source("presets/heating-decay.json")));
    cfg["probe"]["saturation_before"] = 1.25;
    cfg["probe"]["saturation_after"] = 0.25;
    r = run({"gcpd", "--config", write_config("recool", cfg), "--format", "json"});
    ASSERT_EQ(r.code, 0) << r.err;
    j = json_of(r);
    EXPECT_GT(j["decay_fit"]["v_inf"].get<double>(), j["decay_fit"]["v0"].get<double>());
    EXPECT_GT(j["decay_fit"]["tau_s"].get<double>(), 0.0);
}

TEST(CliGcpd, SeededNoiseIsReproducible) {
    config_json cfg = config_json::parse(slurp(source("presets/heating-decay.json")));
    cfg["noise"] = true;
    const auto path = write_config("noisy_gcpd", cfg);
    const auto a = run({"gcpd", "--config", path, "--seed", "5"});
    const auto b = run({"gcpd", "--config", path, "--seed", "5"});
    const auto c = run({"gcpd", "--config", path, "--seed", "6"});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_NE(a.out, c.out);
    EXPECT_NE(a.out.find("# seed: 5\n"), std::string::npos);
}

TEST(CliGcpd, SchedulesAndPairsAreValidated) {
    config_json cfg = config_json::parse(slurp(source("presets/heating-decay.json")));
    cfg["schedule"]["offsets"] = {"0 ms", "1 ms", "-1 ms", "2 ms"};
    EXPECT_EQ(run({"gcpd", "--config", write_config("neg", cfg)}).code, cli::exit_config);
    cfg = config_json::parse(slurp(source("presets/heating-decay.json")));
    cfg["pair"] = {0, 2};
    EXPECT_EQ(run({"gcpd", "--config", write_config("pair", cfg)}).code, cli::exit_config);
    cfg = config_json::parse(slurp(source("presets/heating-decay.json")));
    cfg["crystal"] = {{"positions", {"-3 um", "3 um"}}};
    EXPECT_EQ(run({"gcpd", "--config", write_config("nomodes", cfg)}).code, cli::exit_config);
}

// --- output directory and the installed binary ------------------------------

TEST(CliOutput, UnwritableDirectoryIsAnIoError) {
    const fs::path file = scratch("plain_file");
    std::ofstream(file) << "x";
    const auto r = run({"crystal", "--preset", "two-ion", "--output", (file / "sub").string()});
    EXPECT_EQ(r.code, cli::exit_io) << r.err;
}

TEST(CliBinary, ExitCodesAndByteIdenticalOutput) {
    auto sh = [](const std::string& cmd) {
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    };
    const std::string bin = IONFRINGE_CLI_PATH;
    const fs::path a = scratch("bin_a.csv"), b = scratch("bin_b.csv");
    const std::string cfg = source("presets/visibility-scan.json").string();
    ASSERT_EQ(sh(bin + " visibility-scan --config " + cfg + " > " + a.string()), 0);
    ASSERT_EQ(sh(bin + " visibility-scan --config " + cfg + " > " + b.string()), 0);
    EXPECT_EQ(slurp(a), slurp(b));
    EXPECT_EQ(slurp(a), run({"visibility-scan", "--config", cfg}).out);
    EXPECT_EQ(sh(bin + " crystal --preset nope 2>/dev/null"), cli::exit_config);
    EXPECT_EQ(sh(bin + " fit /nonexistent.csv 2>/dev/null"), cli::exit_io);
}
