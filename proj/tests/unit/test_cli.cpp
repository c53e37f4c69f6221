#include "doctest.h"

#include "casemix/cli/cli.hpp"
#include "casemix/cli/json_io.hpp"
#include "casemix/ipd.hpp"
#include "casemix/simlab.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace casemix;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "casemix");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("casemix_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string without_first_line(const std::string& s) { return s.substr(s.find('\n') + 1); }

fs::path setting1_csv(const fs::path& dir) {
    const auto path = dir / "s1.csv";
    save_ipd_file(generate_setting(preset_setting("1"), 7), path.string());
    return path;
}

}  // namespace

TEST_CASE("usage errors exit with one") {
    CHECK(run_cli({}).code == 1);
    CHECK(run_cli({"frobnicate"}).code == 1);
    CHECK(run_cli({"--help"}).code == 0);
    const auto dir = scratch("usage");
    const auto r = run_cli({"simulate", "--preset", "1", "--out", (dir / "x").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("seed") != std::string::npos);
    CHECK(run_cli({"simulate", "--preset", "9", "--seed", "1", "--out", (dir / "x").string()}).code == 1);
    CHECK(run_cli({"analyze", "--input", (dir / "missing.csv").string(), "--out", (dir / "y").string()}).code == 1);
}

TEST_CASE("simulate writes self-describing tables deterministically") {
    const auto dir = scratch("simulate");
    const std::vector<std::string> base{"simulate", "--preset",      "1", "--analyses",    "OCR1,IPW1", "--reps", "4",
                                        "--seed",   "42",            "--bootstrap-b", "2", "--oracle-runs", "20"};
    auto a = base;
    a.insert(a.end(), {"--out", (dir / "a").string()});
    auto b = base;
    b.insert(b.end(), {"--out", (dir / "b").string()});
    REQUIRE(run_cli(a).code == 0);
    REQUIRE(run_cli(b).code == 0);
    for (const char* f : {"tables2.csv", "tables3.csv", "table4.csv", "table5.csv"}) {
        CAPTURE(f);
        const auto x = slurp(dir / "a" / f);
        CHECK(x.rfind("# config: ", 0) == 0);
        CHECK(x.find("\"seed\":42") != std::string::npos);
        CHECK(without_first_line(x) == without_first_line(slurp(dir / "b" / f)));
    }
    const auto report = json::parse(slurp(dir / "a" / "report.json"));
    CHECK(report["config"]["seed"] == 42);
    CHECK(report["reps"] == 4);
    CHECK(report["analyses"] == json::array({"OCR1", "IPW1"}));
}

TEST_CASE("config file values are overridden by flags") {
    const auto dir = scratch("config");
    {
        std::ofstream cfg(dir / "run.json");
        cfg << R"({"preset": "4", "reps": 3, "seed": 5, "bootstrap_b": 0, "oracle_runs": 10, "analyses": ["OCR1"]})";
    }
    REQUIRE(run_cli({"simulate", "--config", (dir / "run.json").string(), "--reps", "2", "--out", (dir / "o").string()})
                .code == 0);
    const auto report = json::parse(slurp(dir / "o" / "report.json"));
    CHECK(report["reps"] == 2);
    CHECK(report["seed"] == 5);
    CHECK(report["setting"]["preset"] == 4);

    std::ofstream bad(dir / "bad.json");
    bad << R"({"reps": 3, "sed": 5})";
    bad.close();
    CHECK(run_cli({"simulate", "--config", (dir / "bad.json").string(), "--out", (dir / "p").string()}).code == 1);
}

TEST_CASE("user-defined setting from a config file") {
    const auto dir = scratch("generic");
    {
        std::ofstream cfg(dir / "generic.json");
        cfg << R"({
          "seed": 3, "reps": 3, "bootstrap_b": 0, "oracle_runs": 10,
          "setting": {
            "name": "three-trials", "K": 3, "n_total": 900, "covariates": ["L1", "L2"],
            "membership": "pool",
            "pool_laws": [{"normal": [0, 1]}, {"bernoulli": 0.3}],
            "membership_lp": [[{"coef": 0.2, "term": "1"}, {"coef": 0.4, "term": "L1"}],
                              [{"coef": -0.1, "term": "1"}, {"coef": 0.5, "term": "L2"}]],
            "outcome": [{"coef": -0.4, "term": "1"}, {"coef": 0.5, "term": "treat"},
                        {"coef": 0.7, "term": "L1"}, {"coef": -0.3, "term": "treat:L2"},
                        {"coef": 0.2, "term": "treat", "study": "3"}]
          }
        })";
    }
    const auto r = run_cli({"simulate", "--config", (dir / "generic.json").string(), "--out", (dir / "o").string()});
    CHECK(r.code == 0);
    const auto report = json::parse(slurp(dir / "o" / "report.json"));
    CHECK(report["setting"]["K"] == 3);
    CHECK(report["truth"]["cells"].size() == 9);
    CHECK(report["analyses"] == json::array({"OCR1", "IPW1"}));
}

TEST_CASE("a breached failure threshold exits with two") {
    // Trials of eight subjects with a near-deterministic outcome: most fits fail.
    const auto dir = scratch("failures");
    {
        std::ofstream cfg(dir / "tiny.json");
        cfg << R"({
          "seed": 1, "reps": 10, "bootstrap_b": 0, "oracle_runs": 5, "analyses": ["OCR1"],
          "setting": {"K": 2, "n_total": 16, "membership": "per_trial",
                      "trial_laws": [[{"normal": [0, 1]}], [{"normal": [0, 1]}]],
                      "outcome": [{"coef": -6, "term": "1"}, {"coef": 0.5, "term": "treat:L"}]}
        })";
    }
    const auto r = run_cli({"simulate", "--config", (dir / "tiny.json").string(), "--out", (dir / "o").string()});
    CHECK(r.code == 2);
    const auto report = json::parse(slurp(dir / "o" / "report.json"));
    CHECK(report["failure_rate"].get<double>() > 0.1);
}

TEST_CASE("analyze produces effects, forest data, tests and diagnostics") {
    const auto dir = scratch("analyze");
    const auto csv = setting1_csv(dir);
    const auto r = run_cli({"analyze", "--input", csv.string(), "--out", (dir / "o").string()});
    REQUIRE(r.code == 0);
    const auto effects = slurp(dir / "o" / "effects.csv");
    std::istringstream lines(effects);
    std::string line;
    int rows = 0;
    while (std::getline(lines, line))
        if (line.rfind("or,", 0) == 0) ++rows;
    CHECK(rows == 4);
    CHECK(fs::exists(dir / "o" / "forest_1.csv"));
    CHECK(fs::exists(dir / "o" / "forest_2.csv"));
    CHECK(slurp(dir / "o" / "het_tests.csv").find("conventional") != std::string::npos);
    const auto diag = json::parse(slurp(dir / "o" / "diagnostics.json"));
    CHECK(diag["config"]["truncate_percentile"] == 95.0);
    CHECK(diag["weights"].size() == 2);
    CHECK(diag["positivity_warning"] == false);
    CHECK(diag.contains("common_control"));
    CHECK(diag["meta"].size() == 2);
}

TEST_CASE("percentile-100 truncation equals no truncation") {
    const auto dir = scratch("truncate");
    const auto csv = setting1_csv(dir);
    REQUIRE(run_cli({"analyze", "--input", csv.string(), "--truncate-percentile", "100", "--out", (dir / "a").string()})
                .code == 0);
    REQUIRE(run_cli({"analyze", "--input", csv.string(), "--no-truncation", "--out", (dir / "b").string()}).code == 0);
    CHECK(without_first_line(slurp(dir / "a" / "effects.csv")) == without_first_line(slurp(dir / "b" / "effects.csv")));
    CHECK(without_first_line(slurp(dir / "a" / "het_tests.csv")) ==
          without_first_line(slurp(dir / "b" / "het_tests.csv")));
}

TEST_CASE("analyze with bootstrap and elimination") {
    const auto dir = scratch("analyze_boot");
    const auto csv = setting1_csv(dir);
    const auto r = run_cli({"analyze", "--input", csv.string(), "--covariance", "bootstrap", "--bootstrap-b", "20",
                            "--eliminate", "--method", "ipw-stabilized", "--measure", "rr", "--tau2", "reml", "--out",
                            (dir / "o").string()});
    REQUIRE(r.code == 0);
    const auto diag = json::parse(slurp(dir / "o" / "diagnostics.json"));
    CHECK(diag["covariance"]["method"] == "bootstrap");
    CHECK(diag["covariance"]["excluded_replicates"].size() == 4);
    CHECK(diag["elimination"]["outcome"]["formula"].get<std::string>().find("treat:L") != std::string::npos);
    CHECK(diag["meta"][0]["tau2_method"] == "reml");
}

TEST_CASE("analyze flags a deterministic positivity violation") {
    const auto dir = scratch("positivity");
    {
        std::ofstream out(dir / "restricted.csv");
        out << "study,treat,outcome,L\n";
        for (int v = 0; v <= 40; ++v) {
            const double l = -2.0 + 0.1 * v;
            for (int t : {0, 1})
                for (int rep = 0; rep < 2; ++rep) out << "a," << t << ',' << (rep == 0 ? 1 : 0) << ',' << l << '\n';
        }
        out << "a,1,1,3.5\na,0,0,3.5\n";
        for (int v = 0; v < 10; ++v) {
            const double l = 2.05 + 0.2 * v;
            for (int t : {0, 1})
                for (int rep = 0; rep < 60; ++rep) out << "b," << t << ',' << (rep < 15 + 9 * t ? 1 : 0) << ',' << l << '\n';
        }
    }
    const auto r = run_cli({"analyze", "--input", (dir / "restricted.csv").string(), "--no-truncation", "--out",
                            (dir / "o").string()});
    CHECK(r.code != 1);
    const auto diag = json::parse(slurp(dir / "o" / "diagnostics.json"));
    CHECK(diag["positivity_warning"] == true);
    bool over = false;
    for (const auto& w : diag["weights"]) over = over || w["n_over_threshold"].get<int>() > 0;
    CHECK(over);
    CHECK(r.out.find("WARNING") != std::string::npos);
}

TEST_CASE("transport prints a single cell") {
    const auto dir = scratch("transport");
    const auto csv = setting1_csv(dir);
    const auto ds = load_ipd_file(csv.string());

    const auto same = run_cli({"transport", "--input", csv.string(), "--target", "2", "--source", "2", "--arm", "0"});
    REQUIRE(same.code == 0);
    const auto j = json::parse(same.out);
    double events = 0, n = 0;
    for (const auto i : ds.rows_of(ds.study_index("2")))
        if (ds.treat(i) == 0) {
            events += ds.outcome(i);
            n += 1;
        }
    CHECK(j["estimate"].get<double>() == doctest::Approx(events / n).epsilon(1e-12));
    CHECK(j["se"].get<double>() > 0.0);
    CHECK(j["effects"]["or"]["defined"] == true);

    const auto cross = run_cli({"transport", "--input", csv.string(), "--target", "1", "--source", "2", "--method", "ocr"});
    REQUIRE(cross.code == 0);
    CHECK(json::parse(cross.out)["method"] == "ocr");

    const auto unknown = run_cli({"transport", "--input", csv.string(), "--target", "9", "--source", "2"});
    CHECK(unknown.code == 1);
    CHECK(unknown.err.find("UnknownStudy") != std::string::npos);
}

TEST_CASE("ocr and weighting agree on the discrete fixture through the command line") {
    const auto dir = scratch("discrete");
    {
        std::ofstream out(dir / "d.csv");
        out << "study,treat,outcome,L\n";
        const auto block = [&](const char* s, int t, int l, int n, int events) {
            for (int i = 0; i < n; ++i) out << s << ',' << t << ',' << (i < events ? 1 : 0) << ',' << l << '\n';
        };
        block("k", 1, 0, 30, 6);
        block("k", 1, 1, 10, 6);
        block("k", 0, 0, 30, 9);
        block("k", 0, 1, 10, 5);
        block("j", 1, 0, 20, 10);
        block("j", 1, 1, 20, 12);
        block("j", 0, 0, 20, 8);
        block("j", 0, 1, 20, 4);
    }
    for (const char* method : {"ocr", "ipw", "ipw-stabilized"}) {
        CAPTURE(method);
        const auto r = run_cli({"transport", "--input", (dir / "d.csv").string(), "--target", "j", "--source", "k",
                                "--method", method});
        REQUIRE(r.code == 0);
        CHECK(std::abs(json::parse(r.out)["estimate"].get<double>() - 0.4) < 1e-10);
    }
}

TEST_CASE("setting json round trip") {
    for (const auto& name : preset_names()) {
        const auto cfg = preset_setting(name);
        const auto back = cli::setting_from_json(cli::setting_to_json(cfg));
        CHECK(back.outcome.to_string(back.labels()) == cfg.outcome.to_string(cfg.labels()));
        CHECK(back.n_total == cfg.n_total);
    }
}
