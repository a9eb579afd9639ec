#include "cli.hpp"

#include "grouped_glm/simulation.hpp"

#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace grouped_glm;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run_cli(const std::vector<std::string>& args) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch() {
    const fs::path dir = fs::temp_directory_path() / "grouped_glm_cli_tests";
    fs::create_directories(dir);
    return dir;
}

// DGP 1 draw written in caller order: y, group, x
std::string dgp1_csv(int groups, int n, unsigned replicate) {
    const auto d = generate({DgpKind::Dgp1Confounded, groups, n, {}, 21, NormalParam::Sd}, static_cast<int>(replicate));
    const fs::path path = scratch() / ("dgp1_" + std::to_string(groups) + "_" + std::to_string(replicate) + ".csv");
    std::ofstream f(path);
    f << "y,group,x\n";
    for (int i = 0; i < d.train.n_obs(); ++i) {
        f << d.train.y()(i) << ',' << d.train.group_label(d.train.group_of(i)) << ',' << format_number(d.train.x()(i, 1)) << '\n';
    }
    return path.string();
}

}  // namespace

TEST_CASE("fit prints coefficients and a group-effect summary") {
    const auto csv = dgp1_csv(30, 8, 0);
    const auto r = run_cli({"fit", csv, "--estimator", "fe", "--family", "bernoulli", "--inference", "crse"});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["estimator"] == "fe");
    CHECK(j["coefficients"].size() == 2);
    CHECK(j["coefficients"][1]["name"] == "x");
    CHECK(j["coefficients"][1].contains("se"));
    CHECK(j["gamma"]["count"].get<int>() == 29);
    CHECK(j["diagnostics"]["converged"] == true);
    CHECK(j["inference"]["method"] == "crse");
    CHECK(j["inference"]["c"].get<double>() == doctest::Approx(30.0 / 29.0));
}

TEST_CASE("crse is refused for the quadrature MLM") {
    const auto csv = dgp1_csv(30, 8, 0);
    const auto r = run_cli({"fit", csv, "--estimator", "ri-mlm", "--inference", "crse"});
    CHECK(r.code == 2);
    CHECK(r.err.find("not supported") != std::string::npos);
    CHECK(r.out.empty());
}

TEST_CASE("fit output is identical across runs") {
    const auto csv = dgp1_csv(30, 8, 1);
    const auto a = run_cli({"fit", csv, "--estimator", "bc-regfe", "--inference", "crse", "--seed", "4"});
    const auto b = run_cli({"fit", csv, "--estimator", "bc-regfe", "--inference", "crse", "--seed", "4"});
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    const auto boot1 = run_cli({"fit", csv, "--estimator", "ri-mlm", "--inference", "bootstrap", "--B", "50",
                                "--seed", "3", "--threads", "1"});
    const auto boot2 = run_cli({"fit", csv, "--estimator", "ri-mlm", "--inference", "bootstrap", "--B", "50",
                                "--seed", "3", "--threads", "2"});
    REQUIRE(boot1.code == 0);
    CHECK(boot1.out == boot2.out);
    const auto j = nlohmann::json::parse(boot1.out);
    CHECK(j["inference"]["B"] == 50);
    CHECK(j["coefficients"][1]["ci"].size() == 2);
}

TEST_CASE("data errors exit with code 2") {
    const fs::path bad = scratch() / "missing.csv";
    {
        std::ofstream f(bad);
        f << "y,group,x\n1,1,0.2\n0,1,\n1,2,0.4\n";
    }
    auto r = run_cli({"fit", bad.string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("missing value") != std::string::npos);
    const fs::path header = scratch() / "header.csv";
    {
        std::ofstream f(header);
        f << "outcome,group,x\n1,1,0.2\n";
    }
    CHECK(run_cli({"fit", header.string()}).code == 2);
    CHECK(run_cli({"fit", "/nonexistent/file.csv"}).code == 2);
    CHECK(run_cli({"fit", dgp1_csv(30, 8, 0), "--estimator", "lasso"}).code == 2);
    CHECK(run_cli({"bogus"}).code == 2);
}

TEST_CASE("a separated design still fits and reports the group") {
    const fs::path p = scratch() / "sep.csv";
    {
        std::ofstream f(p);
        f << "y,group,x\n";
        const double xs[6] = {0.3, -0.5, 1.2, -0.1, 0.8, -1.4};
        for (int g = 1; g <= 6; ++g) {
            for (int i = 0; i < 6; ++i) f << (g == 3 || (i + g) % 3 == 0 ? 1 : 0) << ',' << g << ',' << xs[i] << '\n';
        }
    }
    const auto r = run_cli({"fit", p.string(), "--estimator", "fe", "--inference", "default"});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["diagnostics"]["separated_groups"] == nlohmann::json::array({3}));
    CHECK(j["gamma"]["positive_infinite"] == 1);
}

TEST_CASE("a covariate that separates the outcome is a convergence failure") {
    const fs::path p = scratch() / "xsep.csv";
    {
        std::ofstream f(p);
        f << "y,group,x\n";
        const double xs[6] = {0.3, -0.5, 1.2, -0.1, 0.8, -1.4};
        for (int g = 1; g <= 6; ++g) {
            for (int i = 0; i < 6; ++i) {
                const double x = xs[(i + g) % 6];
                f << (x > 0 ? 1 : 0) << ',' << g << ',' << x << '\n';
            }
        }
    }
    const auto r = run_cli({"fit", p.string(), "--estimator", "glm"});
    CHECK(r.code == 3);
    CHECK(r.err.find("separation") != std::string::npos);
}

TEST_CASE("presets have the published grid shapes") {
    const auto t3 = cli::preset("table3", false);
    CHECK(t3.grid.size() == 8);
    CHECK(t3.resolved_methods().size() == 5);
    CHECK(t3.replicates == 1000);
    CHECK(cli::preset("table3", true).replicates < 1000);
    const auto f6 = cli::preset("figure6", false);
    CHECK(f6.grid.size() == 3);
    CHECK(f6.resolved_methods().size() == 4);
    CHECK(f6.bootstrap_replicates == 200);
    for (const auto& name : cli::preset_names()) {
        CHECK_NOTHROW(cli::preset(name, true));
        CHECK_NOTHROW(cli::preset(name, false));
    }
    CHECK_THROWS(cli::preset("table9", false));
}

TEST_CASE("smoke preset runs quickly and writes both CSVs") {
    const fs::path metrics = scratch() / "smoke.csv";
    const fs::path reps = scratch() / "smoke_reps.csv";
    const auto start = std::chrono::steady_clock::now();
    const auto r = run_cli({"simulate", "--preset", "smoke", "-o", metrics.string(), "--replicates-out", reps.string(), "-q"});
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    REQUIRE(r.code == 0);
    CHECK(secs < 10.0);
    std::ifstream f(metrics);
    const auto rows = read_metrics_csv(f);
    CHECK(rows.size() == 6);
    for (const auto& row : rows) CHECK(row.replicates == 2);
    CHECK(r.err.find("0 failed") != std::string::npos);
}

TEST_CASE("malformed experiment configs exit with code 2") {
    const fs::path p = scratch() / "bad.json";
    {
        std::ofstream f(p);
        f << R"({"dgp": "dgp1", "G": 10, "n": 5, "estimators": ["fe"], "replicate": 3})";
    }
    auto r = run_cli({"simulate", "--config", p.string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("replicate") != std::string::npos);
    {
        std::ofstream f(p);
        f << "{not json";
    }
    CHECK(run_cli({"simulate", "--config", p.string()}).code == 2);
    CHECK(run_cli({"simulate"}).code == 2);
}

TEST_CASE("report pools runs and rejects bad input") {
    CHECK(run_cli({"report"}).code == 2);
    const fs::path cfg = scratch() / "small.json";
    {
        std::ofstream f(cfg);
        f << R"({"dgp": "dgp1", "G": 12, "n": [5, 10], "estimators": ["glm", "ri-mlm", "fe", "bc-ri", "bc-regfe"],
                 "inference": ["default"], "replicates": 2, "seed": 1, "threads": 1})";
    }
    const fs::path a = scratch() / "run_a.csv";
    const fs::path b = scratch() / "run_b.csv";
    REQUIRE(run_cli({"simulate", "--config", cfg.string(), "-o", a.string(), "-q"}).code == 0);
    {
        std::ofstream f(cfg);
        f << R"({"dgp": "dgp1", "G": 12, "n": [5, 10], "estimators": ["glm", "ri-mlm", "fe", "bc-ri", "bc-regfe"],
                 "inference": ["default"], "replicates": 3, "seed": 2, "threads": 1})";
    }
    REQUIRE(run_cli({"simulate", "--config", cfg.string(), "-o", b.string(), "-q"}).code == 0);
    const fs::path merged = scratch() / "merged.csv";
    const fs::path cov = scratch() / "cov.csv";
    const auto r = run_cli({"report", a.string(), b.string(), "--merged-out", merged.string(), "--coverage-out", cov.string()});
    REQUIRE(r.code == 0);
    const auto head = r.out.find("| G/n | GLM | RI | Group-FE | bcRI | bcRegFE |");
    CHECK(head != std::string::npos);
    std::ifstream mf(merged);
    const auto rows = read_metrics_csv(mf);
    REQUIRE(rows.size() == 10);
    for (const auto& row : rows) CHECK(row.replicates == 5);
    std::ifstream cf(cov);
    std::string header;
    std::getline(cf, header);
    CHECK(header.rfind("dgp,estimator,inference,G,n", 0) == 0);

    const fs::path junk = scratch() / "junk.csv";
    {
        std::ofstream f(junk);
        f << "a,b,c\n1,2,3\n";
    }
    CHECK(run_cli({"report", junk.string()}).code == 2);
}
