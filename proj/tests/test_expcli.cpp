#include "coophaul/expcli.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace coophaul;
using namespace coophaul::expcli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("coophaul_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p)
{
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            cells.push_back(cell);
        }
        rows.push_back(cells);
    }
    return rows;
}

ExperimentSpec small_spec(const std::string& experiment, const fs::path& out)
{
    KeyValues kv;
    kv.set("experiment", experiment);
    kv.set("rings", "1");
    kv.set("drops", "3");
    kv.set("lambda_points", "6");
    kv.set("system_snr_db", "11.8");
    kv.set("output", out.string());
    return ExperimentSpec::from_key_values(kv);
}

} // namespace

TEST_CASE("experiment names and cluster text")
{
    for (const char* name : {"mse_vs_traffic", "rate_vs_traffic", "cdf_distributed", "cdf_static", "dynamic_rate",
                             "cluster_map", "admm_convergence", "oi_convergence"}) {
        CHECK(experiment_name(parse_experiment_id(name)) == name);
    }
    CHECK_THROWS_AS(parse_experiment_id("fig3"), ConfigurationError);

    const Clustering c = parse_clusters("0 1; 2 3 4; 5", 6);
    CHECK(c.num_clusters() == 3);
    CHECK(c.label(4) == 1);
    CHECK_THROWS_AS(parse_clusters("0 1; 1 2", 3), Error);
    CHECK_THROWS_AS(parse_clusters("0 1", 3), Error);

    const Clustering preset = fig1_seven();
    CHECK(preset.num_bs() == 19);
    CHECK(preset.num_clusters() == 7);
    CHECK_FALSE(preset.has_empty());
    CHECK(parse_clusters("fig1_seven", 19) == preset);
    CHECK_THROWS_AS(parse_clusters("fig1_seven", 37), ConfigurationError);
    const Clustering seven = restrict_clustering(preset, 7);
    CHECK(parse_clusters("fig1_seven", 7) == seven);
    CHECK(seven.num_bs() == 7);
    CHECK(seven.same_partition(Clustering({0, 0, 0, 1, 2, 3, 4}, 5)));
}

TEST_CASE("spec files reject unknown keys and bad values")
{
    KeyValues kv;
    kv.set("experiment", "mse_vs_traffic");
    kv.set("lamda_points", "3");
    CHECK_THROWS_AS(ExperimentSpec::from_key_values(kv), ConfigurationError);

    KeyValues bad;
    bad.set("drops", "0");
    CHECK_THROWS_AS(ExperimentSpec::from_key_values(bad).validate(), Error);

    KeyValues a2;
    a2.set("antennas_per_bs", "2");
    a2.set("greedy_sizes", "1,2,4");
    const ExperimentSpec s = ExperimentSpec::from_key_values(a2);
    CHECK(s.scenario.users_per_bs == 2);
    CHECK(s.greedy_sizes == std::vector<int>{1, 2, 4});
}

TEST_CASE("shipped spec files parse")
{
    int count = 0;
    for (const auto& entry : fs::directory_iterator(COOPHAUL_SPEC_DIR)) {
        if (entry.path().extension() == ".spec") {
            const ExperimentSpec s = ExperimentSpec::load(entry.path().string());
            CHECK_NOTHROW(s.validate());
            ++count;
        }
    }
    CHECK(count >= 9);
}

TEST_CASE("helpers: mean, interpolation and quantiles")
{
    const auto [m, se] = mean_se({1.0, 2.0, 3.0, 4.0});
    CHECK(m == doctest::Approx(2.5));
    CHECK(se == doctest::Approx(std::sqrt(1.25 * 4.0 / 3.0 / 4.0)));
    CHECK(interpolate({{0.0, 0.0}, {2.0, 4.0}}, 1.0) == doctest::Approx(2.0));
    CHECK(interpolate({{0.0, 0.0}, {2.0, 4.0}}, 5.0) == doctest::Approx(4.0));
    CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 0.0) == 1.0);
    CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 1.0) == 4.0);
    CHECK(quantile({4.0, 1.0, 3.0, 2.0}, 0.5) == doctest::Approx(2.5));
}

TEST_CASE("runs are deterministic and independent of the thread count")
{
    const fs::path a = scratch("det_a");
    const fs::path b = scratch("det_b");
    ExperimentSpec sa = small_spec("rate_vs_traffic", a);
    ExperimentSpec sb = small_spec("rate_vs_traffic", b);
    sb.threads = 3;
    run_experiment(sa);
    run_experiment(sb);
    int files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (entry.is_regular_file()) {
            const fs::path rel = fs::relative(entry.path(), a);
            CHECK(slurp(entry.path()) == slurp(b / rel));
            ++files;
        }
    }
    CHECK(files >= 7);
}

TEST_CASE("aggregates equal the per-drop means")
{
    const fs::path out = scratch("agg");
    const ExperimentSpec spec = small_spec("mse_vs_traffic", out);
    const AggregateResult res = run_experiment(spec);
    CHECK(res.drops_ok == 3);
    std::map<std::pair<std::string, std::string>, std::vector<double>> mse, traffic;
    for (int d = 0; d < 3; ++d) {
        char name[32];
        std::snprintf(name, sizeof name, "drop_%05d.csv", d);
        const auto rows = read_csv(out / "drops" / name);
        REQUIRE(rows.size() > 1);
        CHECK(rows[0] == std::vector<std::string>{"kind", "series", "x", "mse", "traffic", "rate"});
        for (std::size_t i = 1; i < rows.size(); ++i) {
            if (rows[i][0] == "point") {
                // x differs in the last bits between drops; key on a rounded value
                std::ostringstream key;
                key.precision(9);
                key << std::stod(rows[i][2]);
                mse[{rows[i][1], key.str()}].push_back(std::stod(rows[i][3]));
                traffic[{rows[i][1], key.str()}].push_back(std::stod(rows[i][4]));
            }
        }
    }
    for (const std::string series : {"sweep", "sweep_refit"}) {
        const auto rows = read_csv(out / (series + ".csv"));
        REQUIRE(rows.size() == 8);
        CHECK(rows[0][0] == "lambda");
        for (std::size_t i = 1; i < rows.size(); ++i) {
            std::ostringstream key;
            key.precision(9);
            key << std::stod(rows[i][0]);
            const auto& v = mse[{series, key.str()}];
            REQUIRE(v.size() == 3);
            CHECK(std::stod(rows[i][1]) == doctest::Approx((v[0] + v[1] + v[2]) / 3.0).epsilon(1e-9));
            const auto& t = traffic[{series, key.str()}];
            CHECK(std::stod(rows[i][3]) == doctest::Approx((t[0] + t[1] + t[2]) / 3.0).epsilon(1e-9));
        }
    }
    const auto& s = res.series.at("sweep");
    CHECK(s.front().traffic_mean == 0.0);
    CHECK(s.back().traffic_mean == 42.0);
    CHECK(res.scalars.count("reduction_at_12pct") == 1);
}

TEST_CASE("CDF files are monotone and end at one")
{
    const fs::path out = scratch("cdf");
    run_experiment(small_spec("cdf_distributed", out));
    int files = 0;
    for (const auto& entry : fs::directory_iterator(out)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("cdf_", 0) != 0) {
            continue;
        }
        ++files;
        const auto rows = read_csv(entry.path());
        REQUIRE(rows.size() > 1);
        CHECK(rows[0] == std::vector<std::string>{"rate", "cdf"});
        double prev_rate = -1.0, prev_cdf = 0.0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double r = std::stod(rows[i][0]);
            const double c = std::stod(rows[i][1]);
            CHECK(r > prev_rate);
            CHECK(c > prev_cdf);
            prev_rate = r;
            prev_cdf = c;
        }
        CHECK(prev_cdf == 1.0);
    }
    CHECK(files >= 4);
}

TEST_CASE("cluster map and convergence traces")
{
    const fs::path map = scratch("map");
    ExperimentSpec ms = small_spec("cluster_map", map);
    ms.drops = 1;
    ms.num_clusters = {3};
    const AggregateResult r = run_experiment(ms);
    CHECK(r.clustering.num_clusters() == 3);
    CHECK(read_csv(map / "edges.csv")[0] == std::vector<std::string>{"src_bs", "dst_bs", "weight", "inter_cluster"});
    CHECK(read_csv(map / "clusters.csv").size() == 8);
    CHECK(read_csv(map / "ms.csv").size() == 8);

    const fs::path adm = scratch("admm");
    ExperimentSpec as = small_spec("admm_convergence", adm);
    as.drops = 1;
    as.rounds = 50;
    const AggregateResult ar = run_experiment(as);
    REQUIRE(ar.traces.count("rounds") == 1);
    CHECK(ar.traces.at("rounds").size() == 50);
    CHECK(read_csv(adm / "rounds.csv")[0] ==
          std::vector<std::string>{"round", "objective_gap", "max_disagreement", "dist_to_centralized"});
}

TEST_CASE("command-line driver")
{
    const fs::path out = scratch("cli");
    const std::string cli = COOPHAUL_CLI_PATH;
    const std::string ok = cli + " sweep --out " + out.string() + " --drops 1 --set rings=1 --set lambda_points=4";
    CHECK(std::system((ok + " > /dev/null").c_str()) == 0);
    CHECK(fs::exists(out / "sweep.csv"));
    const std::string bad = cli + " sweep --out " + out.string() + " --set bogus=1";
    CHECK(std::system((bad + " > /dev/null 2>&1").c_str()) != 0);
    CHECK(std::system((cli + " > /dev/null 2>&1").c_str()) != 0);
}
