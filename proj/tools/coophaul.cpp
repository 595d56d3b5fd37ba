// coophaul: command-line driver for the experiments.

#include "coophaul/expcli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace coophaul;

namespace {

struct CommonArgs {
    std::string spec;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> drops;
    std::optional<int> threads;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* app, CommonArgs& args, bool spec_required)
{
    auto* spec = app->add_option("--spec", args.spec, "Experiment file (key = value lines)");
    if (spec_required) {
        spec->required();
    }
    spec->check(CLI::ExistingFile);
    app->add_option("--seed", args.seed, "Base seed; drop d uses seed + d");
    app->add_option("--out", args.out, "Output directory")->required();
    app->add_option("--drops", args.drops, "Number of channel drops")->check(CLI::PositiveNumber);
    app->add_option("--threads", args.threads, "Worker threads")->check(CLI::PositiveNumber);
    app->add_option("--set", args.overrides, "Extra key=value settings, applied last");
}

KeyValues gather(const CommonArgs& args, const std::vector<std::pair<std::string, std::string>>& fixed)
{
    KeyValues kv = args.spec.empty() ? KeyValues{} : KeyValues::load(args.spec);
    for (const auto& [k, v] : fixed) {
        kv.set(k, v);
    }
    for (const std::string& o : args.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigurationError("--set expects key=value, got '" + o + "'");
        }
        kv.set(o.substr(0, eq), o.substr(eq + 1));
    }
    kv.set("output", args.out);
    if (args.seed) {
        kv.set("seed", std::to_string(*args.seed));
    }
    if (args.drops) {
        kv.set("drops", std::to_string(*args.drops));
    }
    if (args.threads) {
        kv.set("threads", std::to_string(*args.threads));
    }
    return kv;
}

int execute(const KeyValues& kv)
{
    const expcli::ExperimentSpec spec = expcli::ExperimentSpec::from_key_values(kv);
    const expcli::AggregateResult res = expcli::run_experiment(spec);
    std::cout << expcli::experiment_name(spec.experiment) << ": " << res.drops_ok << " drops ok, "
              << res.failures.size() << " failed, output in " << spec.output << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Backhaul-constrained multi-cell uplink cooperation experiments"};
    app.require_subcommand(1);

    CommonArgs run_args;
    auto* run = app.add_subcommand("run", "Run the experiment described by a spec file");
    add_common(run, run_args, true);

    CommonArgs sweep_args;
    bool rates = false;
    auto* sweep = app.add_subcommand("sweep", "Distributed-cooperation lambda sweep (MSE, or rates against greedy)");
    add_common(sweep, sweep_args, false);
    sweep->add_flag("--rates", rates, "Per-cell rates with the greedy comparison");

    CommonArgs dec_args;
    std::string kind = "admm";
    std::optional<double> rho;
    std::optional<int> rounds;
    auto* dec = app.add_subcommand("decentral", "Decentralized ADMM or eigenvector convergence traces");
    add_common(dec, dec_args, false);
    dec->add_option("--kind", kind, "admm or oi")->check(CLI::IsMember({"admm", "oi"}));
    dec->add_option("--rho", rho, "ADMM penalty parameter")->check(CLI::PositiveNumber);
    dec->add_option("--rounds", rounds, "ADMM rounds")->check(CLI::PositiveNumber);

    CommonArgs cl_args;
    std::optional<int> clusters;
    std::optional<double> lambda_frac;
    auto* cl = app.add_subcommand("clusters", "Dynamic clustering map of one drop");
    add_common(cl, cl_args, false);
    cl->add_option("--num-clusters", clusters, "Number of clusters")->check(CLI::PositiveNumber);
    cl->add_option("--lambda-frac", lambda_frac, "lambda as a fraction of its reference value");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            return execute(gather(run_args, {}));
        }
        if (*sweep) {
            return execute(gather(sweep_args, {{"experiment", rates ? "rate_vs_traffic" : "mse_vs_traffic"}}));
        }
        if (*dec) {
            std::vector<std::pair<std::string, std::string>> fixed{
                {"experiment", kind == "admm" ? "admm_convergence" : "oi_convergence"}};
            if (rho) {
                fixed.emplace_back("rho", std::to_string(*rho));
            }
            if (rounds) {
                fixed.emplace_back("rounds", std::to_string(*rounds));
            }
            if (!dec_args.drops) {
                dec_args.drops = 1;
            }
            return execute(gather(dec_args, fixed));
        }
        if (*cl) {
            std::vector<std::pair<std::string, std::string>> fixed{{"experiment", "cluster_map"}};
            if (clusters) {
                fixed.emplace_back("num_clusters", std::to_string(*clusters));
            }
            if (lambda_frac) {
                fixed.emplace_back("lambda_fracs", std::to_string(*lambda_frac));
            }
            if (!cl_args.drops) {
                cl_args.drops = 1;
            }
            return execute(gather(cl_args, fixed));
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
