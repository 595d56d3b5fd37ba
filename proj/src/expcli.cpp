#include "coophaul/expcli.hpp"

#include "coophaul/fig1_preset.hpp"
#include "coophaul/sparse_mcp.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <thread>

namespace coophaul::expcli {

namespace fs = std::filesystem;
using sparse_mcp::PenaltySpec;

namespace {

std::size_t idx(int i) { return static_cast<std::size_t>(i); }

const std::vector<std::pair<ExperimentId, std::string>>& experiment_names()
{
    static const std::vector<std::pair<ExperimentId, std::string>> names{
        {ExperimentId::mse_vs_traffic, "mse_vs_traffic"},
        {ExperimentId::rate_vs_traffic, "rate_vs_traffic"},
        {ExperimentId::cdf_distributed, "cdf_distributed"},
        {ExperimentId::cdf_static, "cdf_static"},
        {ExperimentId::dynamic_rate, "dynamic_rate"},
        {ExperimentId::cluster_map, "cluster_map"},
        {ExperimentId::admm_convergence, "admm_convergence"},
        {ExperimentId::oi_convergence, "oi_convergence"},
    };
    return names;
}

std::vector<int> integers(const KeyValues& kv, const std::string& key, const std::vector<int>& fallback)
{
    if (!kv.has(key)) {
        return fallback;
    }
    std::vector<int> out;
    for (double v : kv.numbers(key, {})) {
        if (v != std::floor(v) || !std::isfinite(v)) {
            throw ConfigurationError("config key '" + key + "' needs integers");
        }
        out.push_back(static_cast<int>(v));
    }
    return out;
}

std::string label(double v)
{
    if (std::isinf(v)) {
        return "inf";
    }
    std::ostringstream s;
    s << v;
    return s.str();
}

} // namespace

ExperimentId parse_experiment_id(const std::string& name)
{
    for (const auto& [id, n] : experiment_names()) {
        if (n == name) {
            return id;
        }
    }
    throw ConfigurationError("unknown experiment id: " + name);
}

std::string experiment_name(ExperimentId id)
{
    for (const auto& [i, n] : experiment_names()) {
        if (i == id) {
            return n;
        }
    }
    throw InvalidInput("bad experiment id");
}

// ---------------------------------------------------------------------------
// Clusters
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<int>> parse_groups(const std::string& text, char separator)
{
    std::vector<std::vector<int>> groups;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line, separator)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        std::istringstream items(line);
        std::vector<int> group;
        std::string item;
        while (items >> item) {
            try {
                std::size_t used = 0;
                group.push_back(std::stoi(item, &used));
                if (used != item.size()) {
                    throw std::invalid_argument(item);
                }
            } catch (const std::exception&) {
                throw ConfigurationError("bad BS index in cluster list: " + item);
            }
        }
        if (!group.empty()) {
            groups.push_back(std::move(group));
        }
    }
    return groups;
}

Clustering checked_partition(int num_bs, const std::vector<std::vector<int>>& groups)
{
    std::vector<int> seen(idx(num_bs), 0);
    for (const auto& g : groups) {
        for (int b : g) {
            if (b < 0 || b >= num_bs) {
                throw ConfigurationError("cluster list names a BS outside the network");
            }
            ++seen[idx(b)];
        }
    }
    for (int b = 0; b < num_bs; ++b) {
        if (seen[idx(b)] != 1) {
            std::ostringstream msg;
            msg << "cluster list must contain every BS exactly once (BS " << b << " appears " << seen[idx(b)]
                << " times)";
            throw ConfigurationError(msg.str());
        }
    }
    return Clustering::from_groups(num_bs, groups);
}

} // namespace

Clustering fig1_seven() { return checked_partition(19, parse_groups(kFig1SevenPreset, '\n')); }

Clustering restrict_clustering(const Clustering& clustering, int num_bs)
{
    if (num_bs < 1 || num_bs > clustering.num_bs()) {
        throw InvalidInput("restriction size out of range");
    }
    std::vector<std::vector<int>> groups;
    for (const auto& members : clustering.members()) {
        std::vector<int> kept;
        for (int b : members) {
            if (b < num_bs) {
                kept.push_back(b);
            }
        }
        if (!kept.empty()) {
            groups.push_back(std::move(kept));
        }
    }
    return Clustering::from_groups(num_bs, groups);
}

Clustering parse_clusters(const std::string& text, int num_bs)
{
    if (text == "fig1_seven") {
        const Clustering preset = fig1_seven();
        if (num_bs > preset.num_bs()) {
            throw ConfigurationError("the fig1_seven preset covers 19 BSs only");
        }
        return num_bs == preset.num_bs() ? preset : restrict_clustering(preset, num_bs);
    }
    return checked_partition(num_bs, parse_groups(text, ';'));
}

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

ExperimentSpec ExperimentSpec::from_key_values(const KeyValues& kv)
{
    ExperimentSpec s;
    s.experiment = parse_experiment_id(kv.get_or("experiment", experiment_name(s.experiment)));
    s.scenario = netmodel::ScenarioConfig::from_key_values(kv);
    s.drops = static_cast<int>(kv.integer("drops", s.drops));
    s.seed = static_cast<std::uint64_t>(kv.integer("seed", static_cast<long long>(s.seed)));
    s.output = kv.get_or("output", s.output);
    s.threads = static_cast<int>(kv.integer("threads", s.threads));
    s.lambda_points = static_cast<int>(kv.integer("lambda_points", s.lambda_points));
    s.lambda_fracs = kv.numbers("lambda_fracs", s.lambda_fracs);
    s.clusters = kv.get_or("clusters", s.clusters);
    s.num_clusters = integers(kv, "num_clusters", s.num_clusters);
    s.greedy_sizes = integers(kv, "greedy_sizes", s.greedy_sizes);
    s.intra_traffic = kv.get_or("intra_traffic", s.intra_traffic);
    s.refit = kv.boolean("refit", s.refit);
    s.rho = kv.number("rho", s.rho);
    s.rounds = static_cast<int>(kv.integer("rounds", s.rounds));
    s.comm_rule = kv.get_or("comm_rule", s.comm_rule);
    s.consensus = kv.get_or("consensus", s.consensus);
    s.oi_count = static_cast<int>(kv.integer("oi_count", s.oi_count));
    s.oi_shift = kv.number("oi_shift", s.oi_shift);
    s.oi_iterations = static_cast<int>(kv.integer("oi_iterations", s.oi_iterations));
    s.failure_budget = kv.number("failure_budget", s.failure_budget);

    static const std::vector<std::string> known{
        "experiment",    "drops",          "seed",         "output",       "threads",
        "lambda_points", "lambda_fracs",   "clusters",     "num_clusters", "greedy_sizes",
        "intra_traffic", "refit",          "rho",          "rounds",       "comm_rule",
        "consensus",     "oi_count",       "oi_shift",     "oi_iterations", "failure_budget",
        "rings",         "cell_radius_m",  "antennas_per_bs", "users_per_bs", "system_snr_db",
        "shadowing_sigma_db", "pathloss_intercept_db", "pathloss_slope", "shadowing_enabled",
        "fading_enabled", "rng_seed"};
    for (const auto& [key, value] : kv.entries()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigurationError("unknown config key: " + key);
        }
    }
    s.validate();
    return s;
}

ExperimentSpec ExperimentSpec::load(const std::string& path) { return from_key_values(KeyValues::load(path)); }

void ExperimentSpec::validate() const
{
    scenario.validate();
    if (drops < 1) {
        throw ConfigurationError("drops must be >= 1");
    }
    if (threads < 1) {
        throw ConfigurationError("threads must be >= 1");
    }
    if (lambda_points < 2) {
        throw ConfigurationError("lambda_points must be >= 2");
    }
    for (double f : lambda_fracs) {
        if (!(f >= 0.0)) {
            throw ConfigurationError("lambda fractions must be >= 0");
        }
    }
    const int nb = 1 + 3 * scenario.rings * (scenario.rings + 1);
    for (int k : num_clusters) {
        if (k < 1 || k > nb) {
            throw ConfigurationError("cluster counts must lie in [1, N_B]");
        }
    }
    for (int k : greedy_sizes) {
        if (k < 1 || k > nb) {
            throw ConfigurationError("greedy cluster sizes must lie in [1, N_B]");
        }
    }
    if (intra_traffic != "both") {
        dynclust::parse_intra_traffic_mode(intra_traffic);
    }
    if (!(rho > 0.0)) {
        throw ConfigurationError("rho must be > 0");
    }
    const bool oi_used = experiment == ExperimentId::oi_convergence;
    if (rounds < 1 || oi_iterations < 1 || !(oi_shift > 0.0) || (oi_used && (oi_count < 1 || oi_count > nb))) {
        throw ConfigurationError("invalid decentralized parameters");
    }
    decentral::parse_comm_rule(comm_rule);
    decentral::parse_consensus_mode(consensus);
    if (!(failure_budget >= 0.0)) {
        throw ConfigurationError("failure_budget must be >= 0");
    }
    if (experiment == ExperimentId::cdf_static || experiment == ExperimentId::admm_convergence ||
        experiment == ExperimentId::oi_convergence) {
        parse_clusters(clusters, nb);
    }
}

// ---------------------------------------------------------------------------
// Statistics and CSV helpers
// ---------------------------------------------------------------------------

std::pair<double, double> mean_se(const std::vector<double>& values)
{
    if (values.empty()) {
        return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    }
    double sum = 0.0;
    for (double v : values) {
        sum += v;
    }
    const double n = static_cast<double>(values.size());
    const double mean = sum / n;
    if (values.size() < 2) {
        return {mean, 0.0};
    }
    double ss = 0.0;
    for (double v : values) {
        ss += (v - mean) * (v - mean);
    }
    return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

double interpolate(const std::vector<std::pair<double, double>>& xy, double x)
{
    if (xy.empty()) {
        throw InvalidInput("nothing to interpolate");
    }
    if (x <= xy.front().first) {
        return xy.front().second;
    }
    if (x >= xy.back().first) {
        return xy.back().second;
    }
    for (std::size_t i = 1; i < xy.size(); ++i) {
        if (x <= xy[i].first) {
            const auto& [x0, y0] = xy[i - 1];
            const auto& [x1, y1] = xy[i];
            if (x1 == x0) {
                return y1;
            }
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    return xy.back().second;
}

double quantile(std::vector<double> values, double q)
{
    if (values.empty() || !(q >= 0.0 && q <= 1.0)) {
        throw InvalidInput("quantile needs samples and q in [0, 1]");
    }
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

void write_series_csv(std::ostream& out, const std::vector<SeriesPoint>& series, const std::string& x_name)
{
    out << x_name << ",mse_mean,mse_se,traffic_mean,rate_mean,rate_se\n" << std::setprecision(12);
    for (const SeriesPoint& p : series) {
        out << p.x << ',' << p.mse_mean << ',' << p.mse_se << ',' << p.traffic_mean << ',' << p.rate_mean << ','
            << p.rate_se << '\n';
    }
}

void write_table_csv(std::ostream& out, const Table& table)
{
    for (std::size_t i = 0; i < table.columns.size(); ++i) {
        out << (i ? "," : "") << table.columns[i];
    }
    out << '\n' << std::setprecision(12);
    for (const auto& row : table.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            out << (i ? "," : "") << row[i];
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Drops
// ---------------------------------------------------------------------------

namespace {

struct Sample {
    std::string series;
    double x = 0.0;
    double mse = 0.0;
    double traffic = 0.0;
    double rate = 0.0;
};

struct DropRecord {
    std::vector<Sample> samples;
    std::map<std::string, std::vector<double>> rates;
    std::map<std::string, double> scalars;
    std::map<std::string, std::vector<decentral::RoundLog>> traces;
    std::map<std::string, std::string> x_names;
    AggregateResult map; // cluster_map payload only
};

struct Context {
    const ExperimentSpec& spec;
    std::vector<dynclust::IntraTrafficMode> modes;
    std::vector<std::string> mode_names;
};

std::vector<double> fracs_or(const ExperimentSpec& spec, std::vector<double> fallback)
{
    std::vector<double> f = spec.lambda_fracs.empty() ? std::move(fallback) : spec.lambda_fracs;
    return f;
}

std::vector<int> sizes_or(const ExperimentSpec& spec, std::vector<int> fallback)
{
    return spec.greedy_sizes.empty() ? std::move(fallback) : spec.greedy_sizes;
}

void add_point(DropRecord& rec, const std::string& series, double x, const CMatrix& W, const CMatrix& H,
               const BlockStructure& blocks, double traffic)
{
    rec.samples.push_back({series, x, equalize::mse(W, H), traffic, equalize::rates(W, H, blocks).per_cell_rate});
}

CMatrix rate_equalizer(const ExperimentSpec& spec, const CMatrix& W, const CMatrix& H, const BlockStructure& blocks)
{
    return spec.refit ? sparse_mcp::refit_on_support(W, H, blocks) : W;
}

// Solution whose traffic is closest to `target`, refining between sweep points by bisection on log lambda.
CMatrix match_traffic(const sparse_mcp::GroupLassoProblem& problem, const PenaltySpec& pen,
                      const std::vector<sparse_mcp::SweepPoint>& sweep, int target, int& achieved)
{
    const BlockStructure& blocks = problem.blocks();
    auto traffic_of = [&](const CMatrix& W) {
        return sparse_mcp::backhaul_traffic(sparse_mcp::backhaul_matrix(W, blocks));
    };
    std::size_t i = 0;
    while (i < sweep.size() && sweep[i].traffic < target) {
        ++i;
    }
    if (i == sweep.size()) {
        achieved = sweep.back().traffic;
        return sweep.back().equalizer.W;
    }
    if (sweep[i].traffic == target || i == 0) {
        achieved = sweep[i].traffic;
        return sweep[i].equalizer.W;
    }
    double hi = sweep[i - 1].lambda; // traffic below target
    double lo = sweep[i].lambda;     // traffic above target
    CMatrix best = sweep[i].equalizer.W;
    int best_traffic = sweep[i].traffic;
    if (target - sweep[i - 1].traffic < best_traffic - target) {
        best = sweep[i - 1].equalizer.W;
        best_traffic = sweep[i - 1].traffic;
    }
    CMatrix warm = sweep[i - 1].equalizer.W;
    for (int step = 0; step < 40 && best_traffic != target; ++step) {
        const double mid = lo > 0.0 ? std::sqrt(lo * hi) : 0.5 * hi;
        CMatrix W = problem.solve(pen, mid, {}, &warm).equalizer.W;
        const int t = traffic_of(W);
        if (std::abs(t - target) < std::abs(best_traffic - target)) {
            best = W;
            best_traffic = t;
        }
        if (t < target) {
            hi = mid;
            warm = std::move(W);
        } else {
            lo = mid;
        }
    }
    achieved = best_traffic;
    return best;
}

DropRecord drop_distributed_sweep(const Context& ctx, const netmodel::ChannelRealization& ch, bool with_greedy)
{
    const ExperimentSpec& spec = ctx.spec;
    DropRecord rec;
    const PenaltySpec pen = PenaltySpec::distributed(ch.num_bs());
    const double lm = sparse_mcp::lambda_max(ch.H, ch.blocks, pen);
    const auto sweep = sparse_mcp::lambda_sweep(ch.H, ch.blocks, pen, sparse_mcp::default_lambda_grid(lm, spec.lambda_points));
    const std::string main = spec.refit && with_greedy ? "sweep_raw" : "sweep";
    for (const auto& p : sweep) {
        rec.samples.push_back({main, p.lambda_over_lambda_max, p.mse, static_cast<double>(p.traffic), p.per_cell_rate});
    }
    const std::string refit = with_greedy ? (spec.refit ? "sweep" : "sweep_refit") : "sweep_refit";
    for (const auto& p : sweep) {
        rec.samples.push_back(
            {refit, p.lambda_over_lambda_max, p.refit_mse, static_cast<double>(p.traffic), p.refit_per_cell_rate});
    }
    rec.scalars["no_coop_mse"] = sweep.front().mse;
    rec.scalars["full_coop_mse"] = sweep.back().mse;
    rec.scalars["full_coop_traffic"] = sweep.back().traffic;
    rec.scalars["lambda_max"] = lm;
    if (with_greedy) {
        for (int s : sizes_or(spec, {1, 2, 4, 8, 16})) {
            const auto g = dynclust::greedy_cluster(ch.H, ch.blocks, s);
            const double t = sparse_mcp::backhaul_traffic(sparse_mcp::backhaul_matrix(g.equalizer.W, ch.blocks));
            add_point(rec, "greedy", s, g.equalizer.W, ch.H, ch.blocks, t);
        }
        rec.x_names["greedy"] = "cluster_size";
    }
    return rec;
}

DropRecord drop_cdf_distributed(const Context& ctx, const netmodel::ChannelRealization& ch)
{
    const ExperimentSpec& spec = ctx.spec;
    DropRecord rec;
    const PenaltySpec pen = PenaltySpec::distributed(ch.num_bs());
    const sparse_mcp::GroupLassoProblem problem(ch.H, ch.blocks);
    const double lm = sparse_mcp::lambda_max(ch.H, ch.blocks, pen);
    const auto sweep = sparse_mcp::lambda_sweep(ch.H, ch.blocks, pen, sparse_mcp::default_lambda_grid(lm, spec.lambda_points));
    for (int s : sizes_or(spec, {2, 4})) {
        const auto g = dynclust::greedy_cluster(ch.H, ch.blocks, s);
        const int target = sparse_mcp::backhaul_traffic(sparse_mcp::backhaul_matrix(g.equalizer.W, ch.blocks));
        int achieved = 0;
        const CMatrix W = match_traffic(problem, pen, sweep, target, achieved);
        const std::string tag = "s" + std::to_string(s);
        const auto greedy_rates = equalize::rates(g.equalizer.W, ch.H, ch.blocks);
        const CMatrix Wr = rate_equalizer(spec, W, ch.H, ch.blocks);
        const auto prop = equalize::rates(Wr, ch.H, ch.blocks);
        const auto raw = equalize::rates(W, ch.H, ch.blocks);
        auto push = [&](const std::string& key, const RVector& r) {
            auto& v = rec.rates[key];
            v.insert(v.end(), r.data(), r.data() + r.size());
        };
        push("greedy_" + tag, greedy_rates.rate);
        push("proposed_" + tag, prop.rate);
        push("proposed_raw_" + tag, raw.rate);
        rec.scalars["target_traffic_" + tag] = target;
        rec.scalars["proposed_traffic_" + tag] = achieved;
        rec.scalars["traffic_miss_" + tag] = std::abs(achieved - target);
    }
    return rec;
}

DropRecord drop_cdf_static(const Context& ctx, const netmodel::ChannelRealization& ch)
{
    const ExperimentSpec& spec = ctx.spec;
    DropRecord rec;
    const Clustering clusters = parse_clusters(spec.clusters, ch.num_bs());
    const PenaltySpec pen = PenaltySpec::static_cut(clusters);
    const sparse_mcp::GroupLassoProblem problem(ch.H, ch.blocks);
    const double lm = sparse_mcp::lambda_max(ch.H, ch.blocks, pen);
    std::vector<double> fracs = fracs_or(spec, {1.0, 0.05, 0.01});
    std::vector<double> order = fracs;
    std::sort(order.begin(), order.end(), std::greater<>());
    const int intra = dynclust::intra_cluster_traffic(clusters, dynclust::IntraTrafficMode::distributed);
    std::map<double, CMatrix> solved;
    const CMatrix* warm = nullptr;
    for (double f : order) {
        solved[f] = problem.solve(pen, f * lm, {}, warm).equalizer.W;
        warm = &solved[f];
    }
    for (double f : fracs) {
        const CMatrix& W = solved[f];
        const auto wt = sparse_mcp::backhaul_matrix(W, ch.blocks);
        const int inter = sparse_mcp::inter_cluster_traffic(wt, clusters);
        add_point(rec, "static", f, W, ch.H, ch.blocks, inter + intra);
        const auto r = equalize::rates(W, ch.H, ch.blocks).rate;
        auto& v = rec.rates["lambda_" + label(f)];
        v.insert(v.end(), r.data(), r.data() + r.size());
        rec.scalars["inter_traffic_" + label(f)] = inter;
    }
    rec.scalars["intra_traffic"] = intra;
    return rec;
}

DropRecord drop_dynamic(const Context& ctx, const netmodel::ChannelRealization& ch)
{
    const ExperimentSpec& spec = ctx.spec;
    DropRecord rec;
    const int nb = ch.num_bs();
    const CMatrix W0 = equalize::lmmse(ch.H);
    std::vector<int> counts = spec.num_clusters;
    if (counts.empty()) {
        counts = {1, 2, 3, 4, 5, 7, 10, 19};
        counts.erase(std::remove_if(counts.begin(), counts.end(), [nb](int k) { return k > nb; }), counts.end());
        if (counts.back() != nb) {
            counts.push_back(nb);
        }
    }
    const auto fracs = fracs_or(spec, {std::numeric_limits<double>::infinity(), 0.1, 0.01});
    double accepted = 0.0;
    int runs = 0;
    for (double f : fracs) {
        for (int k : counts) {
            const double ref = dynclust::dynamic_lambda_reference(ch.H, ch.blocks, k, W0);
            const double lambda = std::isinf(f) ? f : f * ref;
            const auto res = dynclust::dynamic_mcp(ch.H, ch.blocks, lambda, k, W0);
            const CMatrix W = rate_equalizer(spec, res.equalizer.W, ch.H, ch.blocks);
            const auto wt = sparse_mcp::backhaul_matrix(W, ch.blocks);
            const int inter = sparse_mcp::inter_cluster_traffic(wt, res.clustering);
            for (std::size_t m = 0; m < ctx.modes.size(); ++m) {
                const std::string name = "dynamic_" + ctx.mode_names[m] + "_l" + label(f);
                add_point(rec, name, k, W, ch.H, ch.blocks,
                          inter + dynclust::intra_cluster_traffic(res.clustering, ctx.modes[m]));
                rec.x_names[name] = "num_clusters";
            }
            accepted += res.accepted_iterations;
            ++runs;
        }
    }
    rec.scalars["accepted_iterations_mean"] = accepted / runs;
    for (int s : sizes_or(spec, {1, 2, 4, 8, 16})) {
        if (s > nb) {
            continue;
        }
        const auto g = dynclust::greedy_cluster(ch.H, ch.blocks, s);
        for (std::size_t m = 0; m < ctx.modes.size(); ++m) {
            const std::string name = "greedy_" + ctx.mode_names[m];
            add_point(rec, name, s, g.equalizer.W, ch.H, ch.blocks,
                      dynclust::intra_cluster_traffic(g.clustering, ctx.modes[m]));
            rec.x_names[name] = "cluster_size";
        }
    }
    return rec;
}

DropRecord drop_cluster_map(const Context& ctx, const netmodel::ChannelRealization& ch)
{
    const ExperimentSpec& spec = ctx.spec;
    DropRecord rec;
    const int k = spec.num_clusters.empty() ? std::min(7, ch.num_bs()) : spec.num_clusters.front();
    const double f = spec.lambda_fracs.empty() ? 0.1 : spec.lambda_fracs.front();
    const CMatrix W0 = equalize::lmmse(ch.H);
    const double ref = dynclust::dynamic_lambda_reference(ch.H, ch.blocks, k, W0);
    const double lambda = std::isinf(f) ? f : f * ref;
    const auto res = dynclust::dynamic_mcp(ch.H, ch.blocks, lambda, k, W0);
    const auto wt = sparse_mcp::backhaul_matrix(res.equalizer.W, ch.blocks);
    const int inter = sparse_mcp::inter_cluster_traffic(wt, res.clustering);
    add_point(rec, "map", k, res.equalizer.W, ch.H, ch.blocks,
              inter + dynclust::intra_cluster_traffic(res.clustering, dynclust::IntraTrafficMode::distributed));
    rec.x_names["map"] = "num_clusters";
    rec.scalars["inter_traffic"] = inter;
    rec.scalars["accepted_iterations"] = res.accepted_iterations;
    rec.map.geometry = ch.geometry;
    rec.map.ms_positions = ch.ms_positions;
    rec.map.serving_bs = ch.blocks.serving_bs;
    rec.map.clustering = res.clustering;
    rec.map.backhaul = wt.values;
    return rec;
}

struct StaticReference {
    Clustering clusters;
    PenaltySpec pen;
    double lambda = 0.0;
    CMatrix W;
    double objective = 0.0;
};

StaticReference static_reference(const ExperimentSpec& spec, const netmodel::ChannelRealization& ch)
{
    StaticReference r{parse_clusters(spec.clusters, ch.num_bs()), {}, 0.0, {}, 0.0};
    r.pen = PenaltySpec::static_cut(r.clusters);
    const double f = spec.lambda_fracs.empty() ? 0.4 : spec.lambda_fracs.front();
    r.lambda = f * sparse_mcp::lambda_max(ch.H, ch.blocks, r.pen);
    sparse_mcp::SolverOptions so;
    so.kkt_tolerance = 1e-11;
    r.W = sparse_mcp::solve_group_lasso(ch.H, ch.blocks, r.pen, r.lambda, so).equalizer.W;
    r.objective = sparse_mcp::objective(r.W, ch.H, ch.blocks, r.pen, r.lambda);
    return r;
}

DropRecord drop_admm(const Context& ctx, const netmodel::ChannelRealization& ch)
{
    const ExperimentSpec& spec = ctx.spec;
    DropRecord rec;
    const StaticReference ref = static_reference(spec, ch);
    const auto graph = decentral::build_comm_graph(ch.geometry, decentral::parse_comm_rule(spec.comm_rule));
    decentral::AdmmOptions o;
    o.rho = spec.rho;
    o.rounds = spec.rounds;
    const auto res = decentral::admm_static(ch.H, ch.blocks, ref.pen, ref.lambda, graph, o,
                                            decentral::CentralizedReference{ref.W, ref.objective});
    rec.scalars["final_objective_gap"] = res.log.back().objective_gap;
    rec.scalars["final_dist_to_centralized"] = res.log.back().dist_to_centralized;
    rec.scalars["final_max_disagreement"] = res.log.back().max_disagreement;
    rec.traces["rounds"] = res.log;
    return rec;
}

DropRecord drop_oi(const Context& ctx, const netmodel::ChannelRealization& ch)
{
    const ExperimentSpec& spec = ctx.spec;
    DropRecord rec;
    const StaticReference ref = static_reference(spec, ch);
    const RMatrix Lsym = dynclust::laplacians(sparse_mcp::backhaul_matrix(ref.W, ch.blocks).values).Lsym;
    const int n = static_cast<int>(Lsym.rows());
    const int count = std::min(spec.oi_count, n);

    Eigen::SelfAdjointEigenSolver<RMatrix> es(Lsym);
    const double lambda1 = es.eigenvalues().cwiseAbs().maxCoeff();
    // Top eigenpairs of the shifted matrix are the smallest of Lsym, ascending.
    RMatrix target = RMatrix::Zero(n, n);
    for (int i = 0; i < count; ++i) {
        const double mu = lambda1 + spec.oi_shift - es.eigenvalues()(i);
        target += mu * es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose();
    }

    decentral::Network net(decentral::build_comm_graph(ch.geometry, decentral::parse_comm_rule(spec.comm_rule)));
    decentral::OiOptions o;
    o.max_iterations = spec.oi_iterations;
    o.consensus.mode = decentral::parse_consensus_mode(spec.consensus);
    auto& phase1 = rec.traces["rounds_phase1"];
    auto& phase2 = rec.traces["rounds_phase2"];
    o.observer = [&](int it, const RMatrix&, const RVector& mags) {
        decentral::RoundLog r;
        r.round = it;
        r.objective_gap = std::abs(mags(0) - lambda1);
        r.messages = net.messages();
        r.payload_entries = net.payload_entries();
        phase1.push_back(r);
    };
    const auto p1 = decentral::decentralized_oi(Lsym, 1, net, o);
    RMatrix shifted = -Lsym;
    shifted.diagonal().array() += p1.magnitudes(0) + spec.oi_shift;
    const double tnorm = target.norm();
    o.observer = [&](int it, const RMatrix& Q, const RVector& mags) {
        decentral::RoundLog r;
        r.round = it;
        r.objective_gap = std::abs(mags(0) - (lambda1 + spec.oi_shift - es.eigenvalues()(0)));
        r.dist_to_centralized = (Q * mags.asDiagonal() * Q.transpose() - target).norm() / tnorm;
        r.messages = net.messages();
        r.payload_entries = net.payload_entries();
        phase2.push_back(r);
    };
    const auto p2 = decentral::decentralized_oi(shifted, count, net, o);
    rec.scalars["lambda1_error"] = std::abs(p1.magnitudes(0) - lambda1);
    rec.scalars["projector_error"] = phase2.back().dist_to_centralized;
    rec.scalars["phase1_iterations"] = p1.iterations;
    rec.scalars["phase2_iterations"] = p2.iterations;
    return rec;
}

DropRecord run_drop(const Context& ctx, const netmodel::ChannelRealization& ch)
{
    switch (ctx.spec.experiment) {
    case ExperimentId::mse_vs_traffic:
        return drop_distributed_sweep(ctx, ch, false);
    case ExperimentId::rate_vs_traffic:
        return drop_distributed_sweep(ctx, ch, true);
    case ExperimentId::cdf_distributed:
        return drop_cdf_distributed(ctx, ch);
    case ExperimentId::cdf_static:
        return drop_cdf_static(ctx, ch);
    case ExperimentId::dynamic_rate:
        return drop_dynamic(ctx, ch);
    case ExperimentId::cluster_map:
        return drop_cluster_map(ctx, ch);
    case ExperimentId::admm_convergence:
        return drop_admm(ctx, ch);
    case ExperimentId::oi_convergence:
        return drop_oi(ctx, ch);
    }
    throw InvalidInput("bad experiment id");
}

bool same_x(double a, double b)
{
    return a == b || std::abs(a - b) <= 1e-9 * std::max(std::abs(a), std::abs(b));
}

void write_drop_csv(std::ostream& out, const DropRecord& rec)
{
    out << "kind,series,x,mse,traffic,rate\n" << std::setprecision(17);
    for (const Sample& s : rec.samples) {
        out << "point," << s.series << ',' << s.x << ',' << s.mse << ',' << s.traffic << ',' << s.rate << '\n';
    }
    for (const auto& [key, value] : rec.scalars) {
        out << "scalar," << key << ",," << value << ",,\n";
    }
}

// Derived numbers that need the aggregated curves.
void finalize(const ExperimentSpec& spec, AggregateResult& res)
{
    auto curve = [&](const std::string& name, bool rate) {
        std::vector<std::pair<double, double>> xy;
        for (const SeriesPoint& p : res.series.at(name)) {
            xy.emplace_back(p.traffic_mean, rate ? p.rate_mean : p.mse_mean);
        }
        std::stable_sort(xy.begin(), xy.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        return xy;
    };
    switch (spec.experiment) {
    case ExperimentId::mse_vs_traffic: {
        const double nocoop = res.series.at("sweep").front().mse_mean;
        const double full = res.series.at("sweep").back().mse_mean;
        const double t12 = 0.12 * res.series.at("sweep").back().traffic_mean;
        const double m12 = interpolate(curve("sweep", false), t12);
        res.scalars["traffic_12pct"] = t12;
        res.scalars["mse_at_12pct"] = m12;
        res.scalars["reduction_at_12pct"] = (nocoop - m12) / (nocoop - full);
        break;
    }
    case ExperimentId::rate_vs_traffic: {
        Table t{{"cluster_size", "traffic", "greedy_rate", "proposed_rate", "proposed_raw_rate"}, {}};
        const auto prop = curve("sweep", true);
        const auto raw = curve(spec.refit ? "sweep_raw" : "sweep_refit", true);
        int wins = 0;
        double gap = 0.0;
        for (const SeriesPoint& g : res.series.at("greedy")) {
            const double p = interpolate(prop, g.traffic_mean);
            t.rows.push_back({g.x, g.traffic_mean, g.rate_mean, p, interpolate(raw, g.traffic_mean)});
            wins += p >= g.rate_mean ? 1 : 0;
            gap += p - g.rate_mean;
        }
        res.tables["matched"] = t;
        res.scalars["matched_points"] = static_cast<double>(t.rows.size());
        res.scalars["matched_wins"] = wins;
        res.scalars["matched_mean_gap"] = gap / static_cast<double>(t.rows.size());
        break;
    }
    case ExperimentId::cdf_static:
        for (const auto& [key, samples] : res.rate_samples) {
            res.scalars["rate_p10_" + key.substr(std::string("lambda_").size())] = quantile(samples, 0.1);
        }
        break;
    default:
        break;
    }
}

} // namespace

AggregateResult run_experiment(const ExperimentSpec& spec, bool write)
{
    spec.validate();
    Context ctx{spec, {}, {}};
    if (spec.intra_traffic == "both") {
        ctx.modes = {dynclust::IntraTrafficMode::distributed, dynclust::IntraTrafficMode::head};
        ctx.mode_names = {"distributed", "head"};
    } else {
        ctx.modes = {dynclust::parse_intra_traffic_mode(spec.intra_traffic)};
        ctx.mode_names = {spec.intra_traffic};
    }

    const int drops = spec.drops;
    std::vector<std::optional<DropRecord>> records(idx(drops));
    std::vector<std::string> errors(idx(drops));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int d = next++; d < drops; d = next++) {
            const std::uint64_t seed = spec.seed + static_cast<std::uint64_t>(d);
            try {
                const auto ch = netmodel::generate_scenario(spec.scenario, seed);
                records[idx(d)] = run_drop(ctx, ch);
            } catch (const std::exception& e) {
                errors[idx(d)] = e.what();
                if (errors[idx(d)].empty()) {
                    errors[idx(d)] = "unknown error";
                }
            }
        }
    };
    const int threads = std::min(spec.threads, drops);
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    AggregateResult res;
    res.experiment = spec.experiment;
    std::vector<std::string> series_order;
    std::map<std::string, std::vector<std::vector<Sample>>> by_series; // series -> position -> samples
    std::map<std::string, std::vector<double>> scalar_values;
    std::map<std::string, std::vector<std::vector<decentral::RoundLog>>> traces;
    for (int d = 0; d < drops; ++d) {
        if (!records[idx(d)]) {
            const std::uint64_t seed = spec.seed + static_cast<std::uint64_t>(d);
            std::cerr << "drop " << d << " (seed " << seed << ") failed: " << errors[idx(d)] << '\n';
            res.failures.push_back({d, seed, errors[idx(d)]});
            continue;
        }
        const DropRecord& rec = *records[idx(d)];
        ++res.drops_ok;
        std::map<std::string, int> position;
        for (const Sample& s : rec.samples) {
            if (by_series.count(s.series) == 0) {
                series_order.push_back(s.series);
            }
            auto& slots = by_series[s.series];
            const int pos = position[s.series]++;
            if (static_cast<int>(slots.size()) <= pos) {
                slots.resize(idx(pos + 1));
            }
            if (!slots[idx(pos)].empty() && !same_x(slots[idx(pos)].front().x, s.x)) {
                throw Error("drops disagree on the grid of series " + s.series);
            }
            slots[idx(pos)].push_back(s);
        }
        for (const auto& [key, v] : rec.rates) {
            auto& pooled = res.rate_samples[key];
            pooled.insert(pooled.end(), v.begin(), v.end());
        }
        for (const auto& [key, v] : rec.scalars) {
            scalar_values[key].push_back(v);
        }
        for (const auto& [key, v] : rec.traces) {
            traces[key].push_back(v);
        }
        for (const auto& [key, v] : rec.x_names) {
            res.x_names[key] = v;
        }
        if (spec.experiment == ExperimentId::cluster_map && res.drops_ok == 1) {
            res.geometry = rec.map.geometry;
            res.ms_positions = rec.map.ms_positions;
            res.serving_bs = rec.map.serving_bs;
            res.clustering = rec.map.clustering;
            res.backhaul = rec.map.backhaul;
        }
    }

    for (const auto& name : series_order) {
        std::vector<SeriesPoint> pts;
        for (const auto& slot : by_series[name]) {
            std::vector<double> m, t, r;
            for (const Sample& s : slot) {
                m.push_back(s.mse);
                t.push_back(s.traffic);
                r.push_back(s.rate);
            }
            SeriesPoint p;
            p.x = slot.front().x;
            std::tie(p.mse_mean, p.mse_se) = mean_se(m);
            p.traffic_mean = mean_se(t).first;
            std::tie(p.rate_mean, p.rate_se) = mean_se(r);
            p.samples = static_cast<int>(slot.size());
            pts.push_back(p);
        }
        res.series[name] = std::move(pts);
    }
    for (const auto& [key, values] : scalar_values) {
        res.scalars[key] = mean_se(values).first;
    }
    // Traces: per-round mean over drops, counters from the first drop.
    for (const auto& [key, runs] : traces) {
        std::vector<decentral::RoundLog> mean = runs.front();
        for (std::size_t i = 0; i < mean.size(); ++i) {
            double gap = 0.0, dis = 0.0, dist = 0.0;
            int n = 0;
            for (const auto& run : runs) {
                if (i < run.size()) {
                    gap += run[i].objective_gap;
                    dis += run[i].max_disagreement;
                    dist += run[i].dist_to_centralized;
                    ++n;
                }
            }
            mean[i].objective_gap = gap / n;
            mean[i].max_disagreement = dis / n;
            mean[i].dist_to_centralized = dist / n;
            mean[i].agent_objective.clear();
        }
        res.traces[key] = std::move(mean);
    }
    res.scalars["drops_ok"] = res.drops_ok;
    res.scalars["drops_failed"] = static_cast<double>(res.failures.size());
    if (res.drops_ok > 0) {
        finalize(spec, res);
    }

    if (write) {
        const fs::path dir(spec.output);
        fs::create_directories(dir / "drops");
        for (int d = 0; d < drops; ++d) {
            if (records[idx(d)]) {
                std::ostringstream name;
                name << "drop_" << std::setw(5) << std::setfill('0') << d << ".csv";
                std::ofstream out(dir / "drops" / name.str());
                write_drop_csv(out, *records[idx(d)]);
            }
        }
        if (!res.failures.empty()) {
            std::ofstream out(dir / "failures.csv");
            out << "drop,seed,message\n";
            for (const auto& f : res.failures) {
                std::string msg = f.message;
                std::replace(msg.begin(), msg.end(), ',', ';');
                std::replace(msg.begin(), msg.end(), '\n', ' ');
                out << f.drop << ',' << f.seed << ',' << msg << '\n';
            }
        }
        if (res.drops_ok > 0) {
            emit_figure_data(res, spec.output);
        }
    }

    if (static_cast<double>(res.failures.size()) > spec.failure_budget * drops || res.drops_ok == 0) {
        std::ostringstream msg;
        msg << res.failures.size() << " of " << drops << " drops failed, over the failure budget";
        throw Error(msg.str());
    }
    return res;
}

std::vector<std::string> emit_figure_data(const AggregateResult& result, const std::string& dir)
{
    const fs::path base(dir);
    fs::create_directories(base);
    std::vector<std::string> files;
    auto open = [&](const std::string& name) {
        files.push_back((base / name).string());
        std::ofstream out(base / name);
        if (!out) {
            throw Error("cannot write " + files.back());
        }
        return out;
    };
    for (const auto& [name, series] : result.series) {
        auto out = open(name + ".csv");
        const auto x = result.x_names.find(name);
        write_series_csv(out, series, x == result.x_names.end() ? "lambda" : x->second);
    }
    for (const auto& [name, samples] : result.rate_samples) {
        auto out = open("cdf_" + name + ".csv");
        equalize::write_cdf_csv(out, samples);
    }
    for (const auto& [name, table] : result.tables) {
        auto out = open(name + ".csv");
        write_table_csv(out, table);
    }
    for (const auto& [name, trace] : result.traces) {
        auto out = open(name + ".csv");
        out << "round,objective_gap,max_disagreement,dist_to_centralized\n" << std::setprecision(12);
        for (const auto& r : trace) {
            out << r.round << ',' << r.objective_gap << ',' << r.max_disagreement << ',' << r.dist_to_centralized
                << '\n';
        }
    }
    {
        auto out = open("summary.csv");
        out << "key,value\n" << std::setprecision(12);
        for (const auto& [key, value] : result.scalars) {
            out << key << ',' << value << '\n';
        }
    }
    if (result.experiment == ExperimentId::cluster_map) {
        const int nb = result.geometry.num_bs();
        if (result.clustering.num_bs() != nb || result.backhaul.rows() != nb) {
            throw Error("cluster map payload does not match the geometry");
        }
        {
            auto out = open("clusters.csv");
            out << "bs,x_m,y_m,cluster\n" << std::setprecision(12);
            for (int b = 0; b < nb; ++b) {
                const auto& p = result.geometry.bs_positions[idx(b)];
                out << b << ',' << p.x << ',' << p.y << ',' << result.clustering.label(b) << '\n';
            }
        }
        {
            auto out = open("edges.csv");
            out << "src_bs,dst_bs,weight,inter_cluster\n" << std::setprecision(12);
            const double tau = 1e-6 * std::max(1.0, result.backhaul.maxCoeff());
            for (int s = 0; s < nb; ++s) {
                for (int d = 0; d < nb; ++d) {
                    if (s != d && result.backhaul(s, d) > tau) {
                        out << s << ',' << d << ',' << result.backhaul(s, d) << ','
                            << (result.clustering.label(s) != result.clustering.label(d) ? 1 : 0) << '\n';
                    }
                }
            }
        }
        {
            auto out = open("ms.csv");
            out << "ms,x_m,y_m,serving_bs,cluster\n" << std::setprecision(12);
            for (std::size_t u = 0; u < result.ms_positions.size(); ++u) {
                const int b = result.serving_bs[u];
                out << u << ',' << result.ms_positions[u].x << ',' << result.ms_positions[u].y << ',' << b << ','
                    << result.clustering.label(b) << '\n';
            }
        }
    }
    return files;
}

} // namespace coophaul::expcli
