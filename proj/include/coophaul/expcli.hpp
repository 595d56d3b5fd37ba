#pragma once

// Experiment driver: spec files, Monte-Carlo drops, aggregation and the CSV
// files the plotting tool reads.

#include "coophaul/core.hpp"
#include "coophaul/decentral.hpp"
#include "coophaul/dynclust.hpp"
#include "coophaul/netmodel.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace coophaul::expcli {

enum class ExperimentId {
    mse_vs_traffic,
    rate_vs_traffic,
    cdf_distributed,
    cdf_static,
    dynamic_rate,
    cluster_map,
    admm_convergence,
    oi_convergence,
};

ExperimentId parse_experiment_id(const std::string& name);
std::string experiment_name(ExperimentId id);

/// Cluster text is "fig1_seven" or groups separated by ';', e.g. "0 1 2; 3 4; 5 6".
Clustering parse_clusters(const std::string& text, int num_bs);

/// The shipped seven-cluster layout for the 19-site network.
Clustering fig1_seven();

/// Restriction of a clustering to BSs [0, num_bs), dropping emptied clusters.
Clustering restrict_clustering(const Clustering& clustering, int num_bs);

struct ExperimentSpec {
    ExperimentId experiment = ExperimentId::mse_vs_traffic;
    netmodel::ScenarioConfig scenario;
    int drops = 200;
    std::uint64_t seed = 1;
    std::string output = "out";
    int threads = 1;

    int lambda_points = 30;
    std::vector<double> lambda_fracs;    // per experiment defaults when empty
    std::string clusters = "fig1_seven";
    std::vector<int> num_clusters;       // dynamic_rate sweep / cluster_map
    std::vector<int> greedy_sizes;       // per experiment defaults when empty
    std::string intra_traffic = "both"; // distributed, head or both
    bool refit = true;                  // rate comparisons use the refit equalizer

    double rho = 0.1;
    int rounds = 2000;
    std::string comm_rule = "nearest";
    std::string consensus = "exact";
    int oi_count = 9;
    double oi_shift = 0.1;
    int oi_iterations = 5000;

    double failure_budget = 0.01;

    /// Every key of the file; scenario keys are named as in ScenarioConfig.
    static ExperimentSpec from_key_values(const KeyValues& kv);
    static ExperimentSpec load(const std::string& path);
    void validate() const;
};

struct SeriesPoint {
    double x = 0.0; // lambda / lambda_max, cluster size or cluster count, per series
    double mse_mean = 0.0;
    double mse_se = 0.0;
    double traffic_mean = 0.0;
    double rate_mean = 0.0;
    double rate_se = 0.0;
    int samples = 0;
};

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
};

struct DropFailure {
    int drop = 0;
    std::uint64_t seed = 0;
    std::string message;
};

struct AggregateResult {
    ExperimentId experiment = ExperimentId::mse_vs_traffic;
    std::map<std::string, std::vector<SeriesPoint>> series;
    std::map<std::string, std::string> x_names; // first CSV column per series
    std::map<std::string, std::vector<double>> rate_samples; // pooled per-user rates, drop order
    std::map<std::string, double> scalars;
    std::map<std::string, Table> tables;
    std::map<std::string, std::vector<decentral::RoundLog>> traces;

    // cluster_map payload
    netmodel::NetworkGeometry geometry;
    std::vector<netmodel::Point> ms_positions;
    std::vector<int> serving_bs;
    Clustering clustering;
    RMatrix backhaul;

    int drops_ok = 0;
    std::vector<DropFailure> failures;
};

/// Runs all drops (seed + drop index), aggregates in drop order and, when
/// `write` is set, emits the per-drop and aggregate files under spec.output.
/// Throws Error when more than failure_budget of the drops fail.
AggregateResult run_experiment(const ExperimentSpec& spec, bool write = true);

/// Writes the figure files of one experiment into `dir`: <series>.csv,
/// cdf_<samples>.csv, <table>.csv, <trace>.csv, summary.csv and, for
/// cluster_map, clusters.csv, edges.csv and ms.csv.
std::vector<std::string> emit_figure_data(const AggregateResult& result, const std::string& dir);

/// Mean and standard error of the mean.
std::pair<double, double> mean_se(const std::vector<double>& values);

/// Linear interpolation of y at x over points sorted by x; clamps outside.
double interpolate(const std::vector<std::pair<double, double>>& xy, double x);

/// Empirical quantile with linear interpolation between order statistics.
double quantile(std::vector<double> values, double q);

/// CSV with columns <x_name>, mse_mean, mse_se, traffic_mean, rate_mean, rate_se.
void write_series_csv(std::ostream& out, const std::vector<SeriesPoint>& series, const std::string& x_name = "lambda");

void write_table_csv(std::ostream& out, const Table& table);

} // namespace coophaul::expcli
