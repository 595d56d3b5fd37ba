// Acceptance checks: one PASS/FAIL line per criterion.

#include "coophaul/decentral.hpp"
#include "coophaul/dynclust.hpp"
#include "coophaul/equalize.hpp"
#include "coophaul/expcli.hpp"
#include "coophaul/netmodel.hpp"
#include "coophaul/sparse_mcp.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

using namespace coophaul;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Settings {
    std::string out;
    int threads = 1;
};

std::string fmt(double v, int digits = 4)
{
    std::ostringstream s;
    s << std::setprecision(digits) << v;
    return s.str();
}

bool within(double value, double target, double rel) { return std::abs(value - target) <= rel * target; }

CMatrix random_complex(Rng& rng, Eigen::Index rows, Eigen::Index cols)
{
    CMatrix M(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) {
            M(i, j) = rng.complex_normal();
        }
    }
    return M;
}

// Random cellular-looking instance: A users per BS, stronger own-cell links.
struct Instance {
    CMatrix H;
    BlockStructure blocks;
};

Instance random_instance(Rng& rng, int num_bs, int a)
{
    std::vector<int> serving;
    for (int b = 0; b < num_bs; ++b) {
        for (int k = 0; k < a; ++k) {
            serving.push_back(b);
        }
    }
    Instance inst{CMatrix(), BlockStructure::from_association(num_bs, a, serving)};
    inst.H = random_complex(rng, num_bs * a, num_bs * a);
    for (int u = 0; u < num_bs * a; ++u) {
        inst.H.col(u).segment(serving[u] * a, a) *= 2.0;
    }
    return inst;
}

double group_norm(const CMatrix& M, const BlockStructure& blocks, int src, int dst)
{
    double sq = 0.0;
    for (int u : blocks.users_of_bs[src]) {
        sq += M.row(u).segment(blocks.first_antenna(dst), blocks.antennas_per_bs).squaredNorm();
    }
    return std::sqrt(sq);
}

// Subgradient optimality violation, computed here rather than by the library.
double kkt_violation(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, double lambda)
{
    const CMatrix G = H * H.adjoint() + CMatrix::Identity(H.rows(), H.rows());
    const CMatrix grad = 2.0 * (W * G - H.adjoint());
    double worst = 0.0;
    for (int b = 0; b < blocks.num_bs; ++b) {
        for (int d = 0; d < blocks.num_bs; ++d) {
            const double n = group_norm(W, blocks, b, d);
            double res = 0.0;
            for (int u : blocks.users_of_bs[b]) {
                for (int k = 0; k < blocks.antennas_per_bs; ++k) {
                    const int col = blocks.first_antenna(d) + k;
                    const Complex r = (b != d && n > 0.0) ? grad(u, col) + lambda * W(u, col) / n : grad(u, col);
                    res += std::norm(r);
                }
            }
            res = std::sqrt(res);
            if (b != d && n == 0.0) {
                res = std::max(0.0, group_norm(grad, blocks, b, d) - lambda);
            }
            worst = std::max(worst, res);
        }
    }
    return worst;
}

expcli::AggregateResult run_spec(const Settings& st, const std::string& name,
                                 const std::vector<std::pair<std::string, std::string>>& kv)
{
    KeyValues keys;
    for (const auto& [k, v] : kv) {
        keys.set(k, v);
    }
    keys.set("output", (fs::path(st.out) / name).string());
    keys.set("threads", std::to_string(st.threads));
    return expcli::run_experiment(expcli::ExperimentSpec::from_key_values(keys));
}

RMatrix orthonormal(const RMatrix& Q)
{
    Eigen::HouseholderQR<RMatrix> qr(Q);
    return qr.householderQ() * RMatrix::Identity(Q.rows(), Q.cols());
}

// ---------------------------------------------------------------------------

Outcome lmmse_equivalence(const Settings&)
{
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const int nb = 3 + static_cast<int>(rng.index(8));
        const int a = 1 + static_cast<int>(rng.index(2));
        const Instance inst = random_instance(rng, nb, a);
        const auto s = sparse_mcp::solve_group_lasso(inst.H, inst.blocks, sparse_mcp::PenaltySpec::distributed(nb), 0.0);
        const int nu = inst.blocks.num_users();
        const CMatrix ref =
            (inst.H.adjoint() * inst.H + CMatrix::Identity(nu, nu)).inverse() * inst.H.adjoint();
        worst = std::max(worst, (s.equalizer.W - ref).norm() / ref.norm());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst <= 1e-6 && secs < 10.0, "max rel diff " + fmt(worst)};
}

Outcome kkt_oracle(const Settings&)
{
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(102);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const Instance inst = random_instance(rng, 5, 1);
        const auto pen = sparse_mcp::PenaltySpec::distributed(5);
        const double lmax = sparse_mcp::lambda_max(inst.H, inst.blocks, pen);
        double u = rng.uniform();
        while (u == 0.0) {
            u = rng.uniform();
        }
        const double lambda = u * lmax;
        const auto s = sparse_mcp::solve_group_lasso(inst.H, inst.blocks, pen, lambda);
        worst = std::max({worst, sparse_mcp::kkt_residual(s.equalizer.W, inst.H, inst.blocks, pen, lambda),
                          kkt_violation(s.equalizer.W, inst.H, inst.blocks, lambda)});
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst <= 1e-5 && secs < 30.0, "max kkt residual " + fmt(worst)};
}

Outcome lambda_max_boundary(const Settings&)
{
    Rng rng(103);
    int zero_above = 0;
    int nonzero_below = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const int nb = 3 + static_cast<int>(rng.index(6));
        const Instance inst = random_instance(rng, nb, 1 + trial % 2);
        const auto pen = sparse_mcp::PenaltySpec::distributed(nb);
        const double lmax = sparse_mcp::lambda_max(inst.H, inst.blocks, pen);
        const auto above = sparse_mcp::solve_group_lasso(inst.H, inst.blocks, pen, 1.001 * lmax);
        const auto below = sparse_mcp::solve_group_lasso(inst.H, inst.blocks, pen, 0.95 * lmax);
        zero_above += sparse_mcp::backhaul_traffic(sparse_mcp::backhaul_matrix(above.equalizer.W, inst.blocks)) == 0;
        nonzero_below += sparse_mcp::backhaul_traffic(sparse_mcp::backhaul_matrix(below.equalizer.W, inst.blocks)) > 0;
    }
    return {zero_above == 20 && nonzero_below >= 18,
            "zero at 1.001: " + std::to_string(zero_above) + "/20, nonzero at 0.95: " + std::to_string(nonzero_below) +
                "/20"};
}

Outcome path_monotonicity(const Settings&)
{
    double worst = -std::numeric_limits<double>::infinity();
    int sweeps = 0;
    netmodel::ScenarioConfig cfg;
    for (int a : {1, 2}) {
        cfg.antennas_per_bs = a;
        cfg.users_per_bs = a;
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            const auto ch = netmodel::generate_scenario(cfg, 500 + seed);
            const auto pen = sparse_mcp::PenaltySpec::distributed(ch.num_bs());
            const auto grid = sparse_mcp::default_lambda_grid(sparse_mcp::lambda_max(ch.H, ch.blocks, pen));
            const auto sweep = sparse_mcp::lambda_sweep(ch.H, ch.blocks, pen, grid);
            for (std::size_t i = 1; i < sweep.size(); ++i) {
                worst = std::max(worst, sweep[i].mse - sweep[i - 1].mse);
            }
            ++sweeps;
        }
    }
    return {worst <= 1e-6, std::to_string(sweeps) + " sweeps, largest MSE increase " + fmt(worst)};
}

Outcome mse_traffic_endpoints(const Settings& st)
{
    const auto r = run_spec(st, "mse_vs_traffic", {{"experiment", "mse_vs_traffic"},
                                         {"rings", "2"},
                                         {"antennas_per_bs", "1"},
                                         {"system_snr_db", "6.2"},
                                         {"drops", "200"}});
    const auto& s = r.series.at("sweep");
    const double nocoop = s.front().mse_mean;
    const double full = s.back().mse_mean;
    const double frac = r.scalars.at("reduction_at_12pct");
    const bool pass = within(nocoop, 8.9, 0.2) && within(full, 3.6, 0.2) && frac >= 0.25;
    return {pass, "no-coop " + fmt(nocoop) + " (8.9 +-20%), full " + fmt(full) + " (3.6 +-20%), reduction at " +
                      fmt(r.scalars.at("traffic_12pct")) + " traffic " + fmt(frac) + " (>= 0.25), " +
                      std::to_string(r.drops_ok) + " drops"};
}

Outcome proposed_vs_greedy(const Settings& st)
{
    double gap[2] = {0.0, 0.0};
    int wins = 0;
    int points = 0;
    for (int a : {1, 2}) {
        const auto r = run_spec(st, "rate_vs_traffic_a" + std::to_string(a),
                                {{"experiment", "rate_vs_traffic"},
                                 {"antennas_per_bs", std::to_string(a)},
                                 {"system_snr_db", "11.8"},
                                 {"drops", "100"}});
        const auto& t = r.tables.at("matched");
        for (const auto& row : t.rows) {
            wins += row[3] >= row[2];
            ++points;
        }
        gap[a - 1] = r.scalars.at("matched_mean_gap");
    }
    const bool pass = wins >= 0.8 * points && gap[1] > gap[0];
    return {pass, "wins " + std::to_string(wins) + "/" + std::to_string(points) + ", mean gap A=1 " + fmt(gap[0]) +
                      ", A=2 " + fmt(gap[1])};
}

Outcome static_fairness(const Settings& st)
{
    const auto r = run_spec(st, "cdf_static", {{"experiment", "cdf_static"},
                                         {"system_snr_db", "11.8"},
                                         {"clusters", "fig1_seven"},
                                         {"lambda_fracs", "1, 0.05, 0.01"},
                                         {"drops", "100"}});
    const double p10_max = r.scalars.at("rate_p10_1");
    const double p10_05 = r.scalars.at("rate_p10_0.05");
    const double t05 = r.scalars.at("inter_traffic_0.05");
    const double t01 = r.scalars.at("inter_traffic_0.01");
    const bool pass = p10_05 > p10_max && within(t05, 28.5, 0.4) && within(t01, 124.0, 0.4);
    return {pass, "p10 rate " + fmt(p10_05) + " at 0.05 vs " + fmt(p10_max) + " at 1, inter traffic " + fmt(t05) +
                      " (28.5 +-40%) and " + fmt(t01) + " (124 +-40%)"};
}

Outcome rcut_identity(const Settings&)
{
    Rng rng(108);
    double worst_rcut = 0.0;
    double worst_sym = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 3 + static_cast<int>(rng.index(17));
        const int k = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(n)));
        RMatrix W(n, n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                W(i, j) = i == j ? 0.0 : (rng.uniform() < 0.3 ? 0.0 : rng.uniform());
            }
        }
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) {
            labels[i] = i < k ? i : static_cast<int>(rng.index(static_cast<std::size_t>(k)));
        }
        const Clustering c(labels, k);
        const auto lp = dynclust::laplacians(W);
        const RMatrix phi = dynclust::indicator(c);
        const double t = (phi.transpose() * lp.L * phi).trace();
        const double ts = (phi.transpose() * lp.Lsym * phi).trace();
        worst_rcut = std::max(worst_rcut, std::abs(dynclust::rcut(W, c) - t));
        worst_sym = std::max(worst_sym, std::abs(t - ts));
    }
    return {worst_rcut <= 1e-10 && worst_sym <= 1e-10,
            "max |rcut - tr| " + fmt(worst_rcut) + ", max |tr L - tr Lsym| " + fmt(worst_sym)};
}

Outcome spectral_floor(const Settings&)
{
    Rng rng(109);
    const int n = 8;
    int ok = 0;
    double slack = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 20; ++trial) {
        RMatrix W = RMatrix::Zero(n, n);
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) {
                W(i, j) = W(j, i) = rng.uniform();
            }
        }
        const RMatrix Lsym = dynclust::laplacians(W).Lsym;
        const auto e = dynclust::smallest_eigenvectors(Lsym, 2);
        const double relaxed = (e.phi.transpose() * Lsym * e.phi).trace();
        double best = std::numeric_limits<double>::infinity();
        for (int mask = 1; mask < (1 << n) - 1; ++mask) {
            std::vector<int> labels(n);
            for (int i = 0; i < n; ++i) {
                labels[i] = (mask >> i) & 1;
            }
            const RMatrix phi = dynclust::indicator(Clustering(labels, 2));
            best = std::min(best, (phi.transpose() * Lsym * phi).trace());
        }
        ok += relaxed <= best;
        slack = std::min(slack, best - relaxed);
    }
    return {ok == 20, std::to_string(ok) + "/20 below the best partition, min slack " + fmt(slack)};
}

Outcome dynamic_clustering(const Settings&)
{
    netmodel::ScenarioConfig cfg;
    cfg.system_snr_db = 11.8;
    std::vector<int> accepted;
    bool monotone = true;
    for (int trial = 0; trial < 50; ++trial) {
        const auto ch = netmodel::generate_scenario(cfg, 700 + static_cast<std::uint64_t>(trial));
        const CMatrix W0 = equalize::lmmse(ch.H);
        const int k = 2 + trial % 6;
        const double ref = dynclust::dynamic_lambda_reference(ch.H, ch.blocks, k, W0);
        const double lambda = (trial % 2 == 0 ? 0.1 : 0.01) * ref;
        const auto res = dynclust::dynamic_mcp(ch.H, ch.blocks, lambda, k, W0);
        for (std::size_t i = 1; i < res.objective_trace.size(); ++i) {
            monotone = monotone && res.objective_trace[i] <= res.objective_trace[i - 1];
        }
        accepted.push_back(res.accepted_iterations);
    }
    std::sort(accepted.begin(), accepted.end());
    const double median = 0.5 * (accepted[24] + accepted[25]);

    Rng rng(110);
    int planted_ok = 0;
    for (int trial = 0; trial < 10; ++trial) {
        Instance inst = random_instance(rng, 10, 1 + trial % 2);
        std::vector<int> planted(10);
        for (int b = 0; b < 10; ++b) {
            planted[b] = b < 5 ? 0 : 1;
        }
        std::swap(planted[1], planted[7]);
        for (int u = 0; u < inst.blocks.num_users(); ++u) {
            for (int r = 0; r < inst.blocks.num_antennas(); ++r) {
                if (planted[inst.blocks.bs_of_antenna(r)] != planted[inst.blocks.serving_bs[u]]) {
                    inst.H(r, u) = 0.0;
                }
            }
        }
        const auto res = dynclust::dynamic_mcp(inst.H, inst.blocks, 1.0, 2, equalize::lmmse(inst.H));
        planted_ok += res.clustering.same_partition(Clustering(planted, 2));
    }
    const bool pass = monotone && median <= 5.0 && planted_ok == 10;
    return {pass, std::string(monotone ? "monotone" : "NOT monotone") + " on 50 runs, median accepted iterations " +
                      fmt(median) + ", planted recovered " + std::to_string(planted_ok) + "/10"};
}

Outcome decentralized_admm(const Settings& st)
{
    const auto r = run_spec(st, "admm", {{"experiment", "admm_convergence"},
                                         {"rings", "1"},
                                         {"system_snr_db", "11.8"},
                                         {"clusters", "fig1_seven"},
                                         {"lambda_fracs", "0.4"},
                                         {"rho", "0.1"},
                                         {"rounds", "2000"},
                                         {"drops", "1"}});
    const auto& last = r.traces.at("rounds").back();
    const bool pass = last.objective_gap <= 1e-4 && last.dist_to_centralized <= 1e-3;
    return {pass, "after " + std::to_string(last.round) + " rounds: objective gap " + fmt(last.objective_gap) +
                      " (<= 1e-4), distance " + fmt(last.dist_to_centralized) + " (<= 1e-3)"};
}

Outcome decentralized_eigensolver(const Settings&)
{
    netmodel::ScenarioConfig cfg;
    cfg.system_snr_db = 11.8;
    const auto ch = netmodel::generate_scenario(cfg, 900);
    const auto pen = sparse_mcp::PenaltySpec::distributed(ch.num_bs());
    const double lambda = 0.05 * sparse_mcp::lambda_max(ch.H, ch.blocks, pen);
    const auto sol = sparse_mcp::solve_group_lasso(ch.H, ch.blocks, pen, lambda);
    const RMatrix L = dynclust::laplacians(sparse_mcp::backhaul_matrix(sol.equalizer.W, ch.blocks).values).Lsym;
    const int n = static_cast<int>(L.rows());
    const int count = 9;
    const double shift = 0.1;

    Eigen::SelfAdjointEigenSolver<RMatrix> es(L);
    const double lambda1 = es.eigenvalues().cwiseAbs().maxCoeff();
    RMatrix target = RMatrix::Zero(n, n);
    RMatrix plain = RMatrix::Zero(n, n);
    for (int i = 0; i < count; ++i) {
        const RVector v = es.eigenvectors().col(i);
        target += (lambda1 + shift - es.eigenvalues()(i)) * v * v.transpose();
        plain += v * v.transpose();
    }

    decentral::Network net(decentral::build_comm_graph(ch.geometry));
    decentral::OiOptions o;
    o.max_iterations = 20000;
    const auto p1 = decentral::decentralized_oi(L, 1, net, o);
    RMatrix shifted = -L;
    shifted.diagonal().array() += p1.magnitudes(0) + shift;
    const auto p2 = decentral::decentralized_oi(shifted, count, net, o);
    const double l1_err = std::abs(p1.magnitudes(0) - lambda1);
    const double weighted_gap =
        (p2.Q * p2.magnitudes.asDiagonal() * p2.Q.transpose() - target).norm() / target.norm();
    const RMatrix O = orthonormal(p2.Q);
    const double gap = (O * O.transpose() - plain).norm();
    const bool pass = l1_err <= 1e-6 && gap <= 1e-4;
    return {pass, "|lambda_1| error " + fmt(l1_err) + ", projector gap " + fmt(gap) + " (weighted " +
                      fmt(weighted_gap) + "), " + std::to_string(p1.iterations) + "+" +
                      std::to_string(p2.iterations) + " iterations"};
}

Outcome kmeans_equivalence(const Settings&)
{
    Rng rng(113);
    const auto graph = decentral::build_comm_graph(netmodel::hex_layout(2, 500.0));
    int equal = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const int dim = 2 + trial % 6;
        RMatrix rows(19, dim);
        for (int i = 0; i < 19; ++i) {
            for (int j = 0; j < dim; ++j) {
                rows(i, j) = rng.normal();
            }
        }
        dynclust::KMeansOptions ko;
        ko.seed = 1000 + static_cast<std::uint64_t>(trial);
        const int k = 2 + trial % 7;
        const auto c = dynclust::kmeans(rows, k, ko);
        decentral::Network net(graph);
        const auto d = decentral::decentralized_kmeans(rows, k, net, ko);
        equal += d.clustering.labels() == c.clustering.labels() && d.centroids == c.centroids;
    }
    return {equal == 20, std::to_string(equal) + "/20 identical"};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome(const Settings&)> run;
};

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance checks"};
    std::vector<int> only;
    Settings st;
    st.out = (fs::temp_directory_path() / "coophaul_acceptance").string();
    app.add_option("--criteria", only, "Criterion numbers to run (default: all)")->delimiter(',');
    app.add_option("--out", st.out, "Directory for experiment outputs");
    app.add_option("--threads", st.threads, "Worker threads for the Monte-Carlo runs")->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> all{
        {1, "lmmse_equivalence", lmmse_equivalence},
        {2, "kkt_oracle", kkt_oracle},
        {3, "lambda_max_boundary", lambda_max_boundary},
        {4, "path_monotonicity", path_monotonicity},
        {5, "mse_vs_traffic_reproduction", mse_traffic_endpoints},
        {6, "proposed_vs_greedy", proposed_vs_greedy},
        {7, "static_cluster_fairness", static_fairness},
        {8, "rcut_identity", rcut_identity},
        {9, "spectral_relaxation_floor", spectral_floor},
        {10, "dynamic_clustering", dynamic_clustering},
        {11, "decentralized_admm", decentralized_admm},
        {12, "decentralized_eigensolver", decentralized_eigensolver},
        {13, "decentralized_kmeans_equivalence", kmeans_equivalence},
    };

    int failed = 0;
    for (const Criterion& c : all) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) {
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run(st);
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << ' ' << std::setw(2) << c.id << ' ' << c.name << ": " << o.detail
                  << " [" << fmt(secs, 3) << " s]" << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
