#pragma once

// Weighted group-lasso design of backhaul-sparse equalizers.
//
// The smooth part is f(W) = ||I - W H||_F^2 + ||W||_F^2 and every ordered BS
// pair (b, b'), b != b', contributes one group: the entries W(U_b, A_b').
// The penalty is lambda * sum_g c_g ||W_g||_2 with c_g from a PenaltySpec.

#include "coophaul/core.hpp"
#include "coophaul/equalize.hpp"

#include <iosfwd>
#include <optional>
#include <vector>

namespace coophaul::sparse_mcp {

using equalize::Equalizer;

/// Ordered BS pairs (src, dst), src != dst; index = src * (N_B - 1) + rank of dst.
struct GroupStructure {
    struct Group {
        int src = 0;
        int dst = 0;
    };

    BlockStructure blocks;
    std::vector<Group> groups;

    static GroupStructure from_blocks(const BlockStructure& blocks);
};

enum class PenaltyKind { distributed, static_cut, ratio_cut_fixed };

struct PenaltySpec {
    PenaltyKind kind = PenaltyKind::distributed;
    std::optional<Clustering> clustering;
    RMatrix coefficients; // N_B x N_B, zero diagonal, per-BS weights folded in

    /// c_g = 1 for every group.
    static PenaltySpec distributed(int num_bs);
    /// c_g = 1 across clusters, 0 inside.
    static PenaltySpec static_cut(const Clustering& clustering);
    /// c_g = 1 / |B_c(src)| across clusters, 0 inside.
    static PenaltySpec ratio_cut(const Clustering& clustering);

    /// Scales every group with source b by weights[b] (per-BS lambda_b / lambda).
    PenaltySpec with_source_weights(const std::vector<double>& weights) const;

    int num_bs() const { return static_cast<int>(coefficients.rows()); }
    double coefficient(int src, int dst) const { return coefficients(src, dst); }
};

struct BackhaulMatrix {
    RMatrix values; // N_B x N_B, zero diagonal
};

struct SolverOptions {
    int max_iterations = 200000;
    /// Stop once the KKT residual falls below this times max(1, |gradient at W = 0|_max).
    double kkt_tolerance = 1e-8;
    /// Or once the relative objective change over a check interval falls below this.
    double relative_objective_tolerance = 0.0;
    int check_interval = 10;
    /// Relative threshold below which a group norm counts as zero traffic.
    double zero_threshold = 1e-6;
    bool record_objective = false;

    void validate() const;
};

class SolverError : public Error {
public:
    SolverError(const std::string& what, CMatrix last_iterate, double residual)
        : Error(what), last_iterate_(std::move(last_iterate)), residual_(residual)
    {
    }

    const CMatrix& last_iterate() const { return last_iterate_; }
    double residual() const { return residual_; }

private:
    CMatrix last_iterate_;
    double residual_;
};

class InvalidPenalty : public Error {
public:
    using Error::Error;
};

struct Solution {
    Equalizer equalizer;
    int iterations = 0; // summed over the per-BS subproblems
    double kkt = 0.0;
    double objective = 0.0;
    std::vector<double> objective_trace; // whole-problem objective per step, when recorded
};

BackhaulMatrix backhaul_matrix(const CMatrix& W, const BlockStructure& blocks);

/// Off-diagonal entries of W~ above tau * max(1, max W~).
int backhaul_traffic(const BackhaulMatrix& backhaul, double tau = 1e-6);

/// Off-diagonal entries above threshold whose endpoints are in different clusters.
int inter_cluster_traffic(const BackhaulMatrix& backhaul, const Clustering& clustering, double tau = 1e-6);

double penalty_value(const BackhaulMatrix& backhaul, const PenaltySpec& penalty);

/// f(W) + lambda * sum_g c_g ||W_g||.
double objective(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty,
                 double lambda);

/// Minimizer of f over the unpenalized entries only (own BS plus c_g = 0 groups).
CMatrix unpenalized_solution(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty);

/// Smallest lambda for which every penalized group is zero at the optimum.
double lambda_max(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty);

/// Largest violation of the optimality conditions; zero iff W is optimal.
double kkt_residual(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty,
                    double lambda);

/// Restricted LMMSE on the cooperation pattern of W: source b keeps the BSs
/// b' with W~(b, b') above the traffic threshold. Traffic is unchanged; the
/// shrinkage bias of the penalized solution is removed.
CMatrix refit_on_support(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, double tau = 1e-6);

/// Precomputed per-channel data shared by repeated solves (sweeps, alternations).
///
/// The problem separates over source BSs: the rows U_b only meet groups with
/// source b. Each subproblem runs monotone FISTA with adaptive restart on
/// variables rescaled per antenna block by the mean diagonal of H H^H + I.
/// Once the set of nonzero groups stops changing, a Newton solve restricted
/// to that set finishes the job.
class GroupLassoProblem {
public:
    GroupLassoProblem(CMatrix H, BlockStructure blocks);

    const CMatrix& channel() const { return H_; }
    const BlockStructure& blocks() const { return blocks_; }

    Solution solve(const PenaltySpec& penalty, double lambda, const SolverOptions& opts = {},
                   const CMatrix* warm_start = nullptr) const;

private:
    CMatrix H_;
    BlockStructure blocks_;
    CMatrix gram_;         // H H^H + I
    RVector column_scale_; // 1 / sqrt(block mean of diag(gram)) per antenna
    CMatrix scaled_gram_;  // D gram D
    double lipschitz_ = 0.0;
};

Solution solve_group_lasso(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty,
                           double lambda, const SolverOptions& opts = {});

struct SweepPoint {
    double lambda = 0.0;
    double lambda_over_lambda_max = 0.0;
    Equalizer equalizer;
    double mse = 0.0;
    int traffic = 0;
    double sum_rate = 0.0;
    double per_cell_rate = 0.0;
    double refit_mse = 0.0;           // after refit_on_support
    double refit_per_cell_rate = 0.0; // after refit_on_support
};

/// 30 log-spaced points in [1e-3, 1] * lambda_max, plus 0, descending.
std::vector<double> default_lambda_grid(double lambda_max, int points = 30);

/// Warm-started sweep from large to small lambda; results are in descending lambda order.
std::vector<SweepPoint> lambda_sweep(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty,
                                     std::vector<double> grid, const SolverOptions& opts = {});

/// CSV with columns lambda, lambda_over_lambda_max, mse, traffic_l0, sum_rate, per_cell_rate,
/// refit_mse, refit_per_cell_rate.
void write_sweep_csv(std::ostream& out, const std::vector<SweepPoint>& sweep);

} // namespace coophaul::sparse_mcp
