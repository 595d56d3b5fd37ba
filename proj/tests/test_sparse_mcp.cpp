#include "coophaul/sparse_mcp.hpp"

#include "coophaul/equalize.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace coophaul;
using namespace coophaul::sparse_mcp;
using namespace testsupport;

namespace {

CMatrix gram(const CMatrix& H)
{
    return H * H.adjoint() + CMatrix::Identity(H.rows(), H.rows());
}

double group_norm(const CMatrix& M, const BlockStructure& blocks, int src, int dst)
{
    double sq = 0.0;
    for (int u : blocks.users_of_bs[src]) {
        sq += M.row(u).segment(blocks.first_antenna(dst), blocks.antennas_per_bs).squaredNorm();
    }
    return std::sqrt(sq);
}

// Plain proximal gradient on the whole problem, fixed step 1 / L.
CMatrix ista(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& p, double lambda, int iterations)
{
    const CMatrix G = gram(H);
    const double L = 2.0 * Eigen::SelfAdjointEigenSolver<CMatrix>(G).eigenvalues().maxCoeff();
    const double step = 1.0 / L;
    CMatrix W = CMatrix::Zero(blocks.num_users(), blocks.num_antennas());
    for (int it = 0; it < iterations; ++it) {
        CMatrix Z = W - step * 2.0 * (W * G - H.adjoint());
        for (int b = 0; b < blocks.num_bs; ++b) {
            for (int d = 0; d < blocks.num_bs; ++d) {
                const double c = b == d ? 0.0 : p.coefficient(b, d);
                if (c == 0.0) {
                    continue;
                }
                const double n = group_norm(Z, blocks, b, d);
                const double scale = n > step * lambda * c ? 1.0 - step * lambda * c / n : 0.0;
                for (int u : blocks.users_of_bs[b]) {
                    Z.row(u).segment(blocks.first_antenna(d), blocks.antennas_per_bs) *= scale;
                }
            }
        }
        W = Z;
    }
    return W;
}

// Subgradient optimality check written from scratch.
double kkt_oracle(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& p,
                  double lambda)
{
    const CMatrix grad = 2.0 * (W * gram(H) - H.adjoint());
    double worst = 0.0;
    for (int b = 0; b < blocks.num_bs; ++b) {
        for (int d = 0; d < blocks.num_bs; ++d) {
            const double c = b == d ? 0.0 : p.coefficient(b, d);
            double g2 = 0.0;
            double res2 = 0.0;
            const double n = group_norm(W, blocks, b, d);
            for (int u : blocks.users_of_bs[b]) {
                for (int k = 0; k < blocks.antennas_per_bs; ++k) {
                    const int a = blocks.first_antenna(d) + k;
                    g2 += std::norm(grad(u, a));
                    const Complex r = c > 0.0 && n > 0.0 ? grad(u, a) + lambda * c * W(u, a) / n : grad(u, a);
                    res2 += std::norm(r);
                }
            }
            if (c > 0.0 && n == 0.0) {
                worst = std::max(worst, std::sqrt(g2) - lambda * c);
            } else {
                worst = std::max(worst, std::sqrt(res2));
            }
        }
    }
    return worst;
}

} // namespace

TEST_CASE("lambda zero reproduces the LMMSE equalizer")
{
    Rng rng(21);
    for (int trial = 0; trial < 8; ++trial) {
        const BlockStructure blocks = square_blocks(3 + trial, 1 + trial % 2);
        const CMatrix H = random_channel(rng, blocks);
        const Solution s = solve_group_lasso(H, blocks, PenaltySpec::distributed(blocks.num_bs), 0.0);
        CHECK(rel_diff(s.equalizer.W, equalize::lmmse(H)) < 1e-6);
    }
}

TEST_CASE("solver output satisfies the optimality conditions")
{
    Rng rng(22);
    for (int trial = 0; trial < 6; ++trial) {
        const BlockStructure blocks = square_blocks(5, 1 + trial % 2);
        const CMatrix H = random_channel(rng, blocks);
        const PenaltySpec p = PenaltySpec::distributed(5);
        const double lambda = lambda_max(H, blocks, p) * (0.05 + 0.9 * rng.uniform());
        const Solution s = solve_group_lasso(H, blocks, p, lambda);
        const double scale = std::max(1.0, (2.0 * H.adjoint()).cwiseAbs().maxCoeff());
        CHECK(kkt_oracle(s.equalizer.W, H, blocks, p, lambda) <= 1e-6 * scale);
        CHECK(kkt_residual(s.equalizer.W, H, blocks, p, lambda) <= 1e-6 * scale);
        CHECK(s.objective == doctest::Approx(objective(s.equalizer.W, H, blocks, p, lambda)));
    }
}

TEST_CASE("kkt residual flags a non-optimal point")
{
    Rng rng(23);
    const BlockStructure blocks = square_blocks(4, 1);
    const CMatrix H = random_channel(rng, blocks);
    const PenaltySpec p = PenaltySpec::distributed(4);
    const CMatrix W = equalize::lmmse(H);
    CHECK(kkt_residual(W, H, blocks, p, 0.0) < 1e-10);
    CHECK(kkt_residual(W, H, blocks, p, 0.5 * lambda_max(H, blocks, p)) > 1e-3);
}

TEST_CASE("solver agrees with plain proximal gradient")
{
    Rng rng(24);
    for (int trial = 0; trial < 3; ++trial) {
        const BlockStructure blocks = square_blocks(4, 1 + trial % 2);
        const CMatrix H = random_channel(rng, blocks);
        const PenaltySpec p = trial == 2 ? PenaltySpec::ratio_cut(Clustering({0, 0, 1, 1}, 2))
                                         : PenaltySpec::distributed(4);
        const double lambda = 0.3 * lambda_max(H, blocks, p);
        SolverOptions opts;
        opts.kkt_tolerance = 1e-11;
        const Solution s = solve_group_lasso(H, blocks, p, lambda, opts);
        const CMatrix ref = ista(H, blocks, p, lambda, 40000);
        CHECK(rel_diff(s.equalizer.W, ref) < 1e-6);
        CHECK(s.objective == doctest::Approx(objective(ref, H, blocks, p, lambda)).epsilon(1e-9));
    }
}

TEST_CASE("lambda_max matches the gradient at the unpenalized solution")
{
    Rng rng(25);
    for (int trial = 0; trial < 6; ++trial) {
        const BlockStructure blocks = square_blocks(5, 1 + trial % 2);
        const CMatrix H = random_channel(rng, blocks);
        const PenaltySpec p = PenaltySpec::distributed(5);
        CMatrix W0 = CMatrix::Zero(blocks.num_users(), blocks.num_antennas());
        for (int u = 0; u < blocks.num_users(); ++u) {
            const int b = blocks.serving_bs[u];
            const int a = blocks.antennas_per_bs;
            const CMatrix Hb = H.middleRows(blocks.first_antenna(b), a);
            const CMatrix w = Hb.col(u).adjoint() * (Hb * Hb.adjoint() + CMatrix::Identity(a, a)).inverse();
            W0.row(u).segment(blocks.first_antenna(b), a) = w;
        }
        CHECK(rel_diff(unpenalized_solution(H, blocks, p), W0) < 1e-10);
        const CMatrix grad = 2.0 * (W0 * gram(H) - H.adjoint());
        double oracle = 0.0;
        for (int b = 0; b < 5; ++b) {
            for (int d = 0; d < 5; ++d) {
                if (b != d) {
                    oracle = std::max(oracle, group_norm(grad, blocks, b, d));
                }
            }
        }
        const double lmax = lambda_max(H, blocks, p);
        CHECK(lmax == doctest::Approx(oracle).epsilon(1e-10));
        const Solution above = solve_group_lasso(H, blocks, p, 1.001 * lmax);
        CHECK(backhaul_traffic(backhaul_matrix(above.equalizer.W, blocks)) == 0);
        const Solution below = solve_group_lasso(H, blocks, p, 0.95 * lmax);
        CHECK(backhaul_traffic(backhaul_matrix(below.equalizer.W, blocks)) >= 1);
    }
}

TEST_CASE("sweep MSE falls and traffic grows as lambda decreases")
{
    Rng rng(26);
    const BlockStructure blocks = square_blocks(6, 1);
    const CMatrix H = random_channel(rng, blocks);
    const PenaltySpec p = PenaltySpec::distributed(6);
    const auto grid = default_lambda_grid(lambda_max(H, blocks, p), 12);
    REQUIRE(grid.size() == 13);
    CHECK(grid.back() == 0.0);
    const auto sweep = lambda_sweep(H, blocks, p, grid);
    REQUIRE(sweep.size() == grid.size());
    CHECK(sweep.front().traffic == 0);
    CHECK(sweep.back().traffic == 30);
    for (std::size_t i = 1; i < sweep.size(); ++i) {
        CHECK(sweep[i].lambda < sweep[i - 1].lambda);
        CHECK(sweep[i].mse <= sweep[i - 1].mse + 1e-6);
        CHECK(sweep[i].refit_mse <= sweep[i].mse + 1e-9);
    }
    CHECK(sweep.back().mse == doctest::Approx(equalize::mse(equalize::lmmse(H), H)).epsilon(1e-8));
    std::ostringstream out;
    write_sweep_csv(out, sweep);
    CHECK(out.str().rfind("lambda,lambda_over_lambda_max,mse,traffic_l0,", 0) == 0);
}

TEST_CASE("refit keeps the support and minimizes the MSE on it")
{
    Rng rng(27);
    const BlockStructure blocks = square_blocks(5, 1);
    const CMatrix H = random_channel(rng, blocks);
    const PenaltySpec p = PenaltySpec::distributed(5);
    const Solution s = solve_group_lasso(H, blocks, p, 0.2 * lambda_max(H, blocks, p));
    const CMatrix R = refit_on_support(s.equalizer.W, H, blocks);
    const BackhaulMatrix a = backhaul_matrix(s.equalizer.W, blocks);
    const BackhaulMatrix b = backhaul_matrix(R, blocks);
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) {
            if (i != j) {
                CHECK((a.values(i, j) > 1e-6) == (b.values(i, j) > 1e-6));
            }
        }
    }
    CHECK(equalize::mse(R, H) <= equalize::mse(s.equalizer.W, H));
    // zero gradient of f on the kept entries
    const CMatrix grad = 2.0 * (R * gram(H) - H.adjoint());
    for (int u = 0; u < 5; ++u) {
        for (int d = 0; d < 5; ++d) {
            if (u == d || b.values(u, d) > 1e-6) {
                CHECK(std::abs(grad(u, d)) < 1e-9);
            }
        }
    }
}

TEST_CASE("traffic counts and penalty helpers")
{
    BackhaulMatrix m{RMatrix::Zero(3, 3)};
    m.values(0, 1) = 2.0;
    m.values(1, 0) = 1e-9;
    m.values(2, 0) = 0.5;
    CHECK(backhaul_traffic(m) == 2);
    const Clustering c({0, 0, 1}, 2);
    CHECK(inter_cluster_traffic(m, c) == 1);
    CHECK(penalty_value(m, PenaltySpec::static_cut(c)) == doctest::Approx(0.5 + 1e-9));
    const PenaltySpec rc = PenaltySpec::ratio_cut(c);
    CHECK(rc.coefficient(0, 2) == doctest::Approx(0.5));
    CHECK(rc.coefficient(2, 0) == doctest::Approx(1.0));
    CHECK(rc.coefficient(0, 1) == 0.0);
    const PenaltySpec w = PenaltySpec::distributed(3).with_source_weights({1.0, 2.0, 3.0});
    CHECK(w.coefficient(1, 0) == 2.0);
    CHECK(w.coefficient(2, 1) == 3.0);
    CHECK(w.coefficient(1, 1) == 0.0);
    CHECK_THROWS_AS(lambda_max(CMatrix::Identity(3, 3), BlockStructure::identity(3), PenaltySpec::static_cut(Clustering::single(3))),
                    InvalidPenalty);
}
