#include "coophaul/sparse_mcp.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace coophaul::sparse_mcp {

GroupStructure GroupStructure::from_blocks(const BlockStructure& blocks)
{
    GroupStructure gs;
    gs.blocks = blocks;
    for (int b = 0; b < blocks.num_bs; ++b) {
        for (int bp = 0; bp < blocks.num_bs; ++bp) {
            if (b != bp) {
                gs.groups.push_back({b, bp});
            }
        }
    }
    return gs;
}

// ---------------------------------------------------------------------------
// Penalties
// ---------------------------------------------------------------------------

PenaltySpec PenaltySpec::distributed(int num_bs)
{
    PenaltySpec p;
    p.kind = PenaltyKind::distributed;
    p.coefficients = RMatrix::Ones(num_bs, num_bs);
    p.coefficients.diagonal().setZero();
    return p;
}

PenaltySpec PenaltySpec::static_cut(const Clustering& clustering)
{
    const int nb = clustering.num_bs();
    PenaltySpec p;
    p.kind = PenaltyKind::static_cut;
    p.clustering = clustering;
    p.coefficients = RMatrix::Zero(nb, nb);
    for (int b = 0; b < nb; ++b) {
        for (int bp = 0; bp < nb; ++bp) {
            if (clustering.label(b) != clustering.label(bp)) {
                p.coefficients(b, bp) = 1.0;
            }
        }
    }
    return p;
}

PenaltySpec PenaltySpec::ratio_cut(const Clustering& clustering)
{
    if (clustering.has_empty()) {
        throw InvalidInput("ratio-cut penalty needs non-empty clusters");
    }
    const int nb = clustering.num_bs();
    const auto sizes = clustering.sizes();
    PenaltySpec p;
    p.kind = PenaltyKind::ratio_cut_fixed;
    p.clustering = clustering;
    p.coefficients = RMatrix::Zero(nb, nb);
    for (int b = 0; b < nb; ++b) {
        // s(B_c, complement) / |B_c| collects every edge leaving c once.
        const double weight = 1.0 / sizes[static_cast<std::size_t>(clustering.label(b))];
        for (int bp = 0; bp < nb; ++bp) {
            if (clustering.label(b) != clustering.label(bp)) {
                p.coefficients(b, bp) = weight;
            }
        }
    }
    return p;
}

PenaltySpec PenaltySpec::with_source_weights(const std::vector<double>& weights) const
{
    if (static_cast<int>(weights.size()) != num_bs()) {
        throw InvalidInput("per-BS weights must have one entry per BS");
    }
    PenaltySpec p = *this;
    for (int b = 0; b < num_bs(); ++b) {
        if (!(weights[static_cast<std::size_t>(b)] >= 0.0)) {
            throw InvalidInput("per-BS weights must be nonnegative");
        }
        p.coefficients.row(b) *= weights[static_cast<std::size_t>(b)];
    }
    return p;
}

void SolverOptions::validate() const
{
    if (max_iterations < 1 || check_interval < 1) {
        throw InvalidInput("solver iteration limits must be positive");
    }
    if (!(kkt_tolerance > 0.0) || relative_objective_tolerance < 0.0 || !(zero_threshold > 0.0)) {
        throw InvalidInput("solver tolerances must be positive");
    }
}

// ---------------------------------------------------------------------------
// Backhaul accounting
// ---------------------------------------------------------------------------

BackhaulMatrix backhaul_matrix(const CMatrix& W, const BlockStructure& blocks)
{
    const int nb = blocks.num_bs;
    const int a_per = blocks.antennas_per_bs;
    if (W.rows() != blocks.num_users() || W.cols() != blocks.num_antennas()) {
        throw InvalidInput("equalizer does not match the block structure");
    }
    BackhaulMatrix out{RMatrix::Zero(nb, nb)};
    for (int b = 0; b < nb; ++b) {
        for (int bp = 0; bp < nb; ++bp) {
            if (b == bp) {
                continue;
            }
            double sum = 0.0;
            for (int u : blocks.users_of_bs[static_cast<std::size_t>(b)]) {
                sum += W.row(u).segment(bp * a_per, a_per).squaredNorm();
            }
            out.values(b, bp) = std::sqrt(sum);
        }
    }
    return out;
}

int backhaul_traffic(const BackhaulMatrix& backhaul, double tau)
{
    const RMatrix& v = backhaul.values;
    const double cutoff = tau * std::max(1.0, v.maxCoeff());
    int count = 0;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        for (Eigen::Index j = 0; j < v.cols(); ++j) {
            if (i != j && v(i, j) > cutoff) {
                ++count;
            }
        }
    }
    return count;
}

int inter_cluster_traffic(const BackhaulMatrix& backhaul, const Clustering& clustering, double tau)
{
    const RMatrix& v = backhaul.values;
    const double cutoff = tau * std::max(1.0, v.maxCoeff());
    int count = 0;
    for (int i = 0; i < v.rows(); ++i) {
        for (int j = 0; j < v.cols(); ++j) {
            if (clustering.label(i) != clustering.label(j) && v(i, j) > cutoff) {
                ++count;
            }
        }
    }
    return count;
}

double penalty_value(const BackhaulMatrix& backhaul, const PenaltySpec& penalty)
{
    return (backhaul.values.array() * penalty.coefficients.array()).sum();
}

double objective(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty,
                 double lambda)
{
    const double smooth = equalize::mse(W, H);
    if (lambda == 0.0) {
        return smooth;
    }
    return smooth + lambda * penalty_value(backhaul_matrix(W, blocks), penalty);
}

namespace {

void check_penalty(const BlockStructure& blocks, const PenaltySpec& penalty)
{
    if (penalty.num_bs() != blocks.num_bs || penalty.coefficients.cols() != blocks.num_bs) {
        throw InvalidPenalty("penalty coefficients do not match the number of BSs");
    }
    if ((penalty.coefficients.array() < 0.0).any()) {
        throw InvalidPenalty("penalty coefficients must be nonnegative");
    }
}

std::vector<std::vector<int>> unpenalized_support(const BlockStructure& blocks, const PenaltySpec& penalty)
{
    std::vector<std::vector<int>> support(static_cast<std::size_t>(blocks.num_bs));
    for (int b = 0; b < blocks.num_bs; ++b) {
        for (int bp = 0; bp < blocks.num_bs; ++bp) {
            if (bp == b || penalty.coefficient(b, bp) == 0.0) {
                support[static_cast<std::size_t>(b)].push_back(bp);
            }
        }
    }
    return support;
}

CMatrix gram_matrix(const CMatrix& H)
{
    CMatrix gram = H * H.adjoint();
    gram.diagonal().array() += 1.0;
    return gram;
}

/// KKT residual of the rows `users` given X (those rows) and grad = 2 (X G - B).
double block_kkt(const CMatrix& X, const CMatrix& grad, int src, const BlockStructure& blocks,
                 const PenaltySpec& penalty, double lambda)
{
    const int a_per = blocks.antennas_per_bs;
    double worst = 0.0;
    for (int bp = 0; bp < blocks.num_bs; ++bp) {
        const auto g = grad.middleCols(bp * a_per, a_per);
        const double c = bp == src ? 0.0 : penalty.coefficient(src, bp);
        if (c == 0.0) {
            worst = std::max(worst, g.cwiseAbs().maxCoeff());
            continue;
        }
        const auto x = X.middleCols(bp * a_per, a_per);
        const double xnorm = x.norm();
        if (xnorm > 0.0) {
            worst = std::max(worst, (g + (lambda * c / xnorm) * x).norm());
        } else {
            worst = std::max(worst, g.norm() - lambda * c);
        }
    }
    return worst;
}

} // namespace

CMatrix unpenalized_solution(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty)
{
    check_penalty(blocks, penalty);
    return equalize::restricted_lmmse(H, blocks, unpenalized_support(blocks, penalty));
}

double lambda_max(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty)
{
    check_penalty(blocks, penalty);
    if (!(penalty.coefficients.array() > 0.0).any()) {
        throw InvalidPenalty("lambda_max is undefined when no group is penalized");
    }
    const int a_per = blocks.antennas_per_bs;
    const CMatrix W0 = unpenalized_solution(H, blocks, penalty);
    const CMatrix grad = 2.0 * (W0 * gram_matrix(H) - H.adjoint());
    double best = 0.0;
    for (int b = 0; b < blocks.num_bs; ++b) {
        for (int bp = 0; bp < blocks.num_bs; ++bp) {
            const double c = penalty.coefficient(b, bp);
            if (b == bp || c == 0.0) {
                continue;
            }
            double sq = 0.0;
            for (int u : blocks.users_of_bs[static_cast<std::size_t>(b)]) {
                sq += grad.row(u).segment(bp * a_per, a_per).squaredNorm();
            }
            best = std::max(best, std::sqrt(sq) / c);
        }
    }
    return best;
}

double kkt_residual(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty,
                    double lambda)
{
    check_penalty(blocks, penalty);
    const CMatrix grad = 2.0 * (W * gram_matrix(H) - H.adjoint());
    double worst = 0.0;
    for (int b = 0; b < blocks.num_bs; ++b) {
        const auto& users = blocks.users_of_bs[static_cast<std::size_t>(b)];
        if (users.empty()) {
            continue;
        }
        CMatrix X(static_cast<Eigen::Index>(users.size()), W.cols());
        CMatrix G(static_cast<Eigen::Index>(users.size()), W.cols());
        for (std::size_t j = 0; j < users.size(); ++j) {
            X.row(static_cast<Eigen::Index>(j)) = W.row(users[j]);
            G.row(static_cast<Eigen::Index>(j)) = grad.row(users[j]);
        }
        worst = std::max(worst, block_kkt(X, G, b, blocks, penalty, lambda));
    }
    return worst;
}

CMatrix refit_on_support(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, double tau)
{
    const RMatrix values = backhaul_matrix(W, blocks).values;
    const double cutoff = tau * std::max(1.0, values.maxCoeff());
    std::vector<std::vector<int>> support(static_cast<std::size_t>(blocks.num_bs));
    for (int b = 0; b < blocks.num_bs; ++b) {
        for (int bp = 0; bp < blocks.num_bs; ++bp) {
            if (bp == b || values(b, bp) > cutoff) {
                support[static_cast<std::size_t>(b)].push_back(bp);
            }
        }
    }
    return equalize::restricted_lmmse(H, blocks, support);
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

GroupLassoProblem::GroupLassoProblem(CMatrix H, BlockStructure blocks) : H_(std::move(H)), blocks_(std::move(blocks))
{
    blocks_.validate();
    if (H_.rows() != blocks_.num_antennas() || H_.cols() != blocks_.num_users()) {
        throw InvalidInput("channel does not match the block structure");
    }
    if (!H_.allFinite()) {
        throw InvalidInput("channel has non-finite entries");
    }
    const int a_per = blocks_.antennas_per_bs;
    gram_ = gram_matrix(H_);
    column_scale_.resize(blocks_.num_antennas());
    for (int b = 0; b < blocks_.num_bs; ++b) {
        const double mean_diag = gram_.diagonal().segment(b * a_per, a_per).real().mean();
        column_scale_.segment(b * a_per, a_per).setConstant(1.0 / std::sqrt(mean_diag));
    }
    scaled_gram_ = column_scale_.asDiagonal() * gram_ * column_scale_.asDiagonal();
    Eigen::SelfAdjointEigenSolver<CMatrix> eig(scaled_gram_, Eigen::EigenvaluesOnly);
    if (eig.info() != Eigen::Success) {
        throw NumericalError("eigenvalue computation for the step size failed");
    }
    lipschitz_ = 2.0 * eig.eigenvalues().maxCoeff();
}

namespace {

struct Subproblem {
    CMatrix B;        // rows U_b of H^H
    CMatrix scaled_B; // B D
    std::vector<double> threshold_weight; // lambda * c_g * d_g per dst BS (0 if unpenalized)
    int a_per = 1;
    double constant = 0.0; // |U_b|

    double objective(const CMatrix& Y, const CMatrix& YG) const
    {
        double value = (YG.array() * Y.conjugate().array()).real().sum() -
                       2.0 * (Y.array() * scaled_B.conjugate().array()).real().sum() + constant;
        for (std::size_t g = 0; g < threshold_weight.size(); ++g) {
            if (threshold_weight[g] > 0.0) {
                value += threshold_weight[g] * Y.middleCols(static_cast<Eigen::Index>(g) * a_per, a_per).norm();
            }
        }
        return value;
    }

    /// Minimizes the objective over the columns of the groups that are nonzero
    /// in Y (plus the unpenalized ones) by damped Newton in real coordinates.
    /// A group whose Newton step would pass through zero is fixed at zero.
    bool newton_polish(CMatrix& Y, const CMatrix& scaled_gram) const
    {
        const int num_groups = static_cast<int>(threshold_weight.size());
        std::vector<int> cols;
        std::vector<int> active; // penalized groups kept in the support
        for (int g = 0; g < num_groups; ++g) {
            const bool penalized = threshold_weight[static_cast<std::size_t>(g)] > 0.0;
            if (penalized && Y.middleCols(g * a_per, a_per).norm() == 0.0) {
                continue;
            }
            if (penalized) {
                active.push_back(g);
            }
            for (int k = 0; k < a_per; ++k) {
                cols.push_back(g * a_per + k);
            }
        }
        const auto n = static_cast<Eigen::Index>(cols.size());
        const auto m = Y.rows();
        const Eigen::Index dim = 2 * n * m;

        CMatrix Gs(n, n);
        CMatrix C(n, m); // V = Y_S^H solves G V = C when unpenalized
        CMatrix V(n, m);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                Gs(i, j) = scaled_gram(cols[static_cast<std::size_t>(i)], cols[static_cast<std::size_t>(j)]);
            }
            for (Eigen::Index r = 0; r < m; ++r) {
                C(i, r) = std::conj(scaled_B(r, cols[static_cast<std::size_t>(i)]));
                V(i, r) = std::conj(Y(r, cols[static_cast<std::size_t>(i)]));
            }
        }
        // Real coordinates: column r of V occupies [2nr, 2nr + 2n) as (Re; Im).
        RMatrix Gr(2 * n, 2 * n);
        Gr << Gs.real(), -Gs.imag(), Gs.imag(), Gs.real();
        auto to_real = [&](const CMatrix& M) {
            RVector x(dim);
            for (Eigen::Index r = 0; r < m; ++r) {
                x.segment(2 * n * r, n) = M.col(r).real();
                x.segment(2 * n * r + n, n) = M.col(r).imag();
            }
            return x;
        };
        const RVector c = to_real(C);
        RVector x = to_real(V);

        // Real coordinates of each active group.
        std::vector<std::vector<Eigen::Index>> group_idx;
        std::vector<double> weights;
        for (int g : active) {
            std::vector<Eigen::Index> idx;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (cols[static_cast<std::size_t>(i)] / a_per == g) {
                    for (Eigen::Index r = 0; r < m; ++r) {
                        idx.push_back(2 * n * r + i);
                        idx.push_back(2 * n * r + n + i);
                    }
                }
            }
            group_idx.push_back(std::move(idx));
            weights.push_back(threshold_weight[static_cast<std::size_t>(g)]);
        }
        auto group_norm = [&](const RVector& v, std::size_t k) {
            double sq = 0.0;
            for (Eigen::Index i : group_idx[k]) {
                sq += v(i) * v(i);
            }
            return std::sqrt(sq);
        };
        auto quad_times = [&](const RVector& v) {
            RVector out(dim);
            for (Eigen::Index r = 0; r < m; ++r) {
                out.segment(2 * n * r, 2 * n) = Gr * v.segment(2 * n * r, 2 * n);
            }
            return out;
        };
        auto phi = [&](const RVector& v) {
            double value = v.dot(quad_times(v)) - 2.0 * v.dot(c);
            for (std::size_t k = 0; k < group_idx.size(); ++k) {
                value += weights[k] * group_norm(v, k);
            }
            return value;
        };

        std::vector<bool> frozen(static_cast<std::size_t>(dim), false);
        std::vector<bool> dropped(group_idx.size(), false);
        auto gradient = [&](const RVector& v) {
            RVector grad = 2.0 * (quad_times(v) - c);
            for (std::size_t k = 0; k < group_idx.size(); ++k) {
                if (!dropped[k]) {
                    const double norm = group_norm(v, k);
                    for (Eigen::Index i : group_idx[k]) {
                        grad(i) += weights[k] * v(i) / norm;
                    }
                }
            }
            for (Eigen::Index i = 0; i < dim; ++i) {
                if (frozen[static_cast<std::size_t>(i)]) {
                    grad(i) = 0.0;
                }
            }
            return grad;
        };
        double fx = phi(x);
        for (int it = 0; it < 60; ++it) {
            RVector grad = 2.0 * (quad_times(x) - c);
            RMatrix hess = RMatrix::Zero(dim, dim);
            for (Eigen::Index r = 0; r < m; ++r) {
                hess.block(2 * n * r, 2 * n * r, 2 * n, 2 * n) = 2.0 * Gr;
            }
            for (std::size_t k = 0; k < group_idx.size(); ++k) {
                if (dropped[k]) {
                    continue;
                }
                const double norm = group_norm(x, k);
                const auto& idx = group_idx[k];
                for (std::size_t a = 0; a < idx.size(); ++a) {
                    const double ua = x(idx[a]) / norm;
                    grad(idx[a]) += weights[k] * ua;
                    for (std::size_t bb = 0; bb < idx.size(); ++bb) {
                        const double ub = x(idx[bb]) / norm;
                        hess(idx[a], idx[bb]) += weights[k] / norm * ((a == bb ? 1.0 : 0.0) - ua * ub);
                    }
                }
            }
            for (Eigen::Index i = 0; i < dim; ++i) {
                if (frozen[static_cast<std::size_t>(i)]) {
                    hess.row(i).setZero();
                    hess.col(i).setZero();
                    hess(i, i) = 1.0;
                    grad(i) = 0.0;
                }
            }
            Eigen::LLT<RMatrix> llt(hess);
            if (llt.info() != Eigen::Success) {
                return false;
            }
            const RVector dx = llt.solve(-grad);

            // A full step that reverses a group means its optimum sits at zero.
            bool removed = false;
            for (std::size_t k = 0; k < group_idx.size(); ++k) {
                if (dropped[k]) {
                    continue;
                }
                double along = 0.0;
                for (Eigen::Index i : group_idx[k]) {
                    along += x(i) * (x(i) + dx(i));
                }
                if (along <= 0.0) {
                    dropped[k] = true;
                    removed = true;
                    for (Eigen::Index i : group_idx[k]) {
                        x(i) = 0.0;
                        frozen[static_cast<std::size_t>(i)] = true;
                    }
                }
            }
            if (removed) {
                fx = phi(x);
                continue;
            }

            const double decrement = -grad.dot(dx);
            if (!(decrement > 0.0)) {
                break;
            }
            double t = 1.0;
            RVector trial = x + dx;
            double ft = phi(trial);
            if (decrement < 1e-10 * std::max(1.0, std::abs(fx))) {
                // Objective differences are at rounding level here; judge the
                // full step by the gradient instead.
                const RVector g_trial = gradient(trial);
                if (g_trial.norm() >= grad.norm()) {
                    break;
                }
                x = std::move(trial);
                fx = ft;
                continue;
            }
            while (ft > fx - 0.25 * t * decrement && t > 1e-12) {
                t *= 0.5;
                trial = x + t * dx;
                ft = phi(trial);
            }
            if (ft > fx) {
                break;
            }
            x = std::move(trial);
            fx = ft;
        }
        for (Eigen::Index r = 0; r < m; ++r) {
            for (Eigen::Index i = 0; i < n; ++i) {
                Y(r, cols[static_cast<std::size_t>(i)]) = Complex(x(2 * n * r + i), -x(2 * n * r + n + i));
            }
        }
        return true;
    }

    void prox(CMatrix& Y, double step) const
    {
        for (std::size_t g = 0; g < threshold_weight.size(); ++g) {
            if (threshold_weight[g] == 0.0) {
                continue;
            }
            auto block = Y.middleCols(static_cast<Eigen::Index>(g) * a_per, a_per);
            const double norm = block.norm();
            const double shrink = step * threshold_weight[g];
            if (norm <= shrink) {
                block.setZero();
            } else {
                block *= (1.0 - shrink / norm);
            }
        }
    }
};

} // namespace

Solution GroupLassoProblem::solve(const PenaltySpec& penalty, double lambda, const SolverOptions& opts,
                                  const CMatrix* warm_start) const
{
    opts.validate();
    check_penalty(blocks_, penalty);
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw InvalidInput("lambda must be finite and nonnegative");
    }
    const int nb = blocks_.num_bs;
    const int a_per = blocks_.antennas_per_bs;
    const Eigen::Index na = blocks_.num_antennas();

    CMatrix W = warm_start != nullptr ? *warm_start : unpenalized_solution(H_, blocks_, penalty);
    if (W.rows() != blocks_.num_users() || W.cols() != na) {
        throw InvalidInput("warm start does not match the problem dimensions");
    }

    Solution sol;
    std::vector<std::vector<double>> traces;
    const double step = 1.0 / lipschitz_;
    double worst_kkt = 0.0;

    for (int b = 0; b < nb; ++b) {
        const auto& users = blocks_.users_of_bs[static_cast<std::size_t>(b)];
        if (users.empty()) {
            continue;
        }
        const auto m = static_cast<Eigen::Index>(users.size());
        Subproblem sp{CMatrix(m, na), CMatrix(m, na), {}, a_per, static_cast<double>(m)};
        CMatrix Y(m, na);
        for (Eigen::Index j = 0; j < m; ++j) {
            const int u = users[static_cast<std::size_t>(j)];
            sp.B.row(j) = H_.col(u).adjoint();
            Y.row(j) = W.row(u).array() / column_scale_.transpose().array().cast<Complex>();
        }
        sp.scaled_B = sp.B * column_scale_.asDiagonal();
        sp.threshold_weight.assign(static_cast<std::size_t>(nb), 0.0);
        for (int bp = 0; bp < nb; ++bp) {
            if (bp != b) {
                sp.threshold_weight[static_cast<std::size_t>(bp)] =
                    lambda * penalty.coefficient(b, bp) * column_scale_(bp * a_per);
            }
        }

        auto kkt_of = [&](const CMatrix& Ys) {
            const CMatrix X = Ys * column_scale_.asDiagonal();
            const CMatrix grad = 2.0 * (X * gram_ - sp.B);
            return block_kkt(X, grad, b, blocks_, penalty, lambda);
        };

        CMatrix YG = Y * scaled_gram_;
        double fx = sp.objective(Y, YG);
        std::vector<double> trace;
        if (opts.record_objective) {
            trace.push_back(fx);
        }
        CMatrix z = Y;
        CMatrix p(m, na);
        double t = 1.0;
        auto support_of = [&](const CMatrix& Ys) {
            std::vector<bool> out(static_cast<std::size_t>(nb));
            for (int g = 0; g < nb; ++g) {
                out[static_cast<std::size_t>(g)] = Ys.middleCols(g * a_per, a_per).norm() > 0.0;
            }
            return out;
        };
        // Gradient scale at W = 0, so the tolerance follows the channel strength.
        const double tolerance = opts.kkt_tolerance * std::max(1.0, 2.0 * sp.B.cwiseAbs().maxCoeff());
        std::vector<bool> last_support;
        std::vector<bool> polished_support;
        int checks_since_polish = 0;
        double kkt = kkt_of(Y);
        double f_at_check = fx;
        int iter = 0;
        while (kkt > tolerance && iter < opts.max_iterations) {
            ++iter;
            p = z - step * 2.0 * (z * scaled_gram_ - sp.scaled_B);
            sp.prox(p, step);
            const CMatrix PG = p * scaled_gram_;
            const double fp = sp.objective(p, PG);
            const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
            // A plain proximal step from the accepted iterate always descends;
            // taking it unconditionally keeps rounding noise from stalling.
            if (fp <= fx || t == 1.0) {
                z = p + ((t - 1.0) / t_next) * (p - Y);
                Y = p;
                fx = fp;
                t = t_next;
            } else {
                // Momentum overshot: restart from the last accepted iterate.
                z = Y;
                t = 1.0;
            }
            if (opts.record_objective) {
                trace.push_back(fx);
            }
            if (iter % opts.check_interval == 0) {
                kkt = kkt_of(Y);
                const std::vector<bool> support = support_of(Y);
                ++checks_since_polish;
                if (kkt > tolerance && support == last_support &&
                    (support != polished_support || checks_since_polish >= 20)) {
                    polished_support = support;
                    checks_since_polish = 0;
                    CMatrix polished = Y;
                    if (sp.newton_polish(polished, scaled_gram_)) {
                        const double fp = sp.objective(polished, polished * scaled_gram_);
                        if (fp <= fx) {
                            Y = std::move(polished);
                            fx = fp;
                            z = Y;
                            t = 1.0;
                            kkt = kkt_of(Y);
                        }
                    }
                }
                last_support = support;
                if (opts.relative_objective_tolerance > 0.0 &&
                    std::abs(f_at_check - fx) <= opts.relative_objective_tolerance * std::abs(fx)) {
                    break;
                }
                f_at_check = fx;
            }
        }
        kkt = kkt_of(Y);
        sol.iterations += iter;
        worst_kkt = std::max(worst_kkt, kkt);
        if (iter > 0) {
            for (Eigen::Index j = 0; j < m; ++j) {
                W.row(users[static_cast<std::size_t>(j)]) = Y.row(j) * column_scale_.asDiagonal();
            }
        }
        if (kkt > tolerance && opts.relative_objective_tolerance == 0.0) {
            std::ostringstream msg;
            msg << "group-lasso solver did not converge for BS " << b << " (KKT residual " << kkt << ")";
            throw SolverError(msg.str(), W, kkt);
        }
        if (opts.record_objective) {
            traces.push_back(std::move(trace));
        }
    }

    if (opts.record_objective) {
        std::size_t longest = 0;
        for (const auto& tr : traces) {
            longest = std::max(longest, tr.size());
        }
        sol.objective_trace.assign(longest, 0.0);
        for (const auto& tr : traces) {
            for (std::size_t k = 0; k < longest; ++k) {
                sol.objective_trace[k] += tr[std::min(k, tr.size() - 1)];
            }
        }
    }
    sol.kkt = worst_kkt;
    sol.objective = objective(W, H_, blocks_, penalty, lambda);
    sol.equalizer = {std::move(W), blocks_};
    return sol;
}

Solution solve_group_lasso(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty,
                           double lambda, const SolverOptions& opts)
{
    return GroupLassoProblem(H, blocks).solve(penalty, lambda, opts);
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

std::vector<double> default_lambda_grid(double lambda_max, int points)
{
    std::vector<double> grid;
    for (int i = 0; i < points; ++i) {
        const double exponent = points == 1 ? 0.0 : -3.0 * (1.0 - static_cast<double>(i) / (points - 1));
        grid.push_back(lambda_max * std::pow(10.0, exponent));
    }
    grid.push_back(0.0);
    std::sort(grid.rbegin(), grid.rend());
    return grid;
}

std::vector<SweepPoint> lambda_sweep(const CMatrix& H, const BlockStructure& blocks, const PenaltySpec& penalty,
                                     std::vector<double> grid, const SolverOptions& opts)
{
    const GroupLassoProblem problem(H, blocks);
    const double lmax = lambda_max(H, blocks, penalty);
    std::sort(grid.rbegin(), grid.rend());
    std::vector<SweepPoint> out;
    out.reserve(grid.size());
    const CMatrix* warm = nullptr;
    for (double lambda : grid) {
        Solution sol = problem.solve(penalty, lambda, opts, warm);
        SweepPoint pt;
        pt.lambda = lambda;
        pt.lambda_over_lambda_max = lmax > 0.0 ? lambda / lmax : 0.0;
        pt.mse = equalize::mse(sol.equalizer.W, H);
        pt.traffic = backhaul_traffic(backhaul_matrix(sol.equalizer.W, blocks), opts.zero_threshold);
        const auto report = equalize::rates(sol.equalizer.W, H, blocks);
        pt.sum_rate = report.sum_rate;
        pt.per_cell_rate = report.per_cell_rate;
        const CMatrix refit = refit_on_support(sol.equalizer.W, H, blocks, opts.zero_threshold);
        pt.refit_mse = equalize::mse(refit, H);
        pt.refit_per_cell_rate = equalize::rates(refit, H, blocks).per_cell_rate;
        pt.equalizer = std::move(sol.equalizer);
        out.push_back(std::move(pt));
        warm = &out.back().equalizer.W;
    }
    return out;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepPoint>& sweep)
{
    out << "lambda,lambda_over_lambda_max,mse,traffic_l0,sum_rate,per_cell_rate,refit_mse,refit_per_cell_rate\n"
        << std::setprecision(17);
    for (const auto& pt : sweep) {
        out << pt.lambda << ',' << pt.lambda_over_lambda_max << ',' << pt.mse << ',' << pt.traffic << ','
            << pt.sum_rate << ',' << pt.per_cell_rate << ',' << pt.refit_mse << ',' << pt.refit_per_cell_rate << '\n';
    }
}

} // namespace coophaul::sparse_mcp
