#include "coophaul/dynclust.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace coophaul::dynclust {

namespace {

void check_affinity(const RMatrix& affinity, const Clustering& clustering)
{
    if (affinity.rows() != affinity.cols() || affinity.rows() != clustering.num_bs()) {
        throw InvalidInput("affinity matrix does not match the clustering");
    }
}

/// Drops empty clusters, relabeling by first appearance.
Clustering compact(const Clustering& clustering)
{
    std::vector<int> map(static_cast<std::size_t>(clustering.num_clusters()), -1);
    std::vector<int> labels(static_cast<std::size_t>(clustering.num_bs()));
    int next = 0;
    for (int b = 0; b < clustering.num_bs(); ++b) {
        int& m = map[static_cast<std::size_t>(clustering.label(b))];
        if (m < 0) {
            m = next++;
        }
        labels[static_cast<std::size_t>(b)] = m;
    }
    return Clustering(std::move(labels), next);
}

} // namespace

double cut(const RMatrix& affinity, const Clustering& clustering)
{
    check_affinity(affinity, clustering);
    double total = 0.0;
    for (int b = 0; b < affinity.rows(); ++b) {
        for (int bp = 0; bp < affinity.cols(); ++bp) {
            if (clustering.label(b) != clustering.label(bp)) {
                total += affinity(b, bp);
            }
        }
    }
    return total;
}

double rcut(const RMatrix& affinity, const Clustering& clustering)
{
    check_affinity(affinity, clustering);
    if (clustering.has_empty()) {
        throw InvalidInput("ratio cut is undefined for a partition with an empty cluster");
    }
    const auto sizes = clustering.sizes();
    std::vector<double> leaving(sizes.size(), 0.0);
    for (int b = 0; b < affinity.rows(); ++b) {
        for (int bp = 0; bp < affinity.cols(); ++bp) {
            if (clustering.label(b) != clustering.label(bp)) {
                leaving[static_cast<std::size_t>(clustering.label(b))] += affinity(b, bp);
            }
        }
    }
    double total = 0.0;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
        total += leaving[c] / sizes[c];
    }
    return total;
}

LaplacianPair laplacians(const RMatrix& affinity)
{
    if (affinity.rows() != affinity.cols()) {
        throw InvalidInput("affinity matrix must be square");
    }
    LaplacianPair lp;
    lp.D = affinity.rowwise().sum().asDiagonal();
    lp.L = lp.D - affinity;
    lp.Lsym = 0.5 * (lp.L + lp.L.transpose());
    return lp;
}

RMatrix indicator(const Clustering& clustering)
{
    const auto sizes = clustering.sizes();
    RMatrix phi = RMatrix::Zero(clustering.num_bs(), clustering.num_clusters());
    for (int b = 0; b < clustering.num_bs(); ++b) {
        const int c = clustering.label(b);
        phi(b, c) = 1.0 / std::sqrt(static_cast<double>(sizes[static_cast<std::size_t>(c)]));
    }
    return phi;
}

void fix_signs(RMatrix& columns)
{
    for (Eigen::Index j = 0; j < columns.cols(); ++j) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < columns.rows(); ++i) {
            if (std::abs(columns(i, j)) > std::abs(columns(best, j))) {
                best = i;
            }
        }
        if (columns(best, j) < 0.0) {
            columns.col(j) *= -1.0;
        }
    }
}

SpectralEmbedding smallest_eigenvectors(const RMatrix& symmetric, int count)
{
    if (symmetric.rows() != symmetric.cols() || count < 1 || count > symmetric.rows()) {
        throw InvalidInput("eigenvector count must be between 1 and the matrix size");
    }
    Eigen::SelfAdjointEigenSolver<RMatrix> eig(symmetric);
    if (eig.info() != Eigen::Success) {
        throw NumericalError("symmetric eigensolver failed");
    }
    SpectralEmbedding emb;
    emb.phi = eig.eigenvectors().leftCols(count);
    emb.eigenvalues = eig.eigenvalues().head(count);
    fix_signs(emb.phi);
    return emb;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

RVector sequential_sum(const std::vector<RVector>& contributions)
{
    if (contributions.empty()) {
        return {};
    }
    RVector total = contributions.front();
    for (std::size_t i = 1; i < contributions.size(); ++i) {
        total += contributions[i];
    }
    return total;
}

namespace {

int nearest(const RMatrix& centroids, const RVector& x, const std::vector<bool>& active)
{
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < centroids.rows(); ++c) {
        if (!active[static_cast<std::size_t>(c)]) {
            continue;
        }
        const double d = (centroids.row(c).transpose() - x).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

/// Every point learns the value published by each point (one slot each).
RVector gather(const std::vector<double>& local, const Reducer& reduce)
{
    const auto n = static_cast<Eigen::Index>(local.size());
    std::vector<RVector> parts(local.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        parts[static_cast<std::size_t>(i)] = RVector::Zero(n);
        parts[static_cast<std::size_t>(i)](i) = local[static_cast<std::size_t>(i)];
    }
    return reduce(parts);
}

/// Every point learns the row owned by `owner`.
RVector broadcast_row(const RMatrix& points, Eigen::Index owner, const Reducer& reduce)
{
    std::vector<RVector> parts(static_cast<std::size_t>(points.rows()));
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        parts[static_cast<std::size_t>(i)] =
            i == owner ? RVector(points.row(i).transpose()) : RVector(RVector::Zero(points.cols()));
    }
    return reduce(parts);
}

double total_inertia(const RMatrix& points, const RMatrix& centroids, const std::vector<int>& labels,
                     const Reducer& reduce)
{
    std::vector<RVector> parts(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        parts[i] = RVector::Constant(
            1, (points.row(static_cast<Eigen::Index>(i)) - centroids.row(labels[i])).squaredNorm());
    }
    return reduce(parts)(0);
}

} // namespace

RMatrix kmeanspp_seed(const RMatrix& points, int k, Rng& rng, const Reducer& reduce)
{
    const auto n = points.rows();
    if (k < 1 || k > n) {
        throw InvalidInput("number of clusters must be between 1 and the number of points");
    }
    RMatrix centroids(k, points.cols());
    auto first = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
    centroids.row(0) = broadcast_row(points, first, reduce).transpose();
    std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    for (int c = 1; c < k; ++c) {
        for (Eigen::Index i = 0; i < n; ++i) {
            d2[static_cast<std::size_t>(i)] =
                std::min(d2[static_cast<std::size_t>(i)], (points.row(i) - centroids.row(c - 1)).squaredNorm());
        }
        const RVector all = gather(d2, reduce);
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            total += all(i);
        }
        Eigen::Index pick = -1;
        if (total > 0.0) {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += all(i);
                if (all(i) > 0.0) {
                    pick = i;
                }
                if (acc > u) {
                    break;
                }
            }
        } else {
            // Fewer distinct points than clusters; Lloyd will flag the empty cluster.
            pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
        }
        centroids.row(c) = broadcast_row(points, pick, reduce).transpose();
    }
    return centroids;
}

KMeansResult lloyd(const RMatrix& points, RMatrix centroids, int max_iterations, const Reducer& reduce)
{
    const auto n = static_cast<int>(points.rows());
    const auto k = static_cast<int>(centroids.rows());
    const auto dim = points.cols();
    if (centroids.cols() != dim || k < 1 || max_iterations < 1) {
        throw InvalidInput("invalid Lloyd initialization");
    }
    std::vector<bool> active(static_cast<std::size_t>(k), true);
    auto assign = [&]() {
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            labels[static_cast<std::size_t>(i)] = nearest(centroids, points.row(i).transpose(), active);
        }
        return labels;
    };

    KMeansResult res;
    std::vector<int> labels = assign();
    for (int it = 0; it < max_iterations; ++it) {
        ++res.iterations;
        res.inertia_trace.push_back(total_inertia(points, centroids, labels, reduce));

        std::vector<RVector> parts(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            RVector part = RVector::Zero(k * dim + k);
            const int c = labels[static_cast<std::size_t>(i)];
            part.segment(c * dim, dim) = points.row(i).transpose();
            part(k * dim + c) = 1.0;
            parts[static_cast<std::size_t>(i)] = std::move(part);
        }
        const RVector sums = reduce(parts);
        std::vector<int> empty;
        for (int c = 0; c < k; ++c) {
            const double count = sums(k * dim + c);
            if (count > 0.0) {
                centroids.row(c) = sums.segment(c * dim, dim).transpose() / count;
            } else {
                empty.push_back(c);
            }
        }

        bool reseeded = false;
        if (!empty.empty()) {
            std::vector<double> dist(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                dist[static_cast<std::size_t>(i)] =
                    (points.row(i) - centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
            }
            RVector all = gather(dist, reduce);
            for (int c : empty) {
                Eigen::Index far = 0;
                for (Eigen::Index i = 1; i < n; ++i) {
                    if (all(i) > all(far)) {
                        far = i;
                    }
                }
                if (all(far) > 0.0) {
                    centroids.row(c) = broadcast_row(points, far, reduce).transpose();
                    active[static_cast<std::size_t>(c)] = true;
                    all(far) = 0.0;
                    reseeded = true;
                } else {
                    active[static_cast<std::size_t>(c)] = false;
                }
            }
        }

        std::vector<int> next = assign();
        std::vector<double> changed(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            changed[static_cast<std::size_t>(i)] =
                next[static_cast<std::size_t>(i)] != labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        }
        std::vector<RVector> flags(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            flags[static_cast<std::size_t>(i)] = RVector::Constant(1, changed[static_cast<std::size_t>(i)]);
        }
        const double num_changed = reduce(flags)(0);
        labels = std::move(next);
        if (num_changed == 0.0 && !reseeded) {
            break;
        }
    }

    res.inertia = total_inertia(points, centroids, labels, reduce);
    res.clustering = Clustering(labels, k);
    res.has_empty = res.clustering.has_empty();
    res.centroids = std::move(centroids);
    return res;
}

KMeansResult kmeans(const RMatrix& points, int k, const KMeansOptions& opts, const Reducer& reduce)
{
    if (opts.restarts < 1) {
        throw InvalidInput("k-means needs at least one restart");
    }
    if (k < 1 || k > points.rows()) {
        throw InvalidInput("number of clusters must be between 1 and the number of points");
    }
    KMeansResult best;
    bool have = false;
    for (int r = 0; r < opts.restarts; ++r) {
        Rng rng(derive_seed(opts.seed, static_cast<std::uint64_t>(r)));
        KMeansResult res = lloyd(points, kmeanspp_seed(points, k, rng, reduce), opts.max_iterations, reduce);
        if (!have || res.inertia < best.inertia) {
            best = std::move(res);
            have = true;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Spectral clustering and the alternation
// ---------------------------------------------------------------------------

SpectralResult spectral_cluster(const RMatrix& affinity, int num_clusters, const KMeansOptions& opts)
{
    if (num_clusters < 1 || num_clusters > affinity.rows()) {
        throw InvalidInput("number of clusters must be between 1 and the number of BSs");
    }
    SpectralResult out;
    out.embedding = smallest_eigenvectors(laplacians(affinity).Lsym, num_clusters);
    KMeansResult km = kmeans(out.embedding.phi, num_clusters, opts);
    out.clustering = std::move(km.clustering);
    out.has_empty = km.has_empty;
    return out;
}

double joint_objective(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, const Clustering& clustering,
                       double lambda)
{
    const double smooth = equalize::mse(W, H);
    if (lambda == 0.0) {
        return smooth;
    }
    const double penalty = rcut(sparse_mcp::backhaul_matrix(W, blocks).values, clustering);
    if (std::isinf(lambda) && penalty == 0.0) {
        return smooth;
    }
    return smooth + lambda * penalty;
}

double dynamic_lambda_reference(const CMatrix& H, const BlockStructure& blocks, int num_clusters, const CMatrix& W0,
                                const KMeansOptions& opts)
{
    const SpectralResult first = spectral_cluster(sparse_mcp::backhaul_matrix(W0, blocks).values, num_clusters, opts);
    const Clustering clusters = compact(first.clustering);
    if (clusters.num_clusters() == 1) {
        return 0.0;
    }
    return sparse_mcp::lambda_max(H, blocks, sparse_mcp::PenaltySpec::ratio_cut(clusters));
}

DynamicResult dynamic_mcp(const CMatrix& H, const BlockStructure& blocks, double lambda, int num_clusters,
                          const CMatrix& W0, const DynamicOptions& opts)
{
    if (!(lambda >= 0.0) || opts.epsilon < 0.0 || opts.max_iterations < 1) {
        throw InvalidInput("invalid dynamic clustering parameters");
    }
    const sparse_mcp::GroupLassoProblem problem(H, blocks);

    auto cluster_of = [&](const CMatrix& W, DynamicResult& res) {
        SpectralResult sc = spectral_cluster(sparse_mcp::backhaul_matrix(W, blocks).values, num_clusters, opts.kmeans);
        res.degenerate_clustering = res.degenerate_clustering || sc.has_empty;
        return compact(sc.clustering);
    };
    auto w_step = [&](const Clustering& clusters, const CMatrix& warm) -> CMatrix {
        if (std::isinf(lambda) || clusters.num_clusters() == 1) {
            return cluster_lmmse(H, blocks, clusters);
        }
        return problem.solve(sparse_mcp::PenaltySpec::ratio_cut(clusters), lambda, opts.solver, &warm).equalizer.W;
    };

    DynamicResult res;
    CMatrix W = W0;
    Clustering clusters = cluster_of(W, res);
    double j_prev = joint_objective(W, H, blocks, clusters, lambda);
    res.objective_trace.push_back(j_prev);
    res.clustering = clusters;

    for (int it = 0; it < opts.max_iterations; ++it) {
        const Clustering candidate = it == 0 ? clusters : cluster_of(W, res);
        CMatrix W_next = w_step(candidate, W);
        const double j_next = joint_objective(W_next, H, blocks, candidate, lambda);
        if (j_next > j_prev) {
            res.rejected_increase = true;
            break;
        }
        W = std::move(W_next);
        res.clustering = candidate;
        res.objective_trace.push_back(j_next);
        ++res.accepted_iterations;
        const bool done = j_prev - j_next < opts.epsilon;
        j_prev = j_next;
        if (done) {
            break;
        }
    }
    res.equalizer = {std::move(W), blocks};
    return res;
}

// ---------------------------------------------------------------------------
// Greedy baseline
// ---------------------------------------------------------------------------

namespace {

/// Sum rate of the users of `bss` under LMMSE restricted to the antennas of `bss`.
double cluster_sum_rate(const CMatrix& H, const BlockStructure& blocks, const std::vector<int>& bss)
{
    const int a_per = blocks.antennas_per_bs;
    std::vector<int> users;
    for (int b : bss) {
        const auto& ub = blocks.users_of_bs[static_cast<std::size_t>(b)];
        users.insert(users.end(), ub.begin(), ub.end());
    }
    if (users.empty()) {
        return 0.0;
    }
    const auto n = static_cast<Eigen::Index>(bss.size()) * a_per;
    CMatrix Hs(n, H.cols());
    for (std::size_t i = 0; i < bss.size(); ++i) {
        Hs.middleRows(static_cast<Eigen::Index>(i) * a_per, a_per) = H.middleRows(bss[i] * a_per, a_per);
    }
    CMatrix gram = Hs * Hs.adjoint();
    gram.diagonal().array() += 1.0;
    CMatrix rhs(n, static_cast<Eigen::Index>(users.size()));
    for (std::size_t j = 0; j < users.size(); ++j) {
        rhs.col(static_cast<Eigen::Index>(j)) = Hs.col(users[j]);
    }
    const CMatrix X = gram.llt().solve(rhs).adjoint(); // rows = receivers over the cluster antennas
    const CMatrix WH = X * Hs;
    double total = 0.0;
    for (std::size_t j = 0; j < users.size(); ++j) {
        const auto r = static_cast<Eigen::Index>(j);
        const double signal = std::norm(WH(r, users[j]));
        const double denom = WH.row(r).squaredNorm() - signal + X.row(r).squaredNorm();
        if (denom > 0.0) {
            total += std::log2(1.0 + signal / denom);
        }
    }
    return total;
}

} // namespace

CMatrix cluster_lmmse(const CMatrix& H, const BlockStructure& blocks, const Clustering& clustering)
{
    if (clustering.num_bs() != blocks.num_bs) {
        throw InvalidInput("clustering does not match the number of BSs");
    }
    const auto members = clustering.members();
    std::vector<std::vector<int>> support(static_cast<std::size_t>(blocks.num_bs));
    for (int b = 0; b < blocks.num_bs; ++b) {
        support[static_cast<std::size_t>(b)] = members[static_cast<std::size_t>(clustering.label(b))];
    }
    return equalize::restricted_lmmse(H, blocks, support);
}

GreedyResult greedy_cluster(const CMatrix& H, const BlockStructure& blocks, int cluster_size)
{
    const int nb = blocks.num_bs;
    if (cluster_size < 1) {
        throw InvalidInput("cluster size must be positive");
    }
    std::vector<double> solo(static_cast<std::size_t>(nb));
    for (int b = 0; b < nb; ++b) {
        solo[static_cast<std::size_t>(b)] = cluster_sum_rate(H, blocks, {b});
    }
    std::vector<int> labels(static_cast<std::size_t>(nb), -1);
    int num_clusters = 0;
    for (int seed = 0; seed < nb; ++seed) {
        if (labels[static_cast<std::size_t>(seed)] >= 0) {
            continue;
        }
        const int c = num_clusters++;
        std::vector<int> members{seed};
        labels[static_cast<std::size_t>(seed)] = c;
        double current = solo[static_cast<std::size_t>(seed)];
        while (static_cast<int>(members.size()) < cluster_size) {
            int best = -1;
            double best_gain = -std::numeric_limits<double>::infinity();
            double best_rate = 0.0;
            for (int b = 0; b < nb; ++b) {
                if (labels[static_cast<std::size_t>(b)] >= 0) {
                    continue;
                }
                std::vector<int> trial = members;
                trial.push_back(b);
                std::sort(trial.begin(), trial.end());
                const double rate = cluster_sum_rate(H, blocks, trial);
                const double gain = rate - current - solo[static_cast<std::size_t>(b)];
                if (gain > best_gain) {
                    best_gain = gain;
                    best = b;
                    best_rate = rate;
                }
            }
            if (best < 0) {
                break;
            }
            members.push_back(best);
            std::sort(members.begin(), members.end());
            labels[static_cast<std::size_t>(best)] = c;
            current = best_rate;
        }
    }
    GreedyResult res;
    res.clustering = Clustering(std::move(labels), num_clusters);
    res.equalizer = {cluster_lmmse(H, blocks, res.clustering), blocks};
    return res;
}

IntraTrafficMode parse_intra_traffic_mode(const std::string& name)
{
    if (name == "distributed") {
        return IntraTrafficMode::distributed;
    }
    if (name == "head") {
        return IntraTrafficMode::head;
    }
    throw InvalidInput("unknown intra-cluster traffic mode '" + name + "'");
}

int intra_cluster_traffic(const Clustering& clustering, IntraTrafficMode mode)
{
    int total = 0;
    for (int s : clustering.sizes()) {
        if (s > 0) {
            total += mode == IntraTrafficMode::distributed ? s * (s - 1) : s - 1;
        }
    }
    return total;
}

void write_clustering_csv(std::ostream& out, const Clustering& clustering)
{
    out << "bs,cluster\n";
    for (int b = 0; b < clustering.num_bs(); ++b) {
        out << b << ',' << clustering.label(b) << '\n';
    }
}

void write_cluster_map_csv(std::ostream& out, const Clustering& clustering, const netmodel::NetworkGeometry& geometry)
{
    if (geometry.num_bs() != clustering.num_bs()) {
        throw InvalidInput("geometry does not match the clustering");
    }
    std::vector<int> head(static_cast<std::size_t>(clustering.num_clusters()), -1);
    for (int b = 0; b < clustering.num_bs(); ++b) {
        int& h = head[static_cast<std::size_t>(clustering.label(b))];
        if (h < 0) {
            h = b;
        }
    }
    out << "bs,x_m,y_m,cluster,role\n" << std::setprecision(10);
    for (int b = 0; b < clustering.num_bs(); ++b) {
        const auto& p = geometry.bs_positions[static_cast<std::size_t>(b)];
        out << b << ',' << p.x << ',' << p.y << ',' << clustering.label(b) << ','
            << (head[static_cast<std::size_t>(clustering.label(b))] == b ? "head" : "member") << '\n';
    }
}

} // namespace coophaul::dynclust
