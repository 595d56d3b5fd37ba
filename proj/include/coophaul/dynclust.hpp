#pragma once

// Graph cuts on the backhaul affinity W~, spectral clustering, k-means, the
// alternating equalizer/cluster design and the greedy clustering baseline.

#include "coophaul/core.hpp"
#include "coophaul/netmodel.hpp"
#include "coophaul/sparse_mcp.hpp"

#include <functional>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

namespace coophaul::dynclust {

using equalize::Equalizer;

/// Sum of W~ entries whose endpoints lie in different clusters.
double cut(const RMatrix& affinity, const Clustering& clustering);

/// sum_c s(B_c, complement) / |B_c|. Throws InvalidInput on an empty cluster.
double rcut(const RMatrix& affinity, const Clustering& clustering);

struct LaplacianPair {
    RMatrix D;   // out-degrees on the diagonal
    RMatrix L;   // D - W~
    RMatrix Lsym; // (L + L^T) / 2
};

LaplacianPair laplacians(const RMatrix& affinity);

/// phi_bc = 1/sqrt(|B_c|) if b in B_c; zero columns for empty clusters.
RMatrix indicator(const Clustering& clustering);

struct SpectralEmbedding {
    RMatrix phi;         // N_B x N_C, orthonormal columns
    RVector eigenvalues; // ascending
};

/// Eigenvectors of a symmetric matrix for its smallest eigenvalues. Each
/// column's largest-magnitude coordinate is made positive.
SpectralEmbedding smallest_eigenvectors(const RMatrix& symmetric, int count);

/// Makes the largest-magnitude entry of every column positive (first index wins ties).
void fix_signs(RMatrix& columns);

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

struct KMeansOptions {
    int restarts = 20;
    int max_iterations = 300;
    std::uint64_t seed = 1;
};

struct KMeansResult {
    Clustering clustering;
    RMatrix centroids;   // k x dim
    double inertia = 0.0; // within-cluster sum of squares
    bool has_empty = false;
    int iterations = 0;  // Lloyd iterations of the winning restart
    std::vector<double> inertia_trace; // per Lloyd iteration, winning restart
};

/// Sums one contribution per point into a total. The centralized version
/// adds them in index order; a decentralized one runs a consensus protocol.
using Reducer = std::function<RVector(const std::vector<RVector>&)>;

RVector sequential_sum(const std::vector<RVector>& contributions);

/// k-means++ seeding then Lloyd, best of `restarts` by inertia. Each point
/// only ever touches its own row; all coupling goes through `reduce`, so
/// running it with an exact consensus reducer reproduces the centralized
/// result bit for bit.
KMeansResult kmeans(const RMatrix& points, int k, const KMeansOptions& opts = {},
                    const Reducer& reduce = sequential_sum);

/// k-means++ initial centroids for one restart.
RMatrix kmeanspp_seed(const RMatrix& points, int k, Rng& rng, const Reducer& reduce = sequential_sum);

/// Lloyd iterations from given centroids. Empty clusters are reseeded with the
/// point farthest from its centroid (lowest index on ties).
KMeansResult lloyd(const RMatrix& points, RMatrix centroids, int max_iterations,
                   const Reducer& reduce = sequential_sum);

// ---------------------------------------------------------------------------
// Spectral clustering and the alternating design
// ---------------------------------------------------------------------------

struct SpectralResult {
    Clustering clustering;
    SpectralEmbedding embedding;
    bool has_empty = false;
};

SpectralResult spectral_cluster(const RMatrix& affinity, int num_clusters, const KMeansOptions& opts = {});

struct DynamicOptions {
    double epsilon = 1e-6;
    int max_iterations = 20;
    KMeansOptions kmeans;
    sparse_mcp::SolverOptions solver;
};

struct DynamicResult {
    Clustering clustering;
    Equalizer equalizer;
    std::vector<double> objective_trace; // J before the first step, then after each accepted step
    int accepted_iterations = 0;
    bool rejected_increase = false;
    bool degenerate_clustering = false; // k-means left a cluster empty at some point
};

/// f(W) + lambda * rcut(W~(W), clusters); lambda = inf counts as zero penalty
/// when no inter-cluster entry is used.
double joint_objective(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks, const Clustering& clustering,
                       double lambda);

/// Alternates spectral clustering of W~ and the ratio-cut weighted group
/// lasso until the joint objective decreases by less than epsilon. A step
/// that increases the objective is rejected and ends the loop. lambda may be
/// +inf, meaning no inter-cluster cooperation.
DynamicResult dynamic_mcp(const CMatrix& H, const BlockStructure& blocks, double lambda, int num_clusters,
                          const CMatrix& W0, const DynamicOptions& opts = {});

/// Reference lambda for dynamic runs: lambda_max of the ratio-cut penalty at
/// the clusters the first alternation would pick from W0.
double dynamic_lambda_reference(const CMatrix& H, const BlockStructure& blocks, int num_clusters, const CMatrix& W0,
                                const KMeansOptions& opts = {});

// ---------------------------------------------------------------------------
// Greedy baseline and traffic accounting
// ---------------------------------------------------------------------------

struct GreedyResult {
    Clustering clustering;
    Equalizer equalizer;
};

/// Clusters grown one at a time from the lowest-index free BS, each step
/// adding the BS with the largest network sum-rate gain; full LMMSE inside
/// clusters, nothing across.
GreedyResult greedy_cluster(const CMatrix& H, const BlockStructure& blocks, int cluster_size);

/// Restricted LMMSE with each BS cooperating with exactly its own cluster.
CMatrix cluster_lmmse(const CMatrix& H, const BlockStructure& blocks, const Clustering& clustering);

enum class IntraTrafficMode { distributed, head };

IntraTrafficMode parse_intra_traffic_mode(const std::string& name);

int intra_cluster_traffic(const Clustering& clustering, IntraTrafficMode mode);

/// CSV with columns bs, cluster.
void write_clustering_csv(std::ostream& out, const Clustering& clustering);

/// CSV with columns bs, x_m, y_m, cluster, role (head = lowest index in its cluster).
void write_cluster_map_csv(std::ostream& out, const Clustering& clustering, const netmodel::NetworkGeometry& geometry);

} // namespace coophaul::dynclust
