#pragma once

// Synchronous message-passing simulation of the decentralized algorithms:
// consensus summation, consensus ADMM for the static clustered design,
// decentralized orthogonal iteration, consensus k-means and the decentralized
// dynamic clustering loop.

#include "coophaul/core.hpp"
#include "coophaul/dynclust.hpp"
#include "coophaul/netmodel.hpp"
#include "coophaul/sparse_mcp.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace coophaul::decentral {

// ---------------------------------------------------------------------------
// Communication graph and network
// ---------------------------------------------------------------------------

class CommGraph {
public:
    CommGraph() = default;
    /// Undirected edges; each stored once as (lo, hi), sorted.
    CommGraph(int num_nodes, std::vector<std::pair<int, int>> edges);

    int num_nodes() const { return num_nodes_; }
    const std::vector<std::pair<int, int>>& edges() const { return edges_; }
    const std::vector<int>& neighbors(int b) const { return neighbors_[static_cast<std::size_t>(b)]; }
    int degree(int b) const { return static_cast<int>(neighbors(b).size()); }
    bool has_edge(int a, int b) const;
    /// Index into edges() of {a, b}; -1 if absent.
    int edge_index(int a, int b) const;
    bool connected() const;
    /// Connected with at least two agents.
    bool valid_for_agents() const { return num_nodes_ >= 2 && connected(); }

private:
    int num_nodes_ = 0;
    std::vector<std::pair<int, int>> edges_;
    std::vector<std::vector<int>> neighbors_;
};

enum class CommRule { nearest_neighbor, k_nearest };

struct CommRuleSpec {
    CommRule rule = CommRule::nearest_neighbor;
    int k = 6; // for k_nearest
};

CommRuleSpec parse_comm_rule(const std::string& text); // "nearest" or "knn:<k>"

/// nearest_neighbor joins sites at the minimal inter-site distance; k_nearest
/// joins each site to its k closest and then adds the shortest edges between
/// components until connected.
CommGraph build_comm_graph(const netmodel::NetworkGeometry& geometry, const CommRuleSpec& rule = {});

enum class ConsensusMode { exact, gossip };

struct ConsensusOptions {
    ConsensusMode mode = ConsensusMode::exact;
    double tolerance = 1e-9; // gossip: stop once every copy is this close (relative) to the average
    int max_rounds = 200000;  // gossip round budget
};

ConsensusMode parse_consensus_mode(const std::string& text);

struct Message {
    int from = 0;
    RVector payload;
};

/// Lock-step rounds with reliable delivery. Messages may only travel along
/// graph edges; anything sent in a round is readable after end_round().
class Network {
public:
    explicit Network(CommGraph graph);

    const CommGraph& graph() const { return graph_; }

    /// Throws ConfigurationError unless {from, to} is an edge. `entries`
    /// is the payload size charged to the log (defaults to payload length).
    void send(int from, int to, RVector payload, long entries = -1);
    void end_round();
    const std::vector<Message>& inbox(int node) const { return inbox_[static_cast<std::size_t>(node)]; }
    /// Payload of the message from `from` in this round's inbox of `node`.
    const RVector& received(int node, int from) const;

    /// Shortest path (lowest-index neighbors first) from one node to another, both ends included.
    std::vector<int> route(int from, int to) const;

    struct Transfer {
        int from = 0;
        int to = 0;
        RVector payload;
    };

    /// Delivers payloads between arbitrary nodes by multi-hop forwarding along
    /// route(); transfers advance one hop per round in parallel. Returns the
    /// payloads as received, in input order.
    std::vector<RVector> deliver(const std::vector<Transfer>& transfers);

    /// Every agent gets the sum of all contributions.
    std::vector<RVector> consensus_sum(const std::vector<RVector>& local, const ConsensusOptions& opts = {});

    long rounds() const { return rounds_; }
    long messages() const { return messages_; }
    long payload_entries() const { return payload_entries_; }

private:
    std::vector<RVector> exact_sum(const std::vector<RVector>& local);
    std::vector<RVector> gossip_sum(const std::vector<RVector>& local, const ConsensusOptions& opts);

    CommGraph graph_;
    std::vector<std::vector<Message>> outbox_;
    std::vector<std::vector<Message>> inbox_;
    std::vector<int> parent_; // spanning tree for exact sums
    std::vector<std::vector<int>> children_;
    std::vector<int> depth_;
    int tree_depth_ = 0;
    mutable std::vector<std::vector<int>> bfs_parent_; // per source, filled lazily
    long rounds_ = 0;
    long messages_ = 0;
    long payload_entries_ = 0;
};

/// Convenience wrapper on a fresh network.
std::vector<RVector> consensus_sum(const std::vector<RVector>& local, const CommGraph& graph,
                                   const ConsensusOptions& opts = {});

// ---------------------------------------------------------------------------
// Consensus ADMM for the clustered designs
// ---------------------------------------------------------------------------

struct RoundLog {
    int round = 0;
    double objective_gap = 0.0; // relative to max(1, |centralized objective|)
    double max_disagreement = 0.0;
    double dist_to_centralized = 0.0; // max_b ||W_b - W*|| / ||W*||
    long messages = 0;
    long payload_entries = 0;
    std::vector<double> agent_objective;
};

struct AdmmOptions {
    double rho = 0.1;
    int rounds = 2000;
    /// > 0: stop early once the consensus residual (checked every 10 rounds) falls below this.
    double tolerance = 0.0;
    bool keep_agent_objectives = false;
};

struct CentralizedReference {
    CMatrix W;
    double objective = 0.0;
};

struct AgentState {
    CMatrix W;
    CMatrix V;
    CMatrix U;
    std::vector<CMatrix> edge_V; // one per incident edge, in neighbor order
};

struct AdmmResult {
    std::vector<AgentState> agents;
    std::vector<RoundLog> log;
    int rounds = 0;
};

/// Each BS b holds the channel columns of its own users and solves
/// sum_b [ sum_{u in U_b} ||e_u - W h_u||^2 + (1/N_B) ||W||^2 + (lambda/N_B) sum_g c_g ||W_g|| ]
/// with local copies W_b, auxiliaries U_b and edge consensus constraints.
AdmmResult admm_static(const CMatrix& H, const BlockStructure& blocks, const sparse_mcp::PenaltySpec& penalty,
                       double lambda, const CommGraph& graph, const AdmmOptions& opts = {},
                       const std::optional<CentralizedReference>& reference = std::nullopt,
                       Network* network = nullptr, const std::vector<AgentState>* warm_start = nullptr);

/// Sum over agents of the local objective evaluated at each agent's own copy.
double decentralized_objective(const std::vector<AgentState>& agents, const CMatrix& H, const BlockStructure& blocks,
                               const sparse_mcp::PenaltySpec& penalty, double lambda);

void write_rounds_csv(std::ostream& out, const std::vector<RoundLog>& log);

// ---------------------------------------------------------------------------
// Decentralized eigenvectors and clustering
// ---------------------------------------------------------------------------

struct OiOptions {
    int max_iterations = 20000;
    double tolerance = 1e-12; // on the change of the stacked iterate
    std::uint64_t seed = 1;
    int max_restarts = 5;
    ConsensusOptions consensus;
    /// Called after every iteration with the iterate and |lambda_i| estimates.
    std::function<void(int, const RMatrix&, const RVector&)> observer;
};

struct OiResult {
    RMatrix Q;                 // row b is agent b's q_b
    RVector magnitudes;        // |lambda_i| = sqrt(K_ii)
    std::vector<double> lambda1_trace; // agent view of |lambda_1| per iteration
    int iterations = 0;
    int restarts = 0;
};

/// Row b of the initial iterate, drawn by agent b from the shared seed.
RVector initial_row(std::uint64_t seed, int b, int width);

/// Orthogonal iteration with the same arithmetic as the decentralized version
/// running over exact consensus.
OiResult orthogonal_iteration(const RMatrix& A, int count, const OiOptions& opts = {});

/// Each agent owns row b of A and may need q_b' for a_bb' != 0; such rows
/// are forwarded along shortest paths when b' is not a neighbor.
OiResult decentralized_oi(const RMatrix& A, int count, Network& network, const OiOptions& opts = {});

struct SmallestEigResult {
    RMatrix Q;
    double lambda1 = 0.0; // |lambda_1| of Lsym from phase one
    OiResult phase1;
    OiResult phase2;
};

/// Phase one finds |lambda_1| of Lsym; phase two runs on (|lambda_1| + shift) I - Lsym.
SmallestEigResult smallest_eigvecs_decentralized(const RMatrix& Lsym, int count, Network& network, double shift = 0.1,
                                                 const OiOptions& opts = {});

/// Consensus Lloyd: only centroid sums, counts and scalar statistics cross the network.
dynclust::KMeansResult decentralized_kmeans(const RMatrix& rows, int k, Network& network,
                                            const dynclust::KMeansOptions& opts = {},
                                            const ConsensusOptions& consensus = {});

struct DecentralDynamicOptions {
    double epsilon = 1e-6;
    int max_iterations = 10;
    double shift = 0.1;
    AdmmOptions admm;
    OiOptions oi;
    dynclust::KMeansOptions kmeans;
};

struct DecentralDynamicResult {
    Clustering clustering;
    std::vector<AgentState> agents;
    std::vector<double> objective_trace;
    std::vector<std::vector<RoundLog>> admm_logs;
    int accepted_iterations = 0;
    bool rejected_increase = false;
};

/// The alternating design with every step decentralized: W~ rows from local
/// copies, two-phase eigenvectors, consensus k-means and ADMM with ratio-cut
/// weights. The first W comes from consensus ADMM with lambda = 0.
DecentralDynamicResult dynamic_decentralized(const CMatrix& H, const BlockStructure& blocks, double lambda,
                                             int num_clusters, Network& network,
                                             const DecentralDynamicOptions& opts = {});

} // namespace coophaul::decentral
