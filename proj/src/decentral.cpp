#include "coophaul/decentral.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

namespace coophaul::decentral {

namespace {

std::size_t idx(int i) { return static_cast<std::size_t>(i); }

RVector pack(const CMatrix& M)
{
    RVector out(2 * M.size());
    for (Eigen::Index i = 0; i < M.size(); ++i) {
        out(2 * i) = M.data()[i].real();
        out(2 * i + 1) = M.data()[i].imag();
    }
    return out;
}

CMatrix unpack(const RVector& v, Eigen::Index rows, Eigen::Index cols)
{
    if (v.size() != 2 * rows * cols) {
        throw InvalidInput("payload size does not match the expected matrix");
    }
    CMatrix M(rows, cols);
    for (Eigen::Index i = 0; i < M.size(); ++i) {
        M.data()[i] = Complex(v(2 * i), v(2 * i + 1));
    }
    return M;
}

RVector flatten(const RMatrix& M) { return Eigen::Map<const RVector>(M.data(), M.size()); }

} // namespace

// ---------------------------------------------------------------------------
// CommGraph
// ---------------------------------------------------------------------------

CommGraph::CommGraph(int num_nodes, std::vector<std::pair<int, int>> edges) : num_nodes_(num_nodes)
{
    if (num_nodes < 0) {
        throw InvalidInput("negative node count");
    }
    for (auto& [a, b] : edges) {
        if (a < 0 || b < 0 || a >= num_nodes || b >= num_nodes || a == b) {
            throw InvalidInput("communication edge out of range");
        }
        if (a > b) {
            std::swap(a, b);
        }
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    edges_ = std::move(edges);
    neighbors_.assign(idx(num_nodes), {});
    for (const auto& [a, b] : edges_) {
        neighbors_[idx(a)].push_back(b);
        neighbors_[idx(b)].push_back(a);
    }
    for (auto& n : neighbors_) {
        std::sort(n.begin(), n.end());
    }
}

bool CommGraph::has_edge(int a, int b) const { return edge_index(a, b) >= 0; }

int CommGraph::edge_index(int a, int b) const
{
    if (a > b) {
        std::swap(a, b);
    }
    const auto it = std::lower_bound(edges_.begin(), edges_.end(), std::make_pair(a, b));
    if (it == edges_.end() || *it != std::make_pair(a, b)) {
        return -1;
    }
    return static_cast<int>(it - edges_.begin());
}

bool CommGraph::connected() const
{
    if (num_nodes_ == 0) {
        return false;
    }
    std::vector<bool> seen(idx(num_nodes_), false);
    std::vector<int> stack{0};
    seen[0] = true;
    int count = 1;
    while (!stack.empty()) {
        const int v = stack.back();
        stack.pop_back();
        for (int w : neighbors(v)) {
            if (!seen[idx(w)]) {
                seen[idx(w)] = true;
                ++count;
                stack.push_back(w);
            }
        }
    }
    return count == num_nodes_;
}

CommRuleSpec parse_comm_rule(const std::string& text)
{
    if (text == "nearest" || text == "nearest_neighbor") {
        return {};
    }
    if (text.rfind("knn:", 0) == 0) {
        CommRuleSpec spec;
        spec.rule = CommRule::k_nearest;
        try {
            spec.k = std::stoi(text.substr(4));
        } catch (const std::exception&) {
            throw ConfigurationError("bad communication rule: " + text);
        }
        if (spec.k < 1) {
            throw ConfigurationError("knn rule needs k >= 1");
        }
        return spec;
    }
    throw ConfigurationError("unknown communication rule: " + text);
}

CommGraph build_comm_graph(const netmodel::NetworkGeometry& geometry, const CommRuleSpec& rule)
{
    const int n = geometry.num_bs();
    if (n == 0) {
        throw ConfigurationError("network has no base stations");
    }
    auto dist = [&](int a, int b) {
        return netmodel::distance(geometry.bs_positions[idx(a)], geometry.bs_positions[idx(b)]);
    };
    std::vector<std::pair<int, int>> edges;
    if (rule.rule == CommRule::nearest_neighbor) {
        double dmin = std::numeric_limits<double>::infinity();
        for (int a = 0; a < n; ++a) {
            for (int b = a + 1; b < n; ++b) {
                dmin = std::min(dmin, dist(a, b));
            }
        }
        for (int a = 0; a < n; ++a) {
            for (int b = a + 1; b < n; ++b) {
                if (dist(a, b) <= dmin * (1.0 + 1e-6)) {
                    edges.emplace_back(a, b);
                }
            }
        }
        CommGraph g(n, std::move(edges));
        if (n > 1 && !g.connected()) {
            throw ConfigurationError("nearest-neighbor communication graph is disconnected");
        }
        return g;
    }

    for (int a = 0; a < n; ++a) {
        std::vector<int> others;
        for (int b = 0; b < n; ++b) {
            if (b != a) {
                others.push_back(b);
            }
        }
        std::stable_sort(others.begin(), others.end(), [&](int x, int y) { return dist(a, x) < dist(a, y); });
        for (int i = 0; i < std::min<int>(rule.k, static_cast<int>(others.size())); ++i) {
            edges.emplace_back(a, others[idx(i)]);
        }
    }
    CommGraph g(n, edges);
    // Repair: join the closest pair of sites lying in different components.
    for (int budget = n; budget > 0 && !g.connected(); --budget) {
        std::vector<int> comp(idx(n), -1);
        for (int s = 0, c = 0; s < n; ++s) {
            if (comp[idx(s)] >= 0) {
                continue;
            }
            std::vector<int> stack{s};
            comp[idx(s)] = c;
            while (!stack.empty()) {
                const int v = stack.back();
                stack.pop_back();
                for (int w : g.neighbors(v)) {
                    if (comp[idx(w)] < 0) {
                        comp[idx(w)] = c;
                        stack.push_back(w);
                    }
                }
            }
            ++c;
        }
        double best = std::numeric_limits<double>::infinity();
        std::pair<int, int> add{-1, -1};
        for (int a = 0; a < n; ++a) {
            for (int b = a + 1; b < n; ++b) {
                if (comp[idx(a)] != comp[idx(b)] && dist(a, b) < best) {
                    best = dist(a, b);
                    add = {a, b};
                }
            }
        }
        edges.push_back(add);
        g = CommGraph(n, edges);
    }
    if (!g.connected()) {
        throw ConfigurationError("communication graph stays disconnected after repair");
    }
    return g;
}

ConsensusMode parse_consensus_mode(const std::string& text)
{
    if (text == "exact") {
        return ConsensusMode::exact;
    }
    if (text == "gossip") {
        return ConsensusMode::gossip;
    }
    throw ConfigurationError("unknown consensus mode: " + text);
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

Network::Network(CommGraph graph) : graph_(std::move(graph))
{
    const int n = graph_.num_nodes();
    outbox_.assign(idx(n), {});
    inbox_.assign(idx(n), {});
    bfs_parent_.assign(idx(n), {});
    parent_.assign(idx(n), -1);
    children_.assign(idx(n), {});
    depth_.assign(idx(n), -1);
    if (n == 0 || !graph_.connected()) {
        return;
    }
    // BFS tree rooted at 0, neighbors in ascending order.
    std::deque<int> queue{0};
    depth_[0] = 0;
    while (!queue.empty()) {
        const int v = queue.front();
        queue.pop_front();
        for (int w : graph_.neighbors(v)) {
            if (depth_[idx(w)] < 0) {
                depth_[idx(w)] = depth_[idx(v)] + 1;
                parent_[idx(w)] = v;
                children_[idx(v)].push_back(w);
                tree_depth_ = std::max(tree_depth_, depth_[idx(w)]);
                queue.push_back(w);
            }
        }
    }
}

void Network::send(int from, int to, RVector payload, long entries)
{
    if (!graph_.has_edge(from, to)) {
        std::ostringstream msg;
        msg << "node " << from << " cannot reach " << to << " directly";
        throw ConfigurationError(msg.str());
    }
    ++messages_;
    payload_entries_ += entries >= 0 ? entries : static_cast<long>(payload.size());
    outbox_[idx(to)].push_back({from, std::move(payload)});
}

void Network::end_round()
{
    for (std::size_t v = 0; v < outbox_.size(); ++v) {
        inbox_[v] = std::move(outbox_[v]);
        outbox_[v].clear();
    }
    ++rounds_;
}

const RVector& Network::received(int node, int from) const
{
    for (const Message& m : inbox(node)) {
        if (m.from == from) {
            return m.payload;
        }
    }
    std::ostringstream msg;
    msg << "node " << node << " has no message from " << from;
    throw ConsensusError(msg.str());
}

std::vector<int> Network::route(int from, int to) const
{
    const int n = graph_.num_nodes();
    if (from < 0 || to < 0 || from >= n || to >= n) {
        throw InvalidInput("route endpoint out of range");
    }
    std::vector<int>& par = bfs_parent_[idx(from)];
    if (par.empty()) {
        par.assign(idx(n), -1);
        par[idx(from)] = from;
        std::deque<int> queue{from};
        while (!queue.empty()) {
            const int v = queue.front();
            queue.pop_front();
            for (int w : graph_.neighbors(v)) {
                if (par[idx(w)] < 0) {
                    par[idx(w)] = v;
                    queue.push_back(w);
                }
            }
        }
    }
    if (par[idx(to)] < 0) {
        throw ConfigurationError("no route between nodes");
    }
    std::vector<int> path{to};
    while (path.back() != from) {
        path.push_back(par[idx(path.back())]);
    }
    std::reverse(path.begin(), path.end());
    return path;
}

std::vector<RVector> Network::deliver(const std::vector<Transfer>& transfers)
{
    std::vector<std::vector<int>> paths;
    std::size_t longest = 0;
    for (const Transfer& t : transfers) {
        paths.push_back(route(t.from, t.to));
        longest = std::max(longest, paths.back().size());
    }
    std::vector<RVector> carried;
    for (const Transfer& t : transfers) {
        carried.push_back(t.payload);
    }
    for (std::size_t hop = 1; hop < longest; ++hop) {
        std::vector<std::size_t> moving;
        for (std::size_t i = 0; i < transfers.size(); ++i) {
            if (hop < paths[i].size()) {
                send(paths[i][hop - 1], paths[i][hop], carried[i]);
                moving.push_back(i);
            }
        }
        end_round();
        // Each relay picks its copy out of the inbox, matched in send order.
        std::vector<std::size_t> cursor(inbox_.size(), 0);
        for (std::size_t i : moving) {
            const int at = paths[i][hop];
            carried[i] = inbox_[idx(at)][cursor[idx(at)]++].payload;
        }
    }
    return carried;
}

std::vector<RVector> Network::exact_sum(const std::vector<RVector>& local)
{
    const int n = graph_.num_nodes();
    // Gather: every node passes packets (origin prepended) up the tree.
    std::vector<std::vector<std::pair<int, RVector>>> held(idx(n));
    for (int v = 0; v < n; ++v) {
        held[idx(v)].emplace_back(v, local[idx(v)]);
    }
    for (int level = tree_depth_; level >= 1; --level) {
        for (int v = 0; v < n; ++v) {
            if (depth_[idx(v)] != level) {
                continue;
            }
            for (auto& [origin, value] : held[idx(v)]) {
                RVector payload(value.size() + 1);
                payload(0) = origin;
                payload.tail(value.size()) = value;
                send(v, parent_[idx(v)], std::move(payload), value.size());
            }
            held[idx(v)].clear();
        }
        end_round();
        for (int v = 0; v < n; ++v) {
            for (const Message& m : inbox_[idx(v)]) {
                const RVector& p = m.payload;
                held[idx(v)].emplace_back(static_cast<int>(p(0)), p.tail(p.size() - 1));
            }
        }
    }
    auto& at_root = held[0];
    std::sort(at_root.begin(), at_root.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    RVector total = at_root.front().second;
    for (std::size_t i = 1; i < at_root.size(); ++i) {
        total += at_root[i].second;
    }

    std::vector<RVector> copies(idx(n));
    copies[0] = total;
    for (int level = 0; level < tree_depth_; ++level) {
        for (int v = 0; v < n; ++v) {
            if (depth_[idx(v)] == level) {
                for (int c : children_[idx(v)]) {
                    send(v, c, copies[idx(v)]);
                }
            }
        }
        end_round();
        for (int v = 0; v < n; ++v) {
            if (depth_[idx(v)] == level + 1) {
                copies[idx(v)] = received(v, parent_[idx(v)]);
            }
        }
    }
    return copies;
}

std::vector<RVector> Network::gossip_sum(const std::vector<RVector>& local, const ConsensusOptions& opts)
{
    const int n = graph_.num_nodes();
    RVector average = local.front();
    for (int v = 1; v < n; ++v) {
        average += local[idx(v)];
    }
    average /= static_cast<double>(n);
    const double scale = std::max(1.0, average.cwiseAbs().maxCoeff());

    // Metropolis weights; the simulator watches the spread to decide when to stop.
    std::vector<RVector> x = local;
    auto spread = [&] {
        double worst = 0.0;
        for (const RVector& xi : x) {
            worst = std::max(worst, (xi - average).cwiseAbs().maxCoeff());
        }
        return worst;
    };
    int round = 0;
    while (spread() > opts.tolerance * scale) {
        if (round++ >= opts.max_rounds) {
            throw ConsensusError("gossip did not reach the tolerance within the round budget");
        }
        for (int v = 0; v < n; ++v) {
            for (int w : graph_.neighbors(v)) {
                send(v, w, x[idx(v)]);
            }
        }
        end_round();
        std::vector<RVector> next = x;
        for (int v = 0; v < n; ++v) {
            for (int w : graph_.neighbors(v)) {
                const double weight = 1.0 / (1.0 + std::max(graph_.degree(v), graph_.degree(w)));
                next[idx(v)] += weight * (received(v, w) - x[idx(v)]);
            }
        }
        x = std::move(next);
    }
    for (RVector& xi : x) {
        xi *= static_cast<double>(n);
    }
    return x;
}

std::vector<RVector> Network::consensus_sum(const std::vector<RVector>& local, const ConsensusOptions& opts)
{
    const int n = graph_.num_nodes();
    if (static_cast<int>(local.size()) != n || n == 0) {
        throw InvalidInput("one contribution per node is required");
    }
    for (const RVector& v : local) {
        if (v.size() != local.front().size()) {
            throw InvalidInput("consensus contributions differ in size");
        }
    }
    if (n > 1 && !graph_.connected()) {
        throw ConfigurationError("consensus needs a connected communication graph");
    }
    if (n == 1) {
        return local;
    }
    return opts.mode == ConsensusMode::exact ? exact_sum(local) : gossip_sum(local, opts);
}

std::vector<RVector> consensus_sum(const std::vector<RVector>& local, const CommGraph& graph,
                                   const ConsensusOptions& opts)
{
    Network net(graph);
    return net.consensus_sum(local, opts);
}

// ---------------------------------------------------------------------------
// ADMM
// ---------------------------------------------------------------------------

namespace {

struct AgentData {
    CMatrix Hb;        // N_A x |U_b|
    CMatrix Eb;        // N_U x |U_b| selector of own users
    CMatrix EbHbH;     // Eb Hb^H
    Eigen::LDLT<CMatrix> small; // alpha I + Hb^H Hb
};

// Per-agent local objective at its own copy.
double agent_objective(const CMatrix& W, const AgentData& d, const RMatrix& coeff, const BlockStructure& blocks,
                       double lambda_local, int num_bs)
{
    const double smooth = (d.Eb - W * d.Hb).squaredNorm() + W.squaredNorm() / num_bs;
    if (lambda_local == 0.0) {
        return smooth;
    }
    const RMatrix wt = sparse_mcp::backhaul_matrix(W, blocks).values;
    return smooth + lambda_local * (coeff.array() * wt.array()).sum();
}

void group_shrink(CMatrix& M, const BlockStructure& blocks, const RMatrix& coeff, double scale)
{
    const int A = blocks.antennas_per_bs;
    for (int src = 0; src < blocks.num_bs; ++src) {
        for (int dst = 0; dst < blocks.num_bs; ++dst) {
            const double c = coeff(src, dst);
            if (src == dst || c <= 0.0) {
                continue;
            }
            const double t = scale * c;
            const int a0 = blocks.first_antenna(dst);
            double norm2 = 0.0;
            for (int u : blocks.users_of_bs[idx(src)]) {
                norm2 += M.row(u).segment(a0, A).squaredNorm();
            }
            const double norm = std::sqrt(norm2);
            const double factor = norm > t ? 1.0 - t / norm : 0.0;
            for (int u : blocks.users_of_bs[idx(src)]) {
                M.row(u).segment(a0, A) *= factor;
            }
        }
    }
}

} // namespace

double decentralized_objective(const std::vector<AgentState>& agents, const CMatrix& H, const BlockStructure& blocks,
                               const sparse_mcp::PenaltySpec& penalty, double lambda)
{
    const int nb = blocks.num_bs;
    double total = 0.0;
    for (int b = 0; b < nb; ++b) {
        const auto& users = blocks.users_of_bs[idx(b)];
        AgentData d;
        d.Hb.resize(H.rows(), static_cast<Eigen::Index>(users.size()));
        d.Eb = CMatrix::Zero(blocks.num_users(), static_cast<Eigen::Index>(users.size()));
        for (std::size_t j = 0; j < users.size(); ++j) {
            d.Hb.col(static_cast<Eigen::Index>(j)) = H.col(users[j]);
            d.Eb(users[j], static_cast<Eigen::Index>(j)) = 1.0;
        }
        total += agent_objective(agents[idx(b)].W, d, penalty.coefficients, blocks, lambda / nb, nb);
    }
    return total;
}

AdmmResult admm_static(const CMatrix& H, const BlockStructure& blocks, const sparse_mcp::PenaltySpec& penalty,
                       double lambda, const CommGraph& graph, const AdmmOptions& opts,
                       const std::optional<CentralizedReference>& reference, Network* network,
                       const std::vector<AgentState>* warm_start)
{
    blocks.validate();
    const int nb = blocks.num_bs;
    const Eigen::Index nu = blocks.num_users();
    const Eigen::Index na = blocks.num_antennas();
    if (H.rows() != na || H.cols() != nu) {
        throw InvalidInput("channel does not match the block structure");
    }
    if (graph.num_nodes() != nb) {
        throw ConfigurationError("communication graph size does not match the network");
    }
    if (!graph.valid_for_agents()) {
        throw ConfigurationError("decentralized runs need a connected graph with at least two agents");
    }
    if (!(opts.rho > 0.0) || opts.rounds < 0 || !(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw InvalidInput("invalid ADMM parameters");
    }
    if (penalty.num_bs() != nb) {
        throw InvalidInput("penalty does not match the network");
    }
    std::optional<Network> own;
    if (network == nullptr) {
        own.emplace(graph);
        network = &*own;
    }
    const double rho = opts.rho;
    const double alpha = 1.0 / nb + rho / 2.0;
    const RMatrix& coeff = penalty.coefficients;

    std::vector<AgentData> data(idx(nb));
    for (int b = 0; b < nb; ++b) {
        const auto& users = blocks.users_of_bs[idx(b)];
        const auto k = static_cast<Eigen::Index>(users.size());
        AgentData& d = data[idx(b)];
        d.Hb.resize(na, k);
        d.Eb = CMatrix::Zero(nu, k);
        for (Eigen::Index j = 0; j < k; ++j) {
            d.Hb.col(j) = H.col(users[idx(static_cast<int>(j))]);
            d.Eb(users[idx(static_cast<int>(j))], j) = 1.0;
        }
        d.EbHbH = d.Eb * d.Hb.adjoint();
        CMatrix small = d.Hb.adjoint() * d.Hb;
        small.diagonal().array() += alpha;
        d.small.compute(small);
    }

    AdmmResult res;
    if (warm_start != nullptr) {
        if (static_cast<int>(warm_start->size()) != nb) {
            throw InvalidInput("warm start has the wrong number of agents");
        }
        res.agents = *warm_start;
    } else {
        res.agents.resize(idx(nb));
        for (int b = 0; b < nb; ++b) {
            AgentState& s = res.agents[idx(b)];
            s.W = CMatrix::Zero(nu, na);
            s.V = s.W;
            s.U = s.W;
            s.edge_V.assign(graph.neighbors(b).size(), s.W);
        }
    }

    const long entries = static_cast<long>(nu * na);
    const double ref_norm = reference ? std::max(reference->W.norm(), 1e-300) : 1.0;
    const double ref_scale = reference ? std::max(1.0, std::abs(reference->objective)) : 1.0;

    for (int round = 1; round <= opts.rounds; ++round) {
        // (1) exchange the previous copies
        for (int b = 0; b < nb; ++b) {
            const RVector payload = pack(res.agents[idx(b)].W);
            for (int nbh : graph.neighbors(b)) {
                network->send(b, nbh, payload, entries);
            }
        }
        network->end_round();
        std::vector<std::vector<CMatrix>> heard(idx(nb));
        for (int b = 0; b < nb; ++b) {
            for (int nbh : graph.neighbors(b)) {
                heard[idx(b)].push_back(unpack(network->received(b, nbh), nu, na));
            }
        }

        double max_dis = 0.0;
        for (int b = 0; b < nb; ++b) {
            AgentState& s = res.agents[idx(b)];
            const auto& nbrs = graph.neighbors(b);
            // (2) own multiplier, (3) edge multipliers (antisymmetric between endpoints)
            s.V += s.W - s.U;
            CMatrix M = s.U - s.V;
            for (std::size_t j = 0; j < nbrs.size(); ++j) {
                const CMatrix& other = heard[idx(b)][j];
                const bool lower = b < nbrs[j];
                const CMatrix& lo = lower ? s.W : other;
                const CMatrix& hi = lower ? other : s.W;
                s.edge_V[j] += 0.5 * (lo - hi);
                const CMatrix mid = 0.5 * (lo + hi);
                if (lower) {
                    M += mid - s.edge_V[j];
                } else {
                    M += mid + s.edge_V[j];
                }
                max_dis = std::max(max_dis, (s.W - other).norm());
            }
            // (4) W: group soft threshold
            const double denom = 1.0 + static_cast<double>(nbrs.size());
            M /= denom;
            if (lambda > 0.0) {
                group_shrink(M, blocks, coeff, lambda / nb / (rho * denom));
            }
            s.W = std::move(M);
            // (5) U: closed form via the push-through identity
            const AgentData& d = data[idx(b)];
            const CMatrix R = d.EbHbH + (rho / 2.0) * (s.W + s.V);
            const CMatrix RH = R * d.Hb;
            s.U = (R - d.small.solve(RH.adjoint()).adjoint() * d.Hb.adjoint()) / alpha;
        }

        RoundLog row;
        row.round = round;
        row.max_disagreement = max_dis;
        row.messages = network->messages();
        row.payload_entries = network->payload_entries();
        double obj = 0.0;
        for (int b = 0; b < nb; ++b) {
            const double ob =
                agent_objective(res.agents[idx(b)].W, data[idx(b)], coeff, blocks, lambda / nb, nb);
            obj += ob;
            if (opts.keep_agent_objectives) {
                row.agent_objective.push_back(ob);
            }
        }
        if (reference) {
            row.objective_gap = std::abs(obj - reference->objective) / ref_scale;
            double dist = 0.0;
            for (const AgentState& s : res.agents) {
                dist = std::max(dist, (s.W - reference->W).norm() / ref_norm);
            }
            row.dist_to_centralized = dist;
        }
        res.log.push_back(std::move(row));
        res.rounds = round;

        if (opts.tolerance > 0.0 && round % 10 == 0) {
            std::vector<RVector> local(idx(nb));
            for (int b = 0; b < nb; ++b) {
                const AgentState& s = res.agents[idx(b)];
                double r = (s.W - s.U).squaredNorm();
                for (const CMatrix& other : heard[idx(b)]) {
                    r += (s.W - other).squaredNorm();
                }
                local[idx(b)] = RVector::Constant(1, r);
            }
            const RVector total = network->consensus_sum(local).front();
            if (std::sqrt(total(0)) <= opts.tolerance) {
                break;
            }
        }
    }
    return res;
}

void write_rounds_csv(std::ostream& out, const std::vector<RoundLog>& log)
{
    out << "round,objective_gap,max_disagreement,dist_to_centralized,messages,payload_entries\n";
    out << std::setprecision(12);
    for (const RoundLog& r : log) {
        out << r.round << ',' << r.objective_gap << ',' << r.max_disagreement << ',' << r.dist_to_centralized << ','
            << r.messages << ',' << r.payload_entries << '\n';
    }
}

// ---------------------------------------------------------------------------
// Orthogonal iteration
// ---------------------------------------------------------------------------

RVector initial_row(std::uint64_t seed, int b, int width)
{
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    RVector row(width);
    for (int i = 0; i < width; ++i) {
        row(i) = rng.normal();
    }
    return row;
}

namespace {

// Per-agent arithmetic shared by both drivers. `sum` is the global reduction.
OiResult run_oi(const RMatrix& A, int count, const OiOptions& opts,
                const std::function<std::vector<RMatrix>(const RMatrix&)>& gather_rows,
                const std::function<RVector(const std::vector<RVector>&)>& sum)
{
    const int n = static_cast<int>(A.rows());
    if (A.cols() != n || count < 1 || count > n) {
        throw InvalidInput("orthogonal iteration needs a square matrix and 1 <= count <= size");
    }
    if (opts.max_iterations < 1 || opts.tolerance < 0.0) {
        throw InvalidInput("invalid orthogonal iteration options");
    }
    OiResult res;
    for (int restart = 0; restart <= opts.max_restarts; ++restart) {
        const std::uint64_t seed = restart == 0 ? opts.seed : derive_seed(opts.seed, 1000003ULL + restart);
        RMatrix Q(n, count);
        for (int b = 0; b < n; ++b) {
            Q.row(b) = initial_row(seed, b, count).transpose();
        }
        res.lambda1_trace.clear();
        bool collapsed = false;
        for (int it = 1; it <= opts.max_iterations; ++it) {
            const std::vector<RMatrix> seen = gather_rows(Q); // seen[b]: rows needed by b, n x count
            std::vector<RVector> grams(idx(n));
            RMatrix Psi(n, count);
            for (int b = 0; b < n; ++b) {
                RVector psi = RVector::Zero(count);
                for (int j = 0; j < n; ++j) {
                    if (A(b, j) != 0.0) {
                        psi += A(b, j) * seen[idx(b)].row(j).transpose();
                    }
                }
                Psi.row(b) = psi.transpose();
                const RMatrix k = psi * psi.transpose();
                grams[idx(b)] = flatten(k);
            }
            const RVector kflat = sum(grams);
            const RMatrix K = Eigen::Map<const RMatrix>(kflat.data(), count, count);
            Eigen::LLT<RMatrix> llt(K);
            if (llt.info() != Eigen::Success || !K.allFinite()) {
                collapsed = true;
                break;
            }
            RMatrix next(n, count);
            std::vector<RVector> change(idx(n));
            for (int b = 0; b < n; ++b) {
                const RVector q = llt.matrixL().solve(RVector(Psi.row(b).transpose()));
                next.row(b) = q.transpose();
                change[idx(b)] = RVector::Constant(1, (q - Q.row(b).transpose()).squaredNorm());
            }
            Q = std::move(next);
            res.magnitudes = K.diagonal().cwiseSqrt();
            res.lambda1_trace.push_back(res.magnitudes(0));
            res.iterations = it;
            if (opts.observer) {
                opts.observer(it, Q, res.magnitudes);
            }
            if (std::sqrt(sum(change)(0)) <= opts.tolerance) {
                break;
            }
        }
        if (!collapsed) {
            res.Q = std::move(Q);
            res.restarts = restart;
            return res;
        }
    }
    throw NumericalError("orthogonal iteration collapsed on every restart");
}

} // namespace

OiResult orthogonal_iteration(const RMatrix& A, int count, const OiOptions& opts)
{
    const int n = static_cast<int>(A.rows());
    auto gather = [n](const RMatrix& Q) { return std::vector<RMatrix>(idx(n), Q); };
    return run_oi(A, count, opts, gather, dynclust::sequential_sum);
}

OiResult decentralized_oi(const RMatrix& A, int count, Network& network, const OiOptions& opts)
{
    const int n = static_cast<int>(A.rows());
    if (network.graph().num_nodes() != n) {
        throw ConfigurationError("communication graph size does not match the matrix");
    }
    if (!network.graph().valid_for_agents()) {
        throw ConfigurationError("decentralized runs need a connected graph with at least two agents");
    }
    auto gather = [&](const RMatrix& Q) {
        std::vector<Network::Transfer> transfers;
        for (int b = 0; b < n; ++b) {
            for (int j = 0; j < n; ++j) {
                if (j != b && A(b, j) != 0.0) {
                    transfers.push_back({j, b, Q.row(j).transpose()});
                }
            }
        }
        const std::vector<RVector> got = network.deliver(transfers);
        // Rows an agent has not received stay NaN so an illegal read would show.
        std::vector<RMatrix> seen(idx(n), RMatrix::Constant(n, Q.cols(), std::numeric_limits<double>::quiet_NaN()));
        for (int b = 0; b < n; ++b) {
            seen[idx(b)].row(b) = Q.row(b);
        }
        for (std::size_t i = 0; i < transfers.size(); ++i) {
            seen[idx(transfers[i].to)].row(transfers[i].from) = got[i].transpose();
        }
        return seen;
    };
    auto sum = [&](const std::vector<RVector>& parts) { return network.consensus_sum(parts, opts.consensus).front(); };
    return run_oi(A, count, opts, gather, sum);
}

SmallestEigResult smallest_eigvecs_decentralized(const RMatrix& Lsym, int count, Network& network, double shift,
                                                 const OiOptions& opts)
{
    if (!(shift > 0.0)) {
        throw InvalidInput("spectral shift must be positive");
    }
    SmallestEigResult res;
    res.phase1 = decentralized_oi(Lsym, 1, network, opts);
    res.lambda1 = res.phase1.magnitudes(0);
    RMatrix shifted = -Lsym;
    shifted.diagonal().array() += res.lambda1 + shift;
    res.phase2 = decentralized_oi(shifted, count, network, opts);
    res.Q = res.phase2.Q;
    return res;
}

dynclust::KMeansResult decentralized_kmeans(const RMatrix& rows, int k, Network& network,
                                            const dynclust::KMeansOptions& opts, const ConsensusOptions& consensus)
{
    if (network.graph().num_nodes() != rows.rows()) {
        throw ConfigurationError("communication graph size does not match the points");
    }
    // Shared decisions use agent 0's copy; in exact mode all copies are identical.
    const dynclust::Reducer reduce = [&](const std::vector<RVector>& parts) {
        return network.consensus_sum(parts, consensus).front();
    };
    return dynclust::kmeans(rows, k, opts, reduce);
}

// ---------------------------------------------------------------------------
// Decentralized alternation
// ---------------------------------------------------------------------------

namespace {

Clustering compact(const Clustering& clustering)
{
    std::vector<int> map(idx(clustering.num_clusters()), -1);
    std::vector<int> labels(idx(clustering.num_bs()));
    int next = 0;
    for (int b = 0; b < clustering.num_bs(); ++b) {
        int& m = map[idx(clustering.label(b))];
        if (m < 0) {
            m = next++;
        }
        labels[idx(b)] = m;
    }
    return Clustering(std::move(labels), next);
}

// Agent b's row of W~ from its own copy.
RVector backhaul_row(const CMatrix& W, const BlockStructure& blocks, int b)
{
    RVector row = RVector::Zero(blocks.num_bs);
    const int A = blocks.antennas_per_bs;
    for (int dst = 0; dst < blocks.num_bs; ++dst) {
        if (dst == b) {
            continue;
        }
        double s = 0.0;
        for (int u : blocks.users_of_bs[idx(b)]) {
            s += W.row(u).segment(blocks.first_antenna(dst), A).squaredNorm();
        }
        row(dst) = std::sqrt(s);
    }
    return row;
}

} // namespace

DecentralDynamicResult dynamic_decentralized(const CMatrix& H, const BlockStructure& blocks, double lambda,
                                             int num_clusters, Network& network, const DecentralDynamicOptions& opts)
{
    const int nb = blocks.num_bs;
    if (!(lambda >= 0.0) || !std::isfinite(lambda) || num_clusters < 1 || num_clusters > nb ||
        opts.max_iterations < 1 || opts.epsilon < 0.0) {
        throw InvalidInput("invalid decentralized clustering parameters");
    }
    const CommGraph& graph = network.graph();

    DecentralDynamicResult res;
    const sparse_mcp::PenaltySpec none = sparse_mcp::PenaltySpec::distributed(nb);
    AdmmResult start = admm_static(H, blocks, none, 0.0, graph, opts.admm, std::nullopt, &network);
    res.admm_logs.push_back(std::move(start.log));
    std::vector<AgentState> agents = std::move(start.agents);

    auto cluster_of = [&](const std::vector<AgentState>& state) {
        // Each agent computes its row of W~ and sends the nonzero entries to their columns' owners.
        std::vector<RVector> rows(idx(nb));
        for (int b = 0; b < nb; ++b) {
            rows[idx(b)] = backhaul_row(state[idx(b)].W, blocks, b);
        }
        std::vector<Network::Transfer> transfers;
        for (int b = 0; b < nb; ++b) {
            for (int j = 0; j < nb; ++j) {
                if (j != b && rows[idx(b)](j) != 0.0) {
                    transfers.push_back({b, j, RVector::Constant(1, rows[idx(b)](j))});
                }
            }
        }
        const std::vector<RVector> got = network.deliver(transfers);
        RMatrix incoming = RMatrix::Zero(nb, nb); // incoming(j, b) = W~(b, j) as known by j
        for (std::size_t i = 0; i < transfers.size(); ++i) {
            incoming(transfers[i].to, transfers[i].from) = got[i](0);
        }
        RMatrix Lsym(nb, nb);
        for (int b = 0; b < nb; ++b) {
            for (int j = 0; j < nb; ++j) {
                Lsym(b, j) = j == b ? rows[idx(b)].sum() : -0.5 * (rows[idx(b)](j) + incoming(b, j));
            }
        }
        const SmallestEigResult eig = smallest_eigvecs_decentralized(Lsym, num_clusters, network, opts.shift, opts.oi);
        const dynclust::KMeansResult km =
            decentralized_kmeans(eig.Q, num_clusters, network, opts.kmeans, opts.oi.consensus);
        return compact(km.clustering);
    };
    auto joint = [&](const std::vector<AgentState>& state, const Clustering& clusters) {
        const sparse_mcp::PenaltySpec pen = sparse_mcp::PenaltySpec::ratio_cut(clusters);
        std::vector<RVector> local(idx(nb));
        // Local terms are evaluated by each agent, then summed by consensus.
        for (int b = 0; b < nb; ++b) {
            const auto& users = blocks.users_of_bs[idx(b)];
            const CMatrix& W = state[idx(b)].W;
            double smooth = W.squaredNorm() / nb;
            for (int u : users) {
                CVector r = -W * H.col(u);
                r(u) += 1.0;
                smooth += r.squaredNorm();
            }
            double penalty = 0.0;
            if (lambda > 0.0) {
                const RVector row = backhaul_row(W, blocks, b);
                for (int j = 0; j < nb; ++j) {
                    penalty += pen.coefficient(b, j) * row(j);
                }
            }
            local[idx(b)] = RVector::Constant(1, smooth + lambda * penalty);
        }
        return network.consensus_sum(local, opts.oi.consensus).front()(0);
    };

    Clustering clusters = cluster_of(agents);
    double j_prev = joint(agents, clusters);
    res.objective_trace.push_back(j_prev);
    res.clustering = clusters;

    for (int it = 0; it < opts.max_iterations; ++it) {
        const Clustering candidate = it == 0 ? clusters : cluster_of(agents);
        const sparse_mcp::PenaltySpec pen = sparse_mcp::PenaltySpec::ratio_cut(candidate);
        AdmmResult step = admm_static(H, blocks, pen, lambda, graph, opts.admm, std::nullopt, &network, &agents);
        res.admm_logs.push_back(std::move(step.log));
        const double j_next = joint(step.agents, candidate);
        if (j_next > j_prev) {
            res.rejected_increase = true;
            break;
        }
        agents = std::move(step.agents);
        res.clustering = candidate;
        res.objective_trace.push_back(j_next);
        ++res.accepted_iterations;
        const bool done = j_prev - j_next < opts.epsilon;
        j_prev = j_next;
        if (done) {
            break;
        }
    }
    res.agents = std::move(agents);
    return res;
}

} // namespace coophaul::decentral
