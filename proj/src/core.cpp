#include "coophaul/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace coophaul {

double Rng::normal()
{
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Complex Rng::complex_normal()
{
    const double re = normal();
    const double im = normal();
    return {re * std::numbers::sqrt2 / 2.0, im * std::numbers::sqrt2 / 2.0};
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream)
{
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------

BlockStructure BlockStructure::from_association(int num_bs, int antennas_per_bs, std::vector<int> serving_bs)
{
    if (num_bs <= 0 || antennas_per_bs <= 0) {
        throw InvalidInput("block structure needs at least one BS and one antenna per BS");
    }
    BlockStructure s;
    s.num_bs = num_bs;
    s.antennas_per_bs = antennas_per_bs;
    s.serving_bs = std::move(serving_bs);
    s.users_of_bs.assign(static_cast<std::size_t>(num_bs), {});
    for (int u = 0; u < s.num_users(); ++u) {
        const int b = s.serving_bs[static_cast<std::size_t>(u)];
        if (b < 0 || b >= num_bs) {
            throw InvalidInput("association references BS " + std::to_string(b) + " outside [0, " +
                               std::to_string(num_bs) + ")");
        }
        s.users_of_bs[static_cast<std::size_t>(b)].push_back(u);
    }
    return s;
}

BlockStructure BlockStructure::identity(int num_bs, int antennas_per_bs)
{
    std::vector<int> serving(static_cast<std::size_t>(num_bs));
    for (int b = 0; b < num_bs; ++b) {
        serving[static_cast<std::size_t>(b)] = b;
    }
    return from_association(num_bs, antennas_per_bs, std::move(serving));
}

void BlockStructure::validate() const
{
    if (num_bs <= 0 || antennas_per_bs <= 0) {
        throw InvalidInput("block structure needs positive BS and antenna counts");
    }
    if (static_cast<int>(users_of_bs.size()) != num_bs) {
        throw InvalidInput("block structure user sets do not match the BS count");
    }
    int total = 0;
    for (const auto& users : users_of_bs) {
        total += static_cast<int>(users.size());
    }
    if (total != num_users()) {
        throw InvalidInput("block structure user sets are not a partition of the users");
    }
}

// ---------------------------------------------------------------------------

Clustering::Clustering(std::vector<int> labels, int num_clusters)
    : labels_(std::move(labels)), num_clusters_(num_clusters)
{
    if (num_clusters_ < 1) {
        throw InvalidInput("a clustering needs at least one cluster");
    }
    for (int c : labels_) {
        if (c < 0 || c >= num_clusters_) {
            throw InvalidInput("cluster label " + std::to_string(c) + " outside [0, " +
                               std::to_string(num_clusters_) + ")");
        }
    }
}

Clustering Clustering::singletons(int num_bs)
{
    std::vector<int> labels(static_cast<std::size_t>(num_bs));
    for (int b = 0; b < num_bs; ++b) {
        labels[static_cast<std::size_t>(b)] = b;
    }
    return {std::move(labels), num_bs};
}

Clustering Clustering::single(int num_bs)
{
    return {std::vector<int>(static_cast<std::size_t>(num_bs), 0), 1};
}

Clustering Clustering::from_groups(int num_bs, const std::vector<std::vector<int>>& groups)
{
    std::vector<int> labels(static_cast<std::size_t>(num_bs), -1);
    for (std::size_t c = 0; c < groups.size(); ++c) {
        for (int b : groups[c]) {
            if (b < 0 || b >= num_bs) {
                throw InvalidInput("cluster member " + std::to_string(b) + " is not a BS index");
            }
            if (labels[static_cast<std::size_t>(b)] != -1) {
                throw InvalidInput("BS " + std::to_string(b) + " appears in two clusters");
            }
            labels[static_cast<std::size_t>(b)] = static_cast<int>(c);
        }
    }
    for (int b = 0; b < num_bs; ++b) {
        if (labels[static_cast<std::size_t>(b)] == -1) {
            throw InvalidInput("BS " + std::to_string(b) + " is not covered by any cluster");
        }
    }
    return {std::move(labels), static_cast<int>(groups.size())};
}

std::vector<std::vector<int>> Clustering::members() const
{
    std::vector<std::vector<int>> out(static_cast<std::size_t>(num_clusters_));
    for (int b = 0; b < num_bs(); ++b) {
        out[static_cast<std::size_t>(label(b))].push_back(b);
    }
    return out;
}

std::vector<int> Clustering::sizes() const
{
    std::vector<int> out(static_cast<std::size_t>(num_clusters_), 0);
    for (int c : labels_) {
        ++out[static_cast<std::size_t>(c)];
    }
    return out;
}

bool Clustering::has_empty() const
{
    const auto s = sizes();
    return std::find(s.begin(), s.end(), 0) != s.end();
}

Clustering Clustering::canonical() const
{
    std::vector<int> remap(static_cast<std::size_t>(num_clusters_), -1);
    std::vector<int> labels(labels_.size());
    int next = 0;
    for (std::size_t b = 0; b < labels_.size(); ++b) {
        int& slot = remap[static_cast<std::size_t>(labels_[b])];
        if (slot == -1) {
            slot = next++;
        }
        labels[b] = slot;
    }
    return {std::move(labels), std::max(next, 1)};
}

bool Clustering::same_partition(const Clustering& other) const
{
    return canonical().labels() == other.canonical().labels();
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

} // namespace

KeyValues KeyValues::parse(std::istream& in)
{
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigurationError("line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) {
            throw ConfigurationError("line " + std::to_string(lineno) + ": empty key");
        }
        kv.values_[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

KeyValues KeyValues::load(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigurationError("cannot open config file '" + path + "'");
    }
    return parse(in);
}

const std::string& KeyValues::get(const std::string& key) const
{
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigurationError("missing config key '" + key + "'");
    }
    return it->second;
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const
{
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValues::number(const std::string& key, double fallback) const
{
    if (!has(key)) {
        return fallback;
    }
    try {
        std::size_t used = 0;
        const double v = std::stod(get(key), &used);
        if (used != get(key).size()) {
            throw std::invalid_argument("trailing characters");
        }
        return v;
    } catch (const std::exception&) {
        throw ConfigurationError("config key '" + key + "' is not a number: '" + get(key) + "'");
    }
}

long long KeyValues::integer(const std::string& key, long long fallback) const
{
    if (!has(key)) {
        return fallback;
    }
    try {
        std::size_t used = 0;
        const long long v = std::stoll(get(key), &used);
        if (used != get(key).size()) {
            throw std::invalid_argument("trailing characters");
        }
        return v;
    } catch (const std::exception&) {
        throw ConfigurationError("config key '" + key + "' is not an integer: '" + get(key) + "'");
    }
}

bool KeyValues::boolean(const std::string& key, bool fallback) const
{
    if (!has(key)) {
        return fallback;
    }
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no" || v == "off") {
        return false;
    }
    throw ConfigurationError("config key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<double> KeyValues::numbers(const std::string& key, const std::vector<double>& fallback) const
{
    if (!has(key)) {
        return fallback;
    }
    std::vector<double> out;
    std::string item;
    std::istringstream ss(get(key));
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) {
            continue;
        }
        if (item == "inf") {
            out.push_back(std::numeric_limits<double>::infinity());
            continue;
        }
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigurationError("config key '" + key + "' has a non-numeric entry '" + item + "'");
        }
    }
    return out;
}

} // namespace coophaul
