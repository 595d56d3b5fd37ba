#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace coophaul {

using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using RMatrix = Eigen::MatrixXd;
using RVector = Eigen::VectorXd;
using Complex = std::complex<double>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class ScenarioError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class ConfigurationError : public Error {
public:
    using Error::Error;
};

class ConsensusError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// 64-bit Mersenne Twister with hand-rolled uniform/normal transforms.
///
/// The standard distributions are implementation-defined, so channel dumps
/// would differ between standard libraries; the transforms below are fixed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    /// Standard normal (Box-Muller, cached second draw).
    double normal();

    /// Circularly-symmetric CN(0, 1).
    Complex complex_normal();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Deterministic stream derivation (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// ---------------------------------------------------------------------------
// Antenna / user block structure shared by all equalizer code
// ---------------------------------------------------------------------------

/// Which users each BS serves and which antennas it owns. Antennas of BS b
/// are the contiguous range [b*A, (b+1)*A).
struct BlockStructure {
    int num_bs = 0;
    int antennas_per_bs = 1;
    std::vector<int> serving_bs;               // u -> b(u)
    std::vector<std::vector<int>> users_of_bs; // b -> U_b (ascending)

    int num_users() const { return static_cast<int>(serving_bs.size()); }
    int num_antennas() const { return num_bs * antennas_per_bs; }
    int first_antenna(int b) const { return b * antennas_per_bs; }
    int bs_of_antenna(int a) const { return a / antennas_per_bs; }

    /// Builds the inverse sets from an association map.
    static BlockStructure from_association(int num_bs, int antennas_per_bs, std::vector<int> serving_bs);

    /// One user per BS, user b served by BS b.
    static BlockStructure identity(int num_bs, int antennas_per_bs = 1);

    void validate() const;
};

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// Non-overlapping partition of BS indices; labels are 0-based.
class Clustering {
public:
    Clustering() = default;
    Clustering(std::vector<int> labels, int num_clusters);

    static Clustering singletons(int num_bs);
    static Clustering single(int num_bs);
    static Clustering from_groups(int num_bs, const std::vector<std::vector<int>>& groups);

    int num_bs() const { return static_cast<int>(labels_.size()); }
    int num_clusters() const { return num_clusters_; }
    int label(int b) const { return labels_[static_cast<std::size_t>(b)]; }
    const std::vector<int>& labels() const { return labels_; }

    std::vector<std::vector<int>> members() const;
    std::vector<int> sizes() const;
    bool has_empty() const;

    /// Relabels clusters in order of first appearance so that equal partitions compare equal.
    Clustering canonical() const;
    bool same_partition(const Clustering& other) const;

    bool operator==(const Clustering& other) const = default;

private:
    std::vector<int> labels_;
    int num_clusters_ = 0;
};

// ---------------------------------------------------------------------------
// Flat key = value configuration files
// ---------------------------------------------------------------------------

class KeyValues {
public:
    static KeyValues parse(std::istream& in);
    static KeyValues load(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    double number(const std::string& key, double fallback) const;
    long long integer(const std::string& key, long long fallback) const;
    bool boolean(const std::string& key, bool fallback) const;
    std::vector<double> numbers(const std::string& key, const std::vector<double>& fallback) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

} // namespace coophaul
