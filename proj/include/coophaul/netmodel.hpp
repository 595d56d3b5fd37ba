#pragma once

// Cellular scenario generation: hexagonal BS layout, uniform MS drops with
// highest-long-term-gain association, and composite path-loss / log-normal
// shadowing / Rayleigh channel realizations.

#include "coophaul/core.hpp"

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace coophaul::netmodel {

struct Point {
    double x = 0.0;
    double y = 0.0;

    bool operator==(const Point&) const = default;
};

double distance(const Point& a, const Point& b);

/// Minimum BS-MS distance; keeps the path loss away from its d -> 0 singularity.
inline constexpr double kMinDistanceM = 35.0;

struct NetworkGeometry {
    std::vector<Point> bs_positions;
    double cell_radius_m = 500.0;
    int antennas_per_bs = 1;

    int num_bs() const { return static_cast<int>(bs_positions.size()); }
    int num_antennas() const { return num_bs() * antennas_per_bs; }
    double inter_site_distance() const;

    /// True when p lies strictly inside the hexagonal cell of BS b.
    bool in_cell(int b, const Point& p) const;
    bool in_coverage(const Point& p) const;
};

struct ScenarioConfig {
    int rings = 2;
    double cell_radius_m = 500.0;
    int antennas_per_bs = 1;
    int users_per_bs = 1;
    double system_snr_db = 6.2;
    double shadowing_sigma_db = 8.0;
    double pathloss_intercept_db = 148.1;
    double pathloss_slope = 37.6;
    bool shadowing_enabled = true;
    bool fading_enabled = true;
    std::uint64_t rng_seed = 1;

    void validate() const;

    /// Reads the keys named exactly as the fields above; missing keys keep defaults.
    static ScenarioConfig from_key_values(const KeyValues& kv);
};

/// MS positions together with the per BS-MS shadowing draws that decided the association.
struct UserDrop {
    std::vector<Point> ms_positions;
    RMatrix shadowing_db; // N_B x N_U
    int redraws = 0;
};

struct ChannelRealization {
    CMatrix H;              // N_A x N_U, unit noise power
    RMatrix long_term_gain; // N_B x N_U, linear, fading averaged out
    BlockStructure blocks;
    NetworkGeometry geometry;
    std::vector<Point> ms_positions;
    std::uint64_t seed = 0;

    int num_bs() const { return blocks.num_bs; }
    int num_users() const { return blocks.num_users(); }
};

/// Hexagonal lattice of 1 + 3 r (r + 1) sites, inter-site distance sqrt(3) R.
/// Site 0 is the origin; ring k follows counter-clockwise from angle 0.
NetworkGeometry hex_layout(int rings, double cell_radius_m, int antennas_per_bs = 1);

double path_loss_db(double distance_km, double intercept_db = 148.1, double slope = 37.6);

/// Transmit-power offset P with P - PL(cell radius) = system SNR.
double snr_offset_db(const ScenarioConfig& config);

/// Long-term gain in dB for one BS-MS pair (without fading).
double long_term_gain_db(const ScenarioConfig& config, double distance_m, double shadow_db);

/// Drops users_per_bs * N_B users uniformly over the coverage area. Each user
/// is redrawn (position and shadowing) until its highest-gain BS still has a
/// free slot, so every BS ends up serving exactly users_per_bs users.
UserDrop drop_users(const NetworkGeometry& geometry, const ScenarioConfig& config, Rng& rng);

ChannelRealization realize_channel(const NetworkGeometry& geometry, const UserDrop& drop,
                                   const ScenarioConfig& config, Rng& rng);

/// Layout + drop + channel from config.rng_seed.
ChannelRealization generate_scenario(const ScenarioConfig& config);
ChannelRealization generate_scenario(const ScenarioConfig& config, std::uint64_t seed);

// Text dump: header "coophaul-channel 1", then "N_B A N_U seed", cell radius,
// BS and MS coordinates, association, long-term gains and H (row-major,
// real/imag interleaved). Values use 17 significant digits so import is exact.
void write_channel(std::ostream& out, const ChannelRealization& ch);
ChannelRealization read_channel(std::istream& in);

} // namespace coophaul::netmodel
