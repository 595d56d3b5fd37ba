#include "coophaul/netmodel.hpp"

#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <istream>
#include <ostream>
#include <string>

namespace coophaul::netmodel {

namespace {

constexpr int kMaxRedrawsPerUser = 1000;

// Axial hex-lattice directions, counter-clockwise from angle 0.
constexpr std::array<std::array<int, 2>, 6> kAxialDirections{{{1, 0}, {0, 1}, {-1, 1}, {-1, 0}, {0, -1}, {1, -1}}};

Point axial_to_point(int q, int r, double isd)
{
    return {isd * (q + 0.5 * r), isd * (std::sqrt(3.0) / 2.0) * r};
}

} // namespace

double distance(const Point& a, const Point& b)
{
    return std::hypot(a.x - b.x, a.y - b.y);
}

double NetworkGeometry::inter_site_distance() const
{
    return std::sqrt(3.0) * cell_radius_m;
}

bool NetworkGeometry::in_cell(int b, const Point& p) const
{
    // Neighbouring sites sit at multiples of 60 degrees, so the cell edges face
    // those directions at apothem sqrt(3)/2 R.
    const Point& c = bs_positions[static_cast<std::size_t>(b)];
    const double dx = p.x - c.x;
    const double dy = p.y - c.y;
    const double apothem = std::sqrt(3.0) / 2.0 * cell_radius_m;
    for (int k = 0; k < 3; ++k) {
        const double angle = k * std::numbers::pi / 3.0;
        if (std::abs(dx * std::cos(angle) + dy * std::sin(angle)) >= apothem) {
            return false;
        }
    }
    return true;
}

bool NetworkGeometry::in_coverage(const Point& p) const
{
    for (int b = 0; b < num_bs(); ++b) {
        if (in_cell(b, p)) {
            return true;
        }
    }
    return false;
}

void ScenarioConfig::validate() const
{
    if (rings < 0) {
        throw InvalidInput("rings must be >= 0");
    }
    if (!(cell_radius_m > 0.0) || antennas_per_bs <= 0 || users_per_bs <= 0) {
        throw InvalidInput("cell radius, antennas_per_bs and users_per_bs must be positive");
    }
    if (!(shadowing_sigma_db > 0.0) || !(pathloss_intercept_db > 0.0) || !(pathloss_slope > 0.0)) {
        throw InvalidInput("shadowing sigma and path-loss parameters must be positive");
    }
    if (!std::isfinite(system_snr_db)) {
        throw InvalidInput("system_snr_db must be finite");
    }
    if (cell_radius_m <= kMinDistanceM) {
        throw InvalidInput("cell radius must exceed the minimum BS-MS distance");
    }
}

ScenarioConfig ScenarioConfig::from_key_values(const KeyValues& kv)
{
    ScenarioConfig c;
    c.rings = static_cast<int>(kv.integer("rings", c.rings));
    c.cell_radius_m = kv.number("cell_radius_m", c.cell_radius_m);
    c.antennas_per_bs = static_cast<int>(kv.integer("antennas_per_bs", c.antennas_per_bs));
    c.users_per_bs = static_cast<int>(kv.integer("users_per_bs", c.antennas_per_bs));
    c.system_snr_db = kv.number("system_snr_db", c.system_snr_db);
    c.shadowing_sigma_db = kv.number("shadowing_sigma_db", c.shadowing_sigma_db);
    c.pathloss_intercept_db = kv.number("pathloss_intercept_db", c.pathloss_intercept_db);
    c.pathloss_slope = kv.number("pathloss_slope", c.pathloss_slope);
    c.shadowing_enabled = kv.boolean("shadowing_enabled", c.shadowing_enabled);
    c.fading_enabled = kv.boolean("fading_enabled", c.fading_enabled);
    c.rng_seed = static_cast<std::uint64_t>(kv.integer("rng_seed", static_cast<long long>(c.rng_seed)));
    c.validate();
    return c;
}

NetworkGeometry hex_layout(int rings, double cell_radius_m, int antennas_per_bs)
{
    if (rings < 0) {
        throw InvalidInput("rings must be >= 0");
    }
    NetworkGeometry g;
    g.cell_radius_m = cell_radius_m;
    g.antennas_per_bs = antennas_per_bs;
    const double isd = g.inter_site_distance();
    g.bs_positions.push_back({0.0, 0.0});
    for (int ring = 1; ring <= rings; ++ring) {
        // Start at the corner on the positive x axis and walk the six sides.
        int q = ring;
        int r = 0;
        for (int side = 0; side < 6; ++side) {
            const auto& dir = kAxialDirections[static_cast<std::size_t>((side + 2) % 6)];
            for (int step = 0; step < ring; ++step) {
                g.bs_positions.push_back(axial_to_point(q, r, isd));
                q += dir[0];
                r += dir[1];
            }
        }
    }
    return g;
}

double path_loss_db(double distance_km, double intercept_db, double slope)
{
    if (!(distance_km > 0.0) || !std::isfinite(distance_km)) {
        throw InvalidInput("path loss needs a positive finite distance");
    }
    return intercept_db + slope * std::log10(distance_km);
}

double snr_offset_db(const ScenarioConfig& config)
{
    return config.system_snr_db +
           path_loss_db(config.cell_radius_m / 1000.0, config.pathloss_intercept_db, config.pathloss_slope);
}

double long_term_gain_db(const ScenarioConfig& config, double distance_m, double shadow_db)
{
    const double d_km = std::max(distance_m, kMinDistanceM) / 1000.0;
    return snr_offset_db(config) - path_loss_db(d_km, config.pathloss_intercept_db, config.pathloss_slope) +
           shadow_db;
}

UserDrop drop_users(const NetworkGeometry& geometry, const ScenarioConfig& config, Rng& rng)
{
    const int nb = geometry.num_bs();
    if (nb == 0) {
        throw InvalidInput("geometry has no base stations");
    }
    const int nu = nb * config.users_per_bs;
    const double r = geometry.cell_radius_m;

    UserDrop drop;
    drop.ms_positions.reserve(static_cast<std::size_t>(nu));
    drop.shadowing_db = RMatrix::Zero(nb, nu);
    std::vector<int> load(static_cast<std::size_t>(nb), 0);
    RVector shadow(nb);

    for (int u = 0; u < nu; ++u) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxRedrawsPerUser && !placed; ++attempt) {
            // All cells have equal area: pick one, then rejection-sample inside it.
            const int cell = static_cast<int>(rng.index(static_cast<std::size_t>(nb)));
            const Point& c = geometry.bs_positions[static_cast<std::size_t>(cell)];
            Point p;
            do {
                p = {c.x + (2.0 * rng.uniform() - 1.0) * r, c.y + (2.0 * rng.uniform() - 1.0) * r};
            } while (!geometry.in_cell(cell, p));

            bool too_close = false;
            for (int b = 0; b < nb; ++b) {
                too_close = too_close || distance(p, geometry.bs_positions[static_cast<std::size_t>(b)]) < kMinDistanceM;
            }
            for (int b = 0; b < nb; ++b) {
                shadow(b) = config.shadowing_enabled ? config.shadowing_sigma_db * rng.normal() : 0.0;
            }
            if (too_close) {
                ++drop.redraws;
                continue;
            }

            int best = 0;
            double best_gain = -std::numeric_limits<double>::infinity();
            for (int b = 0; b < nb; ++b) {
                const double g = long_term_gain_db(
                    config, distance(p, geometry.bs_positions[static_cast<std::size_t>(b)]), shadow(b));
                if (g > best_gain) {
                    best_gain = g;
                    best = b;
                }
            }
            if (load[static_cast<std::size_t>(best)] >= config.users_per_bs) {
                ++drop.redraws;
                continue;
            }
            ++load[static_cast<std::size_t>(best)];
            drop.ms_positions.push_back(p);
            drop.shadowing_db.col(u) = shadow;
            placed = true;
        }
        if (!placed) {
            throw ScenarioError("user " + std::to_string(u) + " could not be associated after " +
                                std::to_string(kMaxRedrawsPerUser) + " redraws");
        }
    }
    return drop;
}

ChannelRealization realize_channel(const NetworkGeometry& geometry, const UserDrop& drop,
                                   const ScenarioConfig& config, Rng& rng)
{
    const int nb = geometry.num_bs();
    const int na_per = geometry.antennas_per_bs;
    const int nu = static_cast<int>(drop.ms_positions.size());
    if (drop.shadowing_db.rows() != nb || drop.shadowing_db.cols() != nu) {
        throw InvalidInput("user drop does not match the geometry");
    }

    ChannelRealization ch;
    ch.geometry = geometry;
    ch.ms_positions = drop.ms_positions;
    ch.long_term_gain.resize(nb, nu);
    ch.H.resize(nb * na_per, nu);

    std::vector<int> serving(static_cast<std::size_t>(nu), 0);
    for (int u = 0; u < nu; ++u) {
        int best = 0;
        for (int b = 0; b < nb; ++b) {
            const double d = distance(drop.ms_positions[static_cast<std::size_t>(u)],
                                      geometry.bs_positions[static_cast<std::size_t>(b)]);
            const double gain_db = long_term_gain_db(config, d, drop.shadowing_db(b, u));
            ch.long_term_gain(b, u) = std::pow(10.0, gain_db / 10.0);
            if (ch.long_term_gain(b, u) > ch.long_term_gain(best, u)) {
                best = b;
            }
        }
        serving[static_cast<std::size_t>(u)] = best;
    }
    // Fading draws in column-major (user-outer) order.
    for (int u = 0; u < nu; ++u) {
        for (int b = 0; b < nb; ++b) {
            const double amplitude = std::sqrt(ch.long_term_gain(b, u));
            for (int k = 0; k < na_per; ++k) {
                const Complex fade = config.fading_enabled ? rng.complex_normal() : Complex{1.0, 0.0};
                ch.H(b * na_per + k, u) = amplitude * fade;
            }
        }
    }
    ch.blocks = BlockStructure::from_association(nb, na_per, std::move(serving));
    return ch;
}

ChannelRealization generate_scenario(const ScenarioConfig& config)
{
    return generate_scenario(config, config.rng_seed);
}

ChannelRealization generate_scenario(const ScenarioConfig& config, std::uint64_t seed)
{
    config.validate();
    const NetworkGeometry geometry = hex_layout(config.rings, config.cell_radius_m, config.antennas_per_bs);
    Rng rng(seed);
    const UserDrop drop = drop_users(geometry, config, rng);
    ChannelRealization ch = realize_channel(geometry, drop, config, rng);
    ch.seed = seed;
    return ch;
}

// ---------------------------------------------------------------------------

void write_channel(std::ostream& out, const ChannelRealization& ch)
{
    const int nb = ch.num_bs();
    const int nu = ch.num_users();
    out << std::setprecision(17);
    out << "coophaul-channel 1\n";
    out << nb << ' ' << ch.blocks.antennas_per_bs << ' ' << nu << ' ' << ch.seed << '\n';
    out << ch.geometry.cell_radius_m << '\n';
    for (const Point& p : ch.geometry.bs_positions) {
        out << p.x << ' ' << p.y << '\n';
    }
    for (const Point& p : ch.ms_positions) {
        out << p.x << ' ' << p.y << '\n';
    }
    for (int u = 0; u < nu; ++u) {
        out << ch.blocks.serving_bs[static_cast<std::size_t>(u)] << (u + 1 < nu ? ' ' : '\n');
    }
    for (int b = 0; b < nb; ++b) {
        for (int u = 0; u < nu; ++u) {
            out << ch.long_term_gain(b, u) << (u + 1 < nu ? ' ' : '\n');
        }
    }
    for (int a = 0; a < ch.H.rows(); ++a) {
        for (int u = 0; u < nu; ++u) {
            out << ch.H(a, u).real() << ' ' << ch.H(a, u).imag() << (u + 1 < nu ? ' ' : '\n');
        }
    }
}

ChannelRealization read_channel(std::istream& in)
{
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != "coophaul-channel" || version != 1) {
        throw InvalidInput("not a coophaul channel dump");
    }
    int nb = 0;
    int a = 0;
    int nu = 0;
    ChannelRealization ch;
    in >> nb >> a >> nu >> ch.seed;
    if (!in || nb <= 0 || a <= 0 || nu <= 0) {
        throw InvalidInput("malformed channel dump header");
    }
    ch.geometry.antennas_per_bs = a;
    in >> ch.geometry.cell_radius_m;
    ch.geometry.bs_positions.resize(static_cast<std::size_t>(nb));
    for (Point& p : ch.geometry.bs_positions) {
        in >> p.x >> p.y;
    }
    ch.ms_positions.resize(static_cast<std::size_t>(nu));
    for (Point& p : ch.ms_positions) {
        in >> p.x >> p.y;
    }
    std::vector<int> serving(static_cast<std::size_t>(nu));
    for (int& b : serving) {
        in >> b;
    }
    ch.long_term_gain.resize(nb, nu);
    for (int b = 0; b < nb; ++b) {
        for (int u = 0; u < nu; ++u) {
            in >> ch.long_term_gain(b, u);
        }
    }
    ch.H.resize(nb * a, nu);
    for (int i = 0; i < nb * a; ++i) {
        for (int u = 0; u < nu; ++u) {
            double re = 0.0;
            double im = 0.0;
            in >> re >> im;
            ch.H(i, u) = {re, im};
        }
    }
    if (!in) {
        throw InvalidInput("truncated channel dump");
    }
    ch.blocks = BlockStructure::from_association(nb, a, std::move(serving));
    return ch;
}

} // namespace coophaul::netmodel
