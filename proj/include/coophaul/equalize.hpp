#pragma once

// Closed-form LMMSE equalization and receiver-side metrics.

#include "coophaul/core.hpp"

#include <iosfwd>
#include <vector>

namespace coophaul::equalize {

/// Linear equalizer W (N_U x N_A) with the block structure it was designed for.
struct Equalizer {
    CMatrix W;
    BlockStructure blocks;
};

struct RateReport {
    RVector sinr; // linear, per user
    RVector rate; // bits/s/Hz, per user
    double sum_rate = 0.0;
    double per_cell_rate = 0.0; // sum rate / N_B
    std::vector<double> sorted_rates;
};

/// W = (H^H H + I)^{-1} H^H.
CMatrix lmmse(const CMatrix& H);
Equalizer lmmse(const CMatrix& H, const BlockStructure& blocks);

/// ||I - W H||_F^2 + ||W||_F^2.
double mse(const CMatrix& W, const CMatrix& H);

/// Per-user linear-receiver SINR and Shannon rate with unit noise. A user
/// whose receiver row is all zero gets SINR 0.
RateReport rates(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks);

/// Restricted LMMSE: every row u of the result is supported only on the
/// antennas of the BSs in support[b(u)] and minimizes the MSE under that
/// restriction (interference from all other users is accounted for).
CMatrix restricted_lmmse(const CMatrix& H, const BlockStructure& blocks,
                         const std::vector<std::vector<int>>& support_bs);

/// CSV with columns user, bs, sinr_linear, rate_bps_hz.
void write_rates_csv(std::ostream& out, const RateReport& report, const BlockStructure& blocks);

/// Empirical CDF of a sample: (value, fraction <= value) at each distinct value.
std::vector<std::pair<double, double>> empirical_cdf(std::vector<double> samples);

/// CSV with columns rate, cdf.
void write_cdf_csv(std::ostream& out, const std::vector<double>& samples);

} // namespace coophaul::equalize
