#include "coophaul/equalize.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace coophaul::equalize {

CMatrix lmmse(const CMatrix& H)
{
    CMatrix gram = H.adjoint() * H;
    gram.diagonal().array() += 1.0;
    return gram.llt().solve(H.adjoint());
}

Equalizer lmmse(const CMatrix& H, const BlockStructure& blocks)
{
    return {lmmse(H), blocks};
}

double mse(const CMatrix& W, const CMatrix& H)
{
    if (W.cols() != H.rows() || W.rows() != H.cols()) {
        throw InvalidInput("equalizer and channel dimensions do not match");
    }
    CMatrix residual = -W * H;
    residual.diagonal().array() += 1.0;
    return residual.squaredNorm() + W.squaredNorm();
}

RateReport rates(const CMatrix& W, const CMatrix& H, const BlockStructure& blocks)
{
    if (W.cols() != H.rows() || W.rows() != H.cols()) {
        throw InvalidInput("equalizer and channel dimensions do not match");
    }
    const Eigen::Index nu = H.cols();
    const CMatrix WH = W * H;
    RateReport report;
    report.sinr.resize(nu);
    report.rate.resize(nu);
    for (Eigen::Index u = 0; u < nu; ++u) {
        const double noise = W.row(u).squaredNorm();
        const double total = WH.row(u).squaredNorm();
        const double signal = std::norm(WH(u, u));
        const double denom = total - signal + noise;
        report.sinr(u) = (noise == 0.0 || denom <= 0.0) ? 0.0 : signal / denom;
        report.rate(u) = std::log2(1.0 + report.sinr(u));
    }
    report.sum_rate = report.rate.sum();
    report.per_cell_rate = report.sum_rate / static_cast<double>(blocks.num_bs);
    report.sorted_rates.assign(report.rate.data(), report.rate.data() + nu);
    std::sort(report.sorted_rates.begin(), report.sorted_rates.end());
    return report;
}

CMatrix restricted_lmmse(const CMatrix& H, const BlockStructure& blocks,
                         const std::vector<std::vector<int>>& support_bs)
{
    const int a_per = blocks.antennas_per_bs;
    CMatrix W = CMatrix::Zero(H.cols(), H.rows());
    for (int b = 0; b < blocks.num_bs; ++b) {
        const auto& users = blocks.users_of_bs[static_cast<std::size_t>(b)];
        if (users.empty()) {
            continue;
        }
        std::vector<int> antennas;
        for (int s : support_bs[static_cast<std::size_t>(b)]) {
            for (int k = 0; k < a_per; ++k) {
                antennas.push_back(s * a_per + k);
            }
        }
        const auto n = static_cast<Eigen::Index>(antennas.size());
        CMatrix Hs(n, H.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            Hs.row(i) = H.row(antennas[static_cast<std::size_t>(i)]);
        }
        CMatrix gram = Hs * Hs.adjoint();
        gram.diagonal().array() += 1.0;
        // Rows of B = H^H restricted to (U_b, S), transposed into columns.
        CMatrix rhs(n, static_cast<Eigen::Index>(users.size()));
        for (std::size_t j = 0; j < users.size(); ++j) {
            rhs.col(static_cast<Eigen::Index>(j)) = Hs.col(users[j]);
        }
        const CMatrix Xh = gram.llt().solve(rhs); // X^H
        for (std::size_t j = 0; j < users.size(); ++j) {
            for (Eigen::Index i = 0; i < n; ++i) {
                W(users[j], antennas[static_cast<std::size_t>(i)]) = std::conj(Xh(i, static_cast<Eigen::Index>(j)));
            }
        }
    }
    return W;
}

void write_rates_csv(std::ostream& out, const RateReport& report, const BlockStructure& blocks)
{
    out << "user,bs,sinr_linear,rate_bps_hz\n" << std::setprecision(17);
    for (Eigen::Index u = 0; u < report.sinr.size(); ++u) {
        out << u << ',' << blocks.serving_bs[static_cast<std::size_t>(u)] << ',' << report.sinr(u) << ','
            << report.rate(u) << '\n';
    }
}

std::vector<std::pair<double, double>> empirical_cdf(std::vector<double> samples)
{
    std::sort(samples.begin(), samples.end());
    std::vector<std::pair<double, double>> out;
    const double n = static_cast<double>(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (i + 1 < samples.size() && samples[i + 1] == samples[i]) {
            continue;
        }
        out.emplace_back(samples[i], static_cast<double>(i + 1) / n);
    }
    return out;
}

void write_cdf_csv(std::ostream& out, const std::vector<double>& samples)
{
    out << "rate,cdf\n" << std::setprecision(17);
    for (const auto& [value, fraction] : empirical_cdf(samples)) {
        out << value << ',' << fraction << '\n';
    }
}

} // namespace coophaul::equalize
