#pragma once

#include "coophaul/core.hpp"

#include <vector>

namespace testsupport {

using coophaul::BlockStructure;
using coophaul::CMatrix;
using coophaul::Rng;

/// Entries CN(0, scale).
inline CMatrix random_complex(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0)
{
    CMatrix M(rows, cols);
    const double s = std::sqrt(scale);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) {
            M(i, j) = s * rng.complex_normal();
        }
    }
    return M;
}

/// Channel for `num_bs` BSs with `a` antennas and `a` users each, user u served by BS u / a,
/// with a stronger own-cell link so instances look cellular.
inline CMatrix random_channel(Rng& rng, const BlockStructure& blocks, double own_gain = 4.0)
{
    CMatrix H = random_complex(rng, blocks.num_antennas(), blocks.num_users());
    for (int u = 0; u < blocks.num_users(); ++u) {
        const int b = blocks.serving_bs[static_cast<std::size_t>(u)];
        for (int k = 0; k < blocks.antennas_per_bs; ++k) {
            H(blocks.first_antenna(b) + k, u) *= std::sqrt(own_gain);
        }
    }
    return H;
}

inline BlockStructure square_blocks(int num_bs, int a)
{
    std::vector<int> serving;
    for (int b = 0; b < num_bs; ++b) {
        for (int k = 0; k < a; ++k) {
            serving.push_back(b);
        }
    }
    return BlockStructure::from_association(num_bs, a, serving);
}

inline double rel_diff(const CMatrix& a, const CMatrix& b)
{
    return (a - b).norm() / std::max(1e-300, b.norm());
}

} // namespace testsupport
