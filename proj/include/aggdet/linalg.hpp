#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "aggdet/errors.hpp"

namespace aggdet {

using Vector = std::vector<double>;

/// Dot product with four independent accumulators; the caller guarantees
/// equal lengths.
inline double dot_unchecked(std::span<const double> a, std::span<const double> b) noexcept {
    const std::size_t n = a.size();
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

namespace detail {

using Lanes = double __attribute__((vector_size(32)));

}  // namespace detail

/// All pairwise dot products out[r * cols.size() + c] = rows[r] . cols[c],
/// each of length `dim`. Pairs are computed in 4 x 2 register blocks; every
/// pair uses the same lane-wise summation order whichever block it falls in.
inline void dot_table(std::span<const double* const> rows, std::span<const double* const> cols, std::size_t dim,
                      double* out) noexcept {
    using detail::Lanes;
    const std::size_t nr = rows.size(), nc = cols.size();
    const std::size_t body = dim - dim % 4;
    auto finish = [&](std::size_t r, std::size_t c, const Lanes& s) {
        double t = (s[0] + s[1]) + (s[2] + s[3]);
        for (std::size_t i = body; i < dim; ++i) t += rows[r][i] * cols[c][i];
        out[r * nc + c] = t;
    };
    auto single = [&](std::size_t r, std::size_t c) {
        Lanes s{};
        for (std::size_t i = 0; i < body; i += 4) {
            Lanes x, y;
            std::memcpy(&x, rows[r] + i, sizeof x);
            std::memcpy(&y, cols[c] + i, sizeof y);
            s += x * y;
        }
        finish(r, c, s);
    };
    std::size_t r = 0;
    for (; r + 4 <= nr; r += 4) {
        std::size_t c = 0;
        for (; c + 2 <= nc; c += 2) {
            Lanes s[4][2] = {};
            for (std::size_t i = 0; i < body; i += 4) {
                Lanes p0, p1;
                std::memcpy(&p0, cols[c] + i, sizeof p0);
                std::memcpy(&p1, cols[c + 1] + i, sizeof p1);
                for (std::size_t k = 0; k < 4; ++k) {
                    Lanes x;
                    std::memcpy(&x, rows[r + k] + i, sizeof x);
                    s[k][0] += x * p0;
                    s[k][1] += x * p1;
                }
            }
            for (std::size_t k = 0; k < 4; ++k) {
                finish(r + k, c, s[k][0]);
                finish(r + k, c + 1, s[k][1]);
            }
        }
        for (; c < nc; ++c) {
            for (std::size_t k = 0; k < 4; ++k) single(r + k, c);
        }
    }
    for (; r < nr; ++r) {
        for (std::size_t c = 0; c < nc; ++c) single(r, c);
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ContractError("dot: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
    }
    return dot_unchecked(a, b);
}

inline double l2_norm(std::span<const double> v) noexcept { return std::sqrt(dot_unchecked(v, v)); }

/// Scales `v` to unit length in place. Zero vectors are left untouched.
inline void normalize_in_place(std::span<double> v) noexcept {
    const double n = l2_norm(v);
    if (n > 0.0) {
        for (double& x : v) x /= n;
    }
}

inline Vector normalized(Vector v) {
    normalize_in_place(v);
    return v;
}

inline bool all_finite(std::span<const double> v) noexcept {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace aggdet
