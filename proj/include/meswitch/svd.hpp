#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "meswitch/numerics.hpp"

namespace meswitch {

/// A = U * diag(s) * V with r = min(m, n). U is m x r with orthonormal
/// columns, V is r x n with orthonormal rows, s is non-increasing.
struct SvdResult {
    DenseMatrix u;
    std::vector<double> s;
    DenseMatrix v;
};

struct SvdOptions {
    double tolerance = 1e-10;
    int max_sweeps = 60;
};

namespace detail {

// Column-major FP64 scratch for the one-sided Jacobi sweeps.
struct ColumnSet {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    double* col(std::size_t j) { return data.data() + j * rows; }
    const double* col(std::size_t j) const { return data.data() + j * rows; }
};

inline double dot(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

// Replace near-zero columns of an orthonormal-column set with unit vectors
// orthogonal to the rest (Gram-Schmidt against the standard basis).
inline void complete_orthonormal(ColumnSet& q, const std::vector<bool>& valid) {
    for (std::size_t j = 0; j < q.cols; ++j) {
        if (valid[j]) {
            continue;
        }
        for (std::size_t e = 0; e < q.rows; ++e) {
            std::vector<double> cand(q.rows, 0.0);
            cand[e] = 1.0;
            for (std::size_t p = 0; p < q.cols; ++p) {
                if (p == j || (!valid[p] && p > j)) {
                    continue;
                }
                const double proj = dot(cand.data(), q.col(p), q.rows);
                for (std::size_t i = 0; i < q.rows; ++i) {
                    cand[i] -= proj * q.col(p)[i];
                }
            }
            const double norm = std::sqrt(dot(cand.data(), cand.data(), q.rows));
            if (norm > 1e-6) {
                for (std::size_t i = 0; i < q.rows; ++i) {
                    q.col(j)[i] = cand[i] / norm;
                }
                break;
            }
        }
    }
}

// Requires a.rows() >= a.cols().
inline SvdResult svd_tall(const DenseMatrix& a, const SvdOptions& opt) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();

    ColumnSet w{m, n, std::vector<double>(m * n)};
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            w.col(j)[i] = a(i, j);
        }
    }
    ColumnSet v{n, n, std::vector<double>(n * n, 0.0)};
    for (std::size_t j = 0; j < n; ++j) {
        v.col(j)[j] = 1.0;
    }

    for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double* wp = w.col(p);
                double* wq = w.col(q);
                const double alpha = dot(wp, wp, m);
                const double beta = dot(wq, wq, m);
                const double gamma = dot(wp, wq, m);
                if (gamma == 0.0 || std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) {
                    continue;
                }
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = wp[i];
                    const double y = wq[i];
                    wp[i] = c * x - s * y;
                    wq[i] = s * x + c * y;
                }
                double* vp = v.col(p);
                double* vq = v.col(q);
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = vp[i];
                    const double y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) {
            break;
        }
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        sigma[j] = std::sqrt(dot(w.col(j), w.col(j), m));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double scale = sigma.empty() ? 0.0 : sigma[order[0]];
    ColumnSet u{m, n, std::vector<double>(m * n, 0.0)};
    std::vector<bool> valid(n, false);
    SvdResult out{DenseMatrix(m, n), std::vector<double>(n), DenseMatrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.s[k] = sigma[j];
        if (sigma[j] > 1e-12 * std::max(scale, 1e-300) && sigma[j] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) {
                u.col(k)[i] = w.col(j)[i] / sigma[j];
            }
            valid[k] = true;
        } else {
            out.s[k] = 0.0;
        }
        for (std::size_t i = 0; i < n; ++i) {
            out.v(k, i) = static_cast<float>(v.col(j)[i]);
        }
    }
    complete_orthonormal(u, valid);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < m; ++i) {
            out.u(i, k) = static_cast<float>(u.col(k)[i]);
        }
    }
    return out;
}

}  // namespace detail

/// Thin SVD by one-sided (Hestenes) Jacobi rotations in FP64.
inline SvdResult svd(const DenseMatrix& a, const SvdOptions& opt = {}) {
    require(a.all_finite(), ErrorKind::non_finite, "svd: input has non-finite entries");
    if (a.rows() >= a.cols()) {
        return detail::svd_tall(a, opt);
    }
    // A^T = U' S V'  =>  A = V'^T S U'^T
    SvdResult t = detail::svd_tall(transpose(a), opt);
    return SvdResult{transpose(t.v), std::move(t.s), transpose(t.u)};
}

}  // namespace meswitch
