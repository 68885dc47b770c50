#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "geometry.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace mw {

struct RandMatConfig {
    int n = 1000;
    int m = 768;
    double u_norm = 1.0;
    std::uint64_t seed = 7;
    int trials = 1;
    unsigned threads = 1;
};

inline std::pair<double, double> mp_bounds(double gamma)
{
    if (!(gamma > 0.0)) throw input_error("gamma must be positive");
    const double s = std::sqrt(gamma);
    return {(1 - s) * (1 - s), (1 + s) * (1 + s)};
}

// n x m matrix of i.i.d. standard normals, one counter stream per row.
inline Mat gaussian_matrix(int n, int m, std::uint64_t seed, unsigned threads = 1)
{
    Mat A(n, m);
    parallel_for(std::size_t(n), threads, [&](std::size_t i) {
        Rng rng(derive_seed(seed, "gauss-row", i));
        for (int j = 0; j < m; ++j) A(Eigen::Index(i), j) = rng.normal();
    });
    return A;
}

inline Vec random_unit(int m, std::uint64_t seed)
{
    Rng rng(seed);
    Vec u(m);
    for (int j = 0; j < m; ++j) u[j] = rng.normal();
    return u / u.norm();
}

// Rows b_i = a_i / |a_i|.
inline Mat row_normalized(const Mat& A)
{
    Mat B = A;
    for (Eigen::Index i = 0; i < B.rows(); ++i) B.row(i) /= B.row(i).norm();
    return B;
}

// Rows c_i = (b_i + u) / |b_i + u| with |u| = u_norm along a seeded direction.
inline Mat c_matrix(const RandMatConfig& cfg)
{
    if (cfg.n < 2 || cfg.m < 2) throw input_error("n and m must be >= 2");
    const Mat B = row_normalized(gaussian_matrix(cfg.n, cfg.m, derive_seed(cfg.seed, "A"), cfg.threads));
    const Vec u = cfg.u_norm * random_unit(cfg.m, derive_seed(cfg.seed, "u"));
    Mat C = B.rowwise() + u.transpose();
    for (Eigen::Index i = 0; i < C.rows(); ++i) C.row(i) /= C.row(i).norm();
    return C;
}

struct SingularValueCheck {
    double empirical = 0.0;
    double predicted = 0.0;
    double rel_err = 0.0;
    bool converged = false;
};

inline double predicted_top_singular(int n, int m)
{
    return std::sqrt(double(m)) * (1.0 + std::sqrt(double(n) / double(m)));
}

inline SingularValueCheck largest_singular_value_check(int n, int m, std::uint64_t seed, unsigned threads = 1)
{
    if (n < 32 || m < 32) throw input_error("largest_singular_value_check needs n, m >= 32");
    const Mat A = gaussian_matrix(n, m, derive_seed(seed, "A"), threads);
    PowerIterOptions opt;
    opt.seed = derive_seed(seed, "power");
    opt.max_iters = 1000;
    const auto p = power_iteration(A, opt);
    SingularValueCheck r;
    r.empirical = p.sigma;
    r.predicted = predicted_top_singular(n, m);
    r.rel_err = std::abs(r.empirical - r.predicted) / r.predicted;
    r.converged = p.converged;
    return r;
}

struct MomentStats {
    double mean = 0.0;
    double std = 0.0;
    int trials = 0;
};

// Inner products b_i . b_j of independent uniform unit vectors in R^m.
inline MomentStats row_inner_product_stats(int m, int trials, std::uint64_t seed, unsigned threads = 1)
{
    if (m < 2) throw input_error("row_inner_product_stats needs m >= 2");
    if (trials < 1) throw input_error("trials must be >= 1");
    std::vector<double> x(static_cast<std::size_t>(trials));
    parallel_for(x.size(), threads, [&](std::size_t t) {
        Rng rng(derive_seed(seed, "row-pair", t));
        Vec a(m), b(m);
        for (int j = 0; j < m; ++j) a[j] = rng.normal();
        for (int j = 0; j < m; ++j) b[j] = rng.normal();
        x[t] = a.dot(b) / (a.norm() * b.norm());
    });
    MomentStats s;
    s.trials = trials;
    double sum = 0;
    for (double v : x) sum += v;
    s.mean = sum / trials;
    double ss = 0;
    for (double v : x) ss += (v - s.mean) * (v - s.mean);
    s.std = trials > 1 ? std::sqrt(ss / (trials - 1)) : 0.0;
    return s;
}

struct OverlapPoint {
    double u_norm = 0.0;
    double overlap = 0.0;
    bool converged = false;
};

inline std::vector<OverlapPoint> overlap_sweep(const RandMatConfig& cfg, const std::vector<double>& u_norms)
{
    for (std::size_t i = 1; i < u_norms.size(); ++i)
        if (u_norms[i] < u_norms[i - 1]) throw input_error("u_norms must be sorted ascending");
    std::vector<OverlapPoint> out;
    for (double u : u_norms) {
        RandMatConfig c = cfg;
        c.u_norm = u;
        const Mat C = c_matrix(c);
        PowerIterOptions opt;
        opt.seed = derive_seed(cfg.seed, "power");
        try {
            const auto b = estimate_bias(C, opt);
            out.push_back({u, b.overlap, true});
        } catch (const NonConvergence& e) {
            out.push_back({u, e.partial().overlap, false});
        }
    }
    return out;
}

// |e* . v*| with v* from a dense symmetric eigensolve of C^T C.
inline double overlap_dense(const Mat& C)
{
    const Vec mean = C.colwise().mean().transpose();
    const Eigen::SelfAdjointEigenSolver<Mat> es(C.transpose() * C);
    const Vec v = es.eigenvectors().col(es.eigenvalues().size() - 1);
    return std::abs(mean.normalized().dot(v));
}

// Fraction of eigenvalues of (1/m) A A^T inside [lambda- - slack, lambda+ + slack].
inline double mp_fraction_within(int n, int m, std::uint64_t seed, double slack, unsigned threads = 1)
{
    if (n > 2000) throw input_error("dense eigensolve limited to n <= 2000");
    const Mat A = gaussian_matrix(n, m, derive_seed(seed, "A"), threads);
    const Mat W = (A * A.transpose()) / double(m);
    const Eigen::SelfAdjointEigenSolver<Mat> es(W, Eigen::EigenvaluesOnly);
    const auto [lo, hi] = mp_bounds(double(n) / double(m));
    int inside = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double l = es.eigenvalues()[i];
        if (l >= lo - slack && l <= hi + slack) ++inside;
    }
    return double(inside) / double(n);
}

} // namespace mw
