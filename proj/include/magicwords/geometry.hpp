#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "rng.hpp"

namespace mw {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double unit_tol = 1e-9;

inline Vec normalize(const Vec& x)
{
    const double n = x.norm();
    if (!(n > 0.0) || !std::isfinite(n))
        throw numeric_error("cannot normalize vector with norm " + std::to_string(n));
    // Already unit to rounding: leave untouched so normalize is idempotent.
    if (std::abs(n - 1.0) <= 8 * std::numeric_limits<double>::epsilon()) return x;
    return x / n;
}

inline bool is_unit(const Vec& x, double tol = 1e-6)
{
    return std::abs(x.norm() - 1.0) <= tol;
}

inline double cosine_similarity(const Vec& a, const Vec& b)
{
    if (a.size() != b.size())
        throw input_error("dimension mismatch: " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
    return std::clamp(a.dot(b), -1.0, 1.0);
}

// Cosine for arbitrary nonzero vectors.
inline double cosine_any(const Vec& a, const Vec& b)
{
    return std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0);
}

struct BiasDirection {
    Vec mean;
    Vec e_star;
    Vec v_star;
    double overlap = 0.0;
    std::size_t sample_count = 0;
    double mean_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct PowerIterOptions {
    int max_iters = 500;
    double tol = 1e-12;
    std::uint64_t seed = 0x5eedULL;
};

class NonConvergence : public Error {
public:
    NonConvergence(const std::string& msg, BiasDirection partial)
        : Error(ErrorKind::numeric, msg), partial_(std::move(partial)) {}
    const BiasDirection& partial() const noexcept { return partial_; }

private:
    BiasDirection partial_;
};

// Principal right singular vector of X by power iteration on X^T X.
// Returns the iterate; `converged` reports whether successive iterates
// reached cosine > 1 - tol within max_iters.
struct PowerResult {
    Vec v;
    double sigma = 0.0;
    int iterations = 0;
    bool converged = false;
};

inline PowerResult power_iteration(const Mat& X, const PowerIterOptions& opt)
{
    const Eigen::Index d = X.cols();
    Rng rng(derive_seed(opt.seed, "power-start"));
    Vec v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = rng.normal();
    v.normalize();

    const bool use_gram = X.rows() >= d;
    Mat G;
    if (use_gram) G = X.transpose() * X;
    auto apply = [&](const Vec& x) -> Vec {
        if (use_gram) return G * x;
        return X.transpose() * (X * x);
    };

    PowerResult res;
    for (int it = 1; it <= opt.max_iters; ++it) {
        Vec w = apply(v);
        const double n = w.norm();
        if (!(n > 0.0)) throw numeric_error("power iteration collapsed to zero");
        w /= n;
        const double c = w.dot(v);
        v = std::move(w);
        res.iterations = it;
        if (c > 1.0 - opt.tol) {
            res.converged = true;
            break;
        }
    }
    res.v = v;
    res.sigma = std::sqrt(v.dot(apply(v)));
    return res;
}

inline BiasDirection estimate_bias(const Mat& X, const PowerIterOptions& opt = {},
                                   bool require_unit_rows = true)
{
    if (X.rows() < 2) throw input_error("estimate_bias needs at least 2 rows");
    if (X.cols() < 2) throw input_error("estimate_bias needs dimension >= 2");
    if (require_unit_rows) {
        for (Eigen::Index i = 0; i < X.rows(); ++i)
            if (std::abs(X.row(i).norm() - 1.0) > 1e-6)
                throw input_error("row " + std::to_string(i) + " is not unit-norm");
    }
    BiasDirection b;
    b.sample_count = std::size_t(X.rows());
    b.mean = X.colwise().mean().transpose();
    b.mean_norm = b.mean.norm();
    if (b.mean_norm < 1e-12) throw input_error("degenerate mean: e* undefined (|mean| < 1e-12)");
    b.e_star = b.mean / b.mean_norm;

    const PowerResult p = power_iteration(X, opt);
    b.v_star = p.v;
    if (b.v_star.dot(b.e_star) < 0) b.v_star = -b.v_star;
    b.overlap = std::abs(b.e_star.dot(b.v_star));
    b.iterations = p.iterations;
    b.converged = p.converged;
    if (!p.converged)
        throw NonConvergence("power iteration did not converge after " +
                                 std::to_string(opt.max_iters) +
                                 " iterations; last overlap " + std::to_string(b.overlap),
                             b);
    return b;
}

struct Histogram {
    std::vector<std::size_t> counts;
    std::vector<double> edges; // bins + 1 values over [-1, 1]
    double mu = 0.0;
    double sigma = 0.0;
    std::size_t n = 0;
};

inline Histogram similarity_histogram(const Mat& X, const Vec& direction, int bins)
{
    if (bins < 2) throw input_error("histogram needs at least 2 bins");
    if (X.rows() == 0) throw input_error("empty input");
    if (X.cols() != direction.size())
        throw input_error("dimension mismatch: " + std::to_string(X.cols()) + " vs " +
                          std::to_string(direction.size()));
    Histogram h;
    h.n = std::size_t(X.rows());
    h.counts.assign(std::size_t(bins), 0);
    for (int i = 0; i <= bins; ++i) h.edges.push_back(-1.0 + 2.0 * i / bins);
    const Vec c = (X * direction).cwiseMax(-1.0).cwiseMin(1.0);
    for (Eigen::Index i = 0; i < c.size(); ++i) {
        auto k = static_cast<int>(std::floor((c[i] + 1.0) / 2.0 * bins));
        h.counts[std::size_t(std::clamp(k, 0, bins - 1))]++;
    }
    h.mu = c.mean();
    if (c.size() > 1)
        h.sigma = std::sqrt((c.array() - h.mu).square().sum() / double(c.size() - 1));
    return h;
}

struct PropositionReport {
    double theta_star = 0.0;
    double bound = 0.0;
    std::vector<double> per_text_cosines;
    bool all_pass = false;
    double min_cosine = 0.0;
};

inline double proposition_bound(double theta_star)
{
    if (!(theta_star > 0.0) || !(theta_star < std::numbers::pi / 4))
        throw input_error("bound undefined: theta* must lie in (0, pi/4)");
    const double t = std::tan(theta_star);
    return std::sqrt(1.0 - t * t);
}

inline PropositionReport check_proposition(const Mat& suffixed, const Vec& reference,
                                           double theta_star, double slack = 1e-9)
{
    PropositionReport r;
    r.theta_star = theta_star;
    r.bound = proposition_bound(theta_star);
    if (suffixed.rows() == 0) throw input_error("no suffixed embeddings");
    if (suffixed.cols() != reference.size())
        throw input_error("dimension mismatch: " + std::to_string(suffixed.cols()) + " vs " +
                          std::to_string(reference.size()));
    r.min_cosine = 1.0;
    for (Eigen::Index i = 0; i < suffixed.rows(); ++i) {
        const double c = cosine_similarity(suffixed.row(i).transpose(), reference);
        r.per_text_cosines.push_back(c);
        r.min_cosine = std::min(r.min_cosine, c);
    }
    r.all_pass = r.min_cosine >= r.bound - slack;
    return r;
}

} // namespace mw
