#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include <Eigen/SVD>

#include <magicwords/geometry.hpp>
#include <magicwords/randmat.hpp>

#include "test_support.hpp"

using Catch::Matchers::WithinAbs;
using mw::Mat;
using mw::Vec;

namespace {

Vec v2(double a, double b)
{
    Vec v(2);
    v << a, b;
    return v;
}

// Unit vector at angle phi from `axis`, rotated toward a random orthogonal direction.
Vec at_angle(const Vec& axis, double phi, std::uint64_t seed)
{
    Vec r = testing::random_unit(int(axis.size()), seed);
    r -= axis * axis.dot(r);
    r.normalize();
    return std::cos(phi) * axis + std::sin(phi) * r;
}

} // namespace

TEST_CASE("cosine similarity closed forms", "[geometry]")
{
    Vec e1 = Vec::Zero(5);
    e1[0] = 1;
    CHECK(mw::cosine_similarity(e1, e1) == 1.0);
    CHECK(mw::cosine_similarity(v2(1, 0), v2(0, 1)) == 0.0);
    CHECK_THAT(mw::cosine_similarity(v2(1, 0), v2(1 / std::sqrt(2.0), 1 / std::sqrt(2.0))),
               WithinAbs(0.7071067811865476, 1e-15));
    const Vec a = testing::random_unit(7, 1), b = testing::random_unit(7, 2);
    CHECK(mw::cosine_similarity(a, b) == mw::cosine_similarity(b, a));
    // Rounding past 1 is clamped.
    CHECK(mw::cosine_similarity(v2(1 + 1e-15, 0), v2(1, 0)) == 1.0);
}

TEST_CASE("cosine similarity names both dimensions on mismatch", "[geometry]")
{
    try {
        (void)mw::cosine_similarity(Vec::Ones(3), Vec::Ones(4));
        FAIL("no error");
    } catch (const mw::Error& e) {
        CHECK(e.kind() == mw::ErrorKind::input);
        CHECK(std::string(e.what()).find('3') != std::string::npos);
        CHECK(std::string(e.what()).find('4') != std::string::npos);
    }
}

TEST_CASE("normalize gives unit vectors and is idempotent", "[geometry]")
{
    for (std::uint64_t s = 0; s < 200; ++s) {
        const Vec x = testing::gaussian(17, 1, s).col(0) * (0.001 + double(s));
        const Vec n1 = mw::normalize(x);
        CHECK(std::abs(n1.norm() - 1.0) <= 1e-9);
        const Vec n2 = mw::normalize(n1);
        CHECK((n2.array() == n1.array()).all());
    }
    CHECK_THROWS_AS(mw::normalize(Vec::Zero(3)), mw::Error);
}

TEST_CASE("estimate_bias on rank-one input", "[geometry]")
{
    const Vec u = testing::random_unit(9, 5);
    const Mat X = u.transpose().replicate(20, 1);
    const auto b = mw::estimate_bias(X);
    CHECK((b.e_star - u).norm() < 1e-12);
    CHECK((b.v_star - u).norm() < 1e-12);
    CHECK_THAT(b.overlap, WithinAbs(1.0, 1e-12));
    CHECK(b.sample_count == 20);
}

TEST_CASE("estimate_bias rejects degenerate and malformed input", "[geometry]")
{
    Mat X(2, 3);
    X << 1, 0, 0, -1, 0, 0;
    try {
        (void)mw::estimate_bias(X);
        FAIL("no error");
    } catch (const mw::Error& e) {
        CHECK(std::string(e.what()).find("degenerate mean") != std::string::npos);
    }
    CHECK_THROWS_AS(mw::estimate_bias(Mat::Ones(1, 3) / std::sqrt(3.0)), mw::Error);
    CHECK_THROWS_AS(mw::estimate_bias(Mat::Ones(4, 3)), mw::Error); // rows not unit
}

TEST_CASE("estimate_bias reports non-convergence with the last overlap", "[geometry]")
{
    // Two equal leading singular values: the iterate never settles.
    Mat X(4, 3);
    X << 1, 0, 0, 0, 1, 0, -1, 0, 0, 0, 1, 0;
    X.row(2) << 0.6, 0.8, 0;
    mw::PowerIterOptions opt;
    opt.max_iters = 3;
    opt.tol = 1e-300;
    try {
        (void)mw::estimate_bias(X, opt);
        FAIL("no error");
    } catch (const mw::NonConvergence& e) {
        CHECK(e.partial().iterations == 3);
        CHECK(!e.partial().converged);
        CHECK_THAT(e.partial().overlap, WithinAbs(std::abs(e.partial().e_star.dot(e.partial().v_star)), 1e-12));
    }
}

TEST_CASE("power iteration agrees with a dense SVD oracle", "[geometry]")
{
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Mat A = testing::gaussian(200, 32, 1000 + seed);
        mw::PowerIterOptions opt;
        opt.seed = seed;
        opt.max_iters = 5000;
        const auto p = mw::power_iteration(A, opt);
        REQUIRE(p.converged);
        const Eigen::JacobiSVD<Mat> svd(A, Eigen::ComputeThinV);
        const Vec v = svd.matrixV().col(0);
        CHECK(std::abs(p.v.dot(v)) >= 1 - 1e-8);
        CHECK_THAT(p.sigma, WithinAbs(svd.singularValues()[0], 1e-8 * svd.singularValues()[0]));
    }
}

TEST_CASE("bias estimate on the shifted-mean construction", "[geometry]")
{
    mw::RandMatConfig cfg;
    cfg.n = 1000;
    cfg.m = 768;
    cfg.u_norm = 1.0;
    const Mat C = mw::c_matrix(cfg);
    const auto b = mw::estimate_bias(C);
    CHECK(b.overlap >= 0.999);
    CHECK(b.v_star.dot(b.e_star) >= 0);
    CHECK_THAT(b.overlap, WithinAbs(std::abs(b.e_star.dot(b.v_star)), 1e-12));
    CHECK(((b.mean / b.mean.norm()) - b.e_star).norm() < 1e-15);

    // Dense oracle on a smaller instance of the same construction.
    cfg.n = 300;
    cfg.m = 64;
    const Mat S = mw::c_matrix(cfg);
    const auto bs = mw::estimate_bias(S);
    const Eigen::JacobiSVD<Mat> svd(S, Eigen::ComputeThinV);
    CHECK(std::abs(bs.v_star.dot(svd.matrixV().col(0))) >= 1 - 1e-8);
}

TEST_CASE("similarity histogram basics", "[geometry]")
{
    const Vec u = testing::random_unit(6, 3);
    const auto h = mw::similarity_histogram(u.transpose().replicate(10, 1), u, 8);
    CHECK(h.counts.back() == 10);
    CHECK(h.sigma == 0.0);
    CHECK_THAT(h.mu, WithinAbs(1.0, 1e-15));

    // Rows mirrored through the plane orthogonal to u.
    Mat X(40, 6);
    for (int i = 0; i < 20; ++i) {
        const Vec x = testing::random_unit(6, 100 + std::uint64_t(i));
        X.row(2 * i) = x.transpose();
        X.row(2 * i + 1) = (x - 2 * u * u.dot(x)).transpose();
    }
    const auto hs = mw::similarity_histogram(X, u, 10);
    CHECK(std::abs(hs.mu) <= 1e-12);
    std::size_t total = 0;
    for (auto c : hs.counts) total += c;
    CHECK(total == 40);

    CHECK_THROWS_AS(mw::similarity_histogram(X, u, 1), mw::Error);
    CHECK_THROWS_AS(mw::similarity_histogram(Mat(0, 6), u, 4), mw::Error);
}

TEST_CASE("histogram mean matches a Monte-Carlo resample of the construction", "[geometry]")
{
    mw::RandMatConfig cfg;
    cfg.n = 1000;
    cfg.m = 768;
    cfg.u_norm = 1.0;
    const Mat C = mw::c_matrix(cfg);
    const Vec u = cfg.u_norm * mw::random_unit(cfg.m, mw::derive_seed(cfg.seed, "u"));
    // Fresh rows (b + u)/|b + u| with the same u.
    auto fresh = [&](int n, std::uint64_t seed) {
        mw::Rng rng(seed);
        Mat D(n, cfg.m);
        for (int i = 0; i < n; ++i) {
            Vec b(cfg.m);
            for (int j = 0; j < cfg.m; ++j) b[j] = rng.normal();
            D.row(i) = (b / b.norm() + u).normalized().transpose();
        }
        return D;
    };
    // Direction fitted on an independent sample, so mu over C has no in-sample fit bias.
    const Mat D = fresh(1000, 12345);
    const Vec dir = mw::estimate_bias(D).e_star;
    const auto h = mw::similarity_histogram(C, dir, 50);

    const Mat O = fresh(20000, 987654321);
    const double mu_oracle = (O * dir).mean();
    CHECK(std::abs(h.mu - mu_oracle) <= 2 * h.sigma / std::sqrt(double(h.n)));
}

TEST_CASE("proposition bound closed forms and domain", "[geometry]")
{
    CHECK_THAT(mw::proposition_bound(std::numbers::pi / 6), WithinAbs(std::sqrt(2.0 / 3.0), 1e-15));
    CHECK_THAT(mw::proposition_bound(std::numbers::pi / 6), WithinAbs(0.81650, 5e-6));
    CHECK_THROWS_AS(mw::proposition_bound(std::numbers::pi / 4), mw::Error);
    CHECK_THROWS_AS(mw::proposition_bound(1.0), mw::Error);
    CHECK_THROWS_AS(mw::proposition_bound(0.0), mw::Error);

    const Vec ref = testing::random_unit(8, 9);
    const auto r = mw::check_proposition(ref.transpose().replicate(5, 1), ref, 1e-6);
    CHECK(r.bound > 1 - 1e-11);
    CHECK(r.all_pass);
}

TEST_CASE("cone construction satisfies the bound for e* and v*", "[geometry]")
{
    const int d = 64;
    const double theta = std::numbers::pi / 6;
    const Vec c = testing::random_unit(d, 77);
    // Texts and suffixed texts inside a cone of half-angle theta/2 around c,
    // so every pair is within theta of each other.
    Mat S(200, d), W(200, d);
    for (int i = 0; i < 200; ++i) {
        S.row(i) = at_angle(c, theta / 2 * (i % 3 == 0 ? 1.0 : 0.7), 1000 + std::uint64_t(i)).transpose();
        W.row(i) = at_angle(c, theta / 2 * (i % 2 == 0 ? 1.0 : 0.5), 5000 + std::uint64_t(i)).transpose();
    }
    double min_pair = 1;
    for (int j = 0; j < W.rows(); ++j)
        for (int k = 0; k < S.rows(); ++k) min_pair = std::min(min_pair, W.row(j).dot(S.row(k)));
    REQUIRE(min_pair >= std::cos(theta) - 1e-12);

    const auto bias = mw::estimate_bias(S);
    const auto re = mw::check_proposition(W, bias.e_star, theta);
    const auto rv = mw::check_proposition(W, bias.v_star, theta);
    CHECK_THAT(re.bound, WithinAbs(0.81650, 5e-6));
    CHECK(re.all_pass);
    CHECK(rv.all_pass);
    CHECK(re.per_text_cosines.size() == 200);
    for (double x : re.per_text_cosines) CHECK(x >= re.bound);
}

TEST_CASE("near-bound fuzz never passes a violating vector", "[geometry]")
{
    const int d = 16;
    const double theta = std::numbers::pi / 6;
    const double bound = mw::proposition_bound(theta);
    const Vec ref = testing::random_unit(d, 1);
    mw::Rng rng(2024);
    int false_passes = 0, checked_fail = 0, checked_pass = 0;
    for (int i = 0; i < 5000; ++i) {
        // Offsets straddling the slack, down to a few ulps around bound - 1e-9.
        const double off = (rng.uniform() - 0.5) * (i % 2 ? 4e-9 : 4e-6);
        const double target = bound - 1e-9 + off;
        const Vec x = at_angle(ref, std::acos(target), 10000 + std::uint64_t(i));
        const long double realized = [&] {
            long double s = 0;
            for (int k = 0; k < d; ++k) s += (long double)x[k] * (long double)ref[k];
            return s;
        }();
        const auto r = mw::check_proposition(x.transpose(), ref, theta);
        if (realized < (long double)bound - 1e-9L - 1e-15L) {
            ++checked_fail;
            if (r.all_pass) ++false_passes;
        } else if (realized > (long double)bound - 1e-9L + 1e-15L) {
            ++checked_pass;
            CHECK(r.all_pass);
        }
    }
    CHECK(false_passes == 0);
    CHECK(checked_fail > 1000);
    CHECK(checked_pass > 1000);
}
