#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "koshur/cfm.hpp"

using namespace koshur;
using Catch::Approx;

namespace {

Mat random_mat(Rng& rng, std::size_t rows, std::size_t cols) {
    Mat m(rows, cols);
    for (auto& v : m.data()) v = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("path endpoints") {
    Rng rng(1);
    const Mat x0 = random_mat(rng, 4, 8), x1 = random_mat(rng, 4, 8);

    auto at0 = cfm::sample_flow_point(x0, x1, 0.0, 0.0);
    REQUIRE(at0.x_t.data() == x0.data());
    for (std::size_t i = 0; i < x0.data().size(); ++i)
        REQUIRE(at0.u_t.data()[i] == x1.data()[i] - x0.data()[i]);

    auto at1 = cfm::sample_flow_point(x0, x1, 1.0, 0.0);
    REQUIRE(at1.x_t.data() == x1.data());

    const double sm = 1e-4;
    auto at1s = cfm::sample_flow_point(x0, x1, 1.0, sm);
    for (std::size_t i = 0; i < x0.data().size(); ++i)
        REQUIRE(at1s.x_t.data()[i] ==
                Approx(sm * x0.data()[i] + x1.data()[i]).margin(1e-15));
}

TEST_CASE("finite differences in t recover the velocity target") {
    Rng rng(2);
    const Mat x0 = random_mat(rng, 3, 5), x1 = random_mat(rng, 3, 5);
    const double sm = 1e-4, h = 1e-6;
    for (double t : {0.1, 0.37, 0.5, 0.93}) {
        auto mid = cfm::sample_flow_point(x0, x1, t, sm);
        auto lo = cfm::sample_flow_point(x0, x1, t - h, sm);
        auto hi = cfm::sample_flow_point(x0, x1, t + h, sm);
        for (std::size_t i = 0; i < x0.data().size(); ++i) {
            const double fd = (hi.x_t.data()[i] - lo.x_t.data()[i]) / (2.0 * h);
            REQUIRE(fd == Approx(mid.u_t.data()[i]).margin(1e-6));
        }
    }
}

TEST_CASE("shape and range validation") {
    Mat a(2, 3), b(3, 2);
    REQUIRE_THROWS_AS(cfm::sample_flow_point(a, b, 0.5, 0.0), cfm::ShapeMismatch);
    Mat c(2, 3);
    REQUIRE_THROWS_AS(cfm::sample_flow_point(a, c, -0.1, 0.0), Error);
    REQUIRE_THROWS_AS(cfm::sample_flow_point(a, c, 1.1, 0.0), Error);
    REQUIRE_THROWS_AS(cfm::sample_flow_point(a, c, 0.5, 1.0), Error);
}

TEST_CASE("loss at the target and at a unit offset") {
    Rng rng(3);
    const Mat x0 = random_mat(rng, 6, 7), x1 = random_mat(rng, 6, 7);
    auto fs = cfm::sample_flow_point(x0, x1, 0.42, 1e-4);

    REQUIRE(cfm::cfm_loss(fs.u_t, fs) == 0.0);

    Mat off = fs.u_t;
    for (auto& v : off.data()) v += 1.0;
    REQUIRE(cfm::cfm_loss(off, fs) == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("loss equals a naive double-loop oracle") {
    Rng rng(4);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t rows = 1 + rng.below(9), cols = 1 + rng.below(12);
        const Mat x0 = random_mat(rng, rows, cols), x1 = random_mat(rng, rows, cols);
        auto fs = cfm::sample_flow_point(x0, x1, rng.uniform(), 1e-4);
        const Mat pred = random_mat(rng, rows, cols);
        std::vector<std::uint8_t> mask(rows);
        std::size_t active = 0;
        for (auto& m : mask) {
            m = rng.uniform() < 0.7 ? 1 : 0;
            active += m;
        }
        if (active == 0) {
            mask[0] = 1;
            active = 1;
        }

        double acc = 0.0;
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t d = 0; d < cols; ++d)
                if (mask[i]) {
                    const double r = pred(i, d) - fs.u_t(i, d);
                    acc += r * r;
                }
        const double oracle = acc / (static_cast<double>(active) * static_cast<double>(cols));
        REQUIRE(cfm::cfm_loss(pred, fs, mask) == Approx(oracle).margin(1e-7));
    }
}

TEST_CASE("masked-out frames cannot influence the loss") {
    Rng rng(5);
    const Mat x0 = random_mat(rng, 5, 4), x1 = random_mat(rng, 5, 4);
    auto fs = cfm::sample_flow_point(x0, x1, 0.6, 1e-4);
    Mat pred = random_mat(rng, 5, 4);
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 0};
    const double base = cfm::cfm_loss(pred, fs, mask);
    for (std::size_t d = 0; d < 4; ++d) {
        pred(2, d) = 1e9;
        pred(4, d) = -1e9;
    }
    REQUIRE(cfm::cfm_loss(pred, fs, mask) == base);

    REQUIRE_THROWS_AS(cfm::cfm_loss(pred, fs, std::vector<std::uint8_t>(5, 0)),
                      cfm::EmptyMask);
    REQUIRE_THROWS_AS(cfm::cfm_loss(pred, fs, std::vector<std::uint8_t>(4, 1)),
                      cfm::ShapeMismatch);
}

TEST_CASE("loss gradient matches central finite differences") {
    Rng rng(6);
    const Mat x0 = random_mat(rng, 4, 5), x1 = random_mat(rng, 4, 5);
    auto fs = cfm::sample_flow_point(x0, x1, 0.3, 1e-4);
    Mat pred = random_mat(rng, 4, 5);
    std::vector<std::uint8_t> mask{1, 0, 1, 1};
    const Mat g = cfm::cfm_loss_grad(pred, fs, mask);
    const double eps = 1e-6;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t d = 0; d < 5; ++d) {
            Mat up = pred, dn = pred;
            up(i, d) += eps;
            dn(i, d) -= eps;
            const double fd =
                (cfm::cfm_loss(up, fs, mask) - cfm::cfm_loss(dn, fs, mask)) / (2.0 * eps);
            if (!mask[i]) {
                REQUIRE(g(i, d) == 0.0);
                REQUIRE(fd == 0.0);
            } else if (std::abs(fd) > 1e-8) {
                REQUIRE(g(i, d) == Approx(fd).epsilon(1e-5));
            } else {
                REQUIRE(g(i, d) == Approx(fd).margin(1e-8));
            }
        }
    }
}

TEST_CASE("zero field leaves the state untouched") {
    Rng rng(7);
    const Mat x0 = random_mat(rng, 3, 6);
    cfm::SamplerConfig cfg;
    cfg.n_steps = 17;
    const Mat out = cfm::euler_sample(
        [](const Mat& x, double) { return Mat(x.rows(), x.cols()); }, x0, cfg);
    REQUIRE(out.data() == x0.data());
}

TEST_CASE("point-mass transport field reaches the target") {
    Rng rng(8);
    Mat m(2, 10);
    for (auto& v : m.data()) v = rng.normal() * 3.0;
    cfm::SamplerConfig cfg;
    cfg.n_steps = 100;
    for (int trial = 0; trial < 100; ++trial) {
        const Mat x0 = random_mat(rng, 2, 10);
        const Mat out = cfm::euler_sample(
            [&m](const Mat& x, double t) {
                Mat v(x.rows(), x.cols());
                const double inv = 1.0 / (1.0 - t);  // t stays <= 1 - 1/n
                for (std::size_t i = 0; i < v.data().size(); ++i)
                    v.data()[i] = (m.data()[i] - x.data()[i]) * inv;
                return v;
            },
            x0, cfg);
        for (std::size_t i = 0; i < m.data().size(); ++i)
            REQUIRE(out.data()[i] == Approx(m.data()[i]).margin(1e-3));
    }
}

TEST_CASE("linear relaxation field error shrinks as steps double") {
    Rng rng(9);
    Mat m(1, 4);
    for (auto& v : m.data()) v = rng.normal();
    const Mat x0 = random_mat(rng, 1, 4);

    auto field = [&m](const Mat& x, double) {
        Mat v(x.rows(), x.cols());
        for (std::size_t i = 0; i < v.data().size(); ++i)
            v.data()[i] = m.data()[i] - x.data()[i];
        return v;
    };
    // exact solution of x' = m - x at t=1
    std::vector<double> exact(4);
    for (std::size_t i = 0; i < 4; ++i)
        exact[i] = m.data()[i] + (x0.data()[i] - m.data()[i]) * std::exp(-1.0);

    double prev = 1e18;
    for (int n : {10, 20, 40}) {
        cfm::SamplerConfig cfg;
        cfg.n_steps = n;
        const Mat out = cfm::euler_sample(field, x0, cfg);
        double err = 0.0;
        for (std::size_t i = 0; i < 4; ++i) err = std::max(err, std::abs(out.data()[i] - exact[i]));
        REQUIRE(err < prev);
        // Euler on x' = m - x has terminal factor (1-1/n)^n vs e^-1
        const double factor = std::abs(std::pow(1.0 - 1.0 / n, n) - std::exp(-1.0));
        double worst0 = 0.0;
        for (std::size_t i = 0; i < 4; ++i)
            worst0 = std::max(worst0, std::abs(x0.data()[i] - m.data()[i]));
        REQUIRE(err <= factor * worst0 * (1.0 + 1e-9));
        prev = err;
    }
}

TEST_CASE("divergence raises NonFiniteState") {
    Mat x0(1, 2);
    x0.data() = {1.0, -1.0};
    cfm::SamplerConfig cfg;
    cfg.n_steps = 8;
    REQUIRE_THROWS_AS(cfm::euler_sample(
                          [](const Mat& x, double) {
                              Mat v(x.rows(), x.cols());
                              for (std::size_t i = 0; i < v.data().size(); ++i)
                                  v.data()[i] = x.data()[i] * 1e200;
                              return v;
                          },
                          x0, cfg),
                      cfm::NonFiniteState);

    cfg.n_steps = 0;
    REQUIRE_THROWS_AS(cfm::euler_sample([](const Mat& x, double) { return x; }, x0, cfg),
                      Error);
    cfg.n_steps = 4;
    cfg.sigma_min = 1.0;
    REQUIRE_THROWS_AS(cfm::euler_sample([](const Mat& x, double) { return x; }, x0, cfg),
                      Error);
}
