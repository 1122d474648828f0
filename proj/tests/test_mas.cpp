#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "koshur/mas.hpp"

using namespace koshur;
using Catch::Approx;

namespace {

constexpr double kTwoPi = 2.0 * 3.14159265358979323846;

Mat random_matrix(Rng& rng, std::size_t rows, std::size_t cols, bool integer_ties) {
    Mat m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            m(i, j) = integer_ties ? static_cast<double>(rng.below(5)) - 2.0
                                   : rng.uniform() * 10.0 - 5.0;
    return m;
}

void check_path_invariants(const mas::AlignmentPath& path, std::size_t t_text) {
    REQUIRE(path.front() == 0);
    REQUIRE(path.back() == static_cast<int>(t_text) - 1);
    for (std::size_t j = 1; j < path.size(); ++j) {
        const int d = path[j] - path[j - 1];
        REQUIRE(d >= 0);
        REQUIRE(d <= 1);
    }
}

}  // namespace

TEST_CASE("zero residual log-likelihood is the Gaussian normalizer") {
    Mat mu(3, 80), mel(3, 80);
    Rng rng(11);
    for (std::size_t d = 0; d < 80; ++d) {
        const double v = rng.normal();
        for (std::size_t i = 0; i < 3; ++i) {
            mu(i, d) = v + static_cast<double>(i);
            mel(i, d) = v + static_cast<double>(i);
        }
    }
    const Mat L = mas::log_likelihood_matrix(mu, mel, 1.0);
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE(L(i, i) == Approx(-40.0 * std::log(kTwoPi)).epsilon(1e-12));
    REQUIRE(-40.0 * std::log(kTwoPi) == Approx(-73.5150877).margin(1e-6));
}

TEST_CASE("1x1 log-likelihood reproduces the scalar Gaussian log-density") {
    Mat mu(1, 1), mel(1, 1);
    mu(0, 0) = 0.7;
    mel(0, 0) = -1.3;
    const double sigma = 0.4;
    const Mat L = mas::log_likelihood_matrix(mu, mel, sigma);
    const double r = (-1.3 - 0.7) / sigma;
    const double want = -0.5 * r * r - std::log(sigma) - 0.5 * std::log(kTwoPi);
    REQUIRE(L(0, 0) == Approx(want).epsilon(1e-12));
    // density integrates like a Gaussian: exp(want) equals pdf evaluated directly
    const double pdf = std::exp(-0.5 * r * r) / (sigma * std::sqrt(kTwoPi));
    REQUIRE(std::exp(L(0, 0)) == Approx(pdf).epsilon(1e-12));
}

TEST_CASE("sigma scaling matches the closed form per cell") {
    Rng rng(22);
    Mat mu(4, 6), mel(5, 6);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t d = 0; d < 6; ++d) mu(i, d) = rng.normal();
    for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t d = 0; d < 6; ++d) mel(j, d) = rng.normal();

    const double s1 = 0.9, s2 = 1.8;
    const Mat L1 = mas::log_likelihood_matrix(mu, mel, s1);
    const Mat L2 = mas::log_likelihood_matrix(mu, mel, s2);
    const double d_dims = 6.0;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            // residual term scales by (s1/s2)^2, normalizer shifts by D*log(s1/s2)
            double sq = 0.0;
            for (std::size_t d = 0; d < 6; ++d) {
                const double r = mel(j, d) - mu(i, d);
                sq += r * r;
            }
            const double want =
                -0.5 * sq / (s2 * s2) - d_dims * std::log(s2) - 0.5 * d_dims * std::log(kTwoPi);
            REQUIRE(L2(i, j) == Approx(want).epsilon(1e-12));
            const double shift = L2(i, j) - L1(i, j);
            const double analytic =
                -0.5 * sq * (1.0 / (s2 * s2) - 1.0 / (s1 * s1)) - d_dims * std::log(s2 / s1);
            REQUIRE(shift == Approx(analytic).margin(1e-10));
            (void)L1;
        }
    }
}

TEST_CASE("log_likelihood_matrix rejects bad input") {
    Mat mu(2, 3), mel(2, 4);
    REQUIRE_THROWS_AS(mas::log_likelihood_matrix(mu, mel), mas::ShapeMismatch);
    Mat ok(2, 3);
    REQUIRE_THROWS_AS(mas::log_likelihood_matrix(mu, ok, 0.0), Error);
    REQUIRE_THROWS_AS(mas::log_likelihood_matrix(mu, ok, -1.0), Error);
}

TEST_CASE("square matrix forces the diagonal") {
    Rng rng(33);
    const Mat L = random_matrix(rng, 5, 5, false);
    const auto path = mas::mas_search(L);
    REQUIRE(path == mas::AlignmentPath{0, 1, 2, 3, 4});
}

TEST_CASE("single grapheme absorbs every frame") {
    Rng rng(44);
    const Mat L = random_matrix(rng, 1, 7, false);
    REQUIRE(mas::mas_search(L) == mas::AlignmentPath{0, 0, 0, 0, 0, 0, 0});
}

TEST_CASE("too few frames is invalid") {
    Mat L(4, 3);
    L.fill(0.0);
    REQUIRE_THROWS_AS(mas::mas_search(L), mas::NoValidAlignment);
    REQUIRE_THROWS_AS(mas::brute_force_align(L), mas::NoValidAlignment);
}

TEST_CASE("hand-worked 2x3 cases, including the tie rule") {
    Mat L(2, 3);
    // all candidate paths score equally: tie resolves to the transition-early
    // assignment, the reverse-lexicographically larger one
    L.fill(0.0);
    REQUIRE(mas::mas_search(L) == mas::AlignmentPath{0, 1, 1});
    REQUIRE(mas::brute_force_align(L) == mas::AlignmentPath{0, 1, 1});

    L(0, 0) = 0.0; L(0, 1) = 1.0; L(0, 2) = -10.0;
    L(1, 0) = -10.0; L(1, 1) = 0.0; L(1, 2) = 0.0;
    REQUIRE(mas::mas_search(L) == mas::AlignmentPath{0, 0, 1});

    L(0, 1) = -1.0;
    REQUIRE(mas::mas_search(L) == mas::AlignmentPath{0, 1, 1});
}

TEST_CASE("constant shift leaves the path unchanged") {
    Rng rng(55);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t t_text = 1 + rng.below(5);
        const std::size_t t_mel = t_text + rng.below(8 - t_text + 1);
        const Mat L = random_matrix(rng, t_text, t_mel, false);
        Mat shifted = L;
        const double c = rng.uniform() * 20.0 - 10.0;
        for (std::size_t i = 0; i < L.rows(); ++i)
            for (std::size_t j = 0; j < L.cols(); ++j) shifted(i, j) += c;
        const auto p1 = mas::mas_search(L);
        const auto p2 = mas::mas_search(shifted);
        REQUIRE(p1 == p2);
        REQUIRE(mas::path_score(shifted, p2) ==
                Approx(mas::path_score(L, p1) + c * static_cast<double>(t_mel)).margin(1e-9));
    }
}

TEST_CASE("search equals exhaustive enumeration on 500 seeded instances") {
    Rng rng(20260819);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t t_text = 1 + rng.below(5);
        const std::size_t t_mel = t_text + rng.below(8 - t_text + 1);
        // alternate continuous values and small integers (dense ties)
        const Mat L = random_matrix(rng, t_text, t_mel, trial % 2 == 1);
        const auto fast = mas::mas_search(L);
        const auto slow = mas::brute_force_align(L);
        REQUIRE(mas::path_score(L, fast) == mas::path_score(L, slow));
        REQUIRE(fast == slow);
        check_path_invariants(fast, t_text);
    }
}

TEST_CASE("durations round-trip through paths") {
    REQUIRE(mas::durations_from_path({0, 1, 2, 3}) == mas::DurationVector{1, 1, 1, 1});
    REQUIRE(mas::durations_from_path({0, 0, 1}) == mas::DurationVector{2, 1});

    Rng rng(66);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t t_text = 1 + rng.below(6);
        const std::size_t extra = rng.below(10);
        mas::DurationVector want(t_text, 1);
        for (std::size_t k = 0; k < extra; ++k) ++want[rng.below(t_text)];
        mas::AlignmentPath path;
        for (std::size_t i = 0; i < t_text; ++i)
            path.insert(path.end(), static_cast<std::size_t>(want[i]), static_cast<int>(i));
        const auto got = mas::durations_from_path(path);
        REQUIRE(got == want);
        std::size_t total = 0;
        for (int d : got) {
            REQUIRE(d >= 1);
            total += static_cast<std::size_t>(d);
        }
        REQUIRE(total == path.size());
    }
}

TEST_CASE("brute force guard and trivial cases") {
    Mat one(1, 1);
    one(0, 0) = -3.0;
    REQUIRE(mas::brute_force_align(one) == mas::AlignmentPath{0});

    Rng rng(77);
    const Mat two = random_matrix(rng, 2, 2, false);
    REQUIRE(mas::brute_force_align(two) == mas::AlignmentPath{0, 1});

    Mat wide(2, 11), tall(7, 10);
    wide.fill(0.0);
    tall.fill(0.0);
    REQUIRE_THROWS_AS(mas::brute_force_align(wide), mas::TooLarge);
    REQUIRE_THROWS_AS(mas::brute_force_align(tall), mas::TooLarge);
}

TEST_CASE("duration debug line") {
    REQUIRE(mas::format_duration_line("utt1", {2, 1, 3}) == "utt1\t2,1,3");
    REQUIRE(mas::format_duration_line("x", {5}) == "x\t5");
}
