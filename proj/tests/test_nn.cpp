#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "koshur/nn.hpp"

using namespace koshur;
using Catch::Approx;

namespace {

Mat random_mat(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Mat m(rows, cols);
    for (auto& v : m.data()) v = rng.normal() * scale;
    return m;
}

double dot_loss(const Mat& y, const Mat& proj) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.data().size(); ++i) acc += y.data()[i] * proj.data()[i];
    return acc;
}

// Central finite differences through the f32 master values, using the
// realized perturbation so float rounding cannot masquerade as backward error.
void check_tensor_grad(nn::Tensor& t, const std::function<double()>& loss_fn,
                       double tol = 2e-4) {
    const double eps = 1e-3;
    for (std::size_t i = 0; i < t.size(); ++i) {
        const float orig = t.value[i];
        t.value[i] = static_cast<float>(static_cast<double>(orig) + eps);
        const double hi = static_cast<double>(t.value[i]);
        const double lhi = loss_fn();
        t.value[i] = static_cast<float>(static_cast<double>(orig) - eps);
        const double lo = static_cast<double>(t.value[i]);
        const double llo = loss_fn();
        t.value[i] = orig;
        const double fd = (lhi - llo) / (hi - lo);
        const double g = t.grad[i];
        if (std::abs(fd) > 1e-6 || std::abs(g) > 1e-6) {
            REQUIRE(g == Approx(fd).epsilon(tol).margin(1e-7));
        }
    }
}

void check_input_grad(Mat& x, const Mat& dx, const std::function<double()>& loss_fn,
                      double tol = 2e-4) {
    const double eps = 1e-5;
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + eps;
        const double lhi = loss_fn();
        x.data()[i] = orig - eps;
        const double llo = loss_fn();
        x.data()[i] = orig;
        const double fd = (lhi - llo) / (2.0 * eps);
        if (std::abs(fd) > 1e-6 || std::abs(dx.data()[i]) > 1e-6) {
            REQUIRE(dx.data()[i] == Approx(fd).epsilon(tol).margin(1e-7));
        }
    }
}

}  // namespace

TEST_CASE("linear forward computes x*W^T + b") {
    nn::ParamStore ps;
    auto& w = ps.add("w", {2, 3});
    auto& b = ps.add("b", {2});
    w.value = {1, 2, 3, 4, 5, 6};
    b.value = {0.5f, -0.5f};
    Mat x(1, 3);
    x.data() = {1.0, 10.0, 100.0};
    const Mat y = nn::linear_forward(w, b, x);
    REQUIRE(y(0, 0) == Approx(0.5 + 1 + 20 + 300).epsilon(1e-12));
    REQUIRE(y(0, 1) == Approx(-0.5 + 4 + 50 + 600).epsilon(1e-12));
    Mat bad(1, 2);
    REQUIRE_THROWS_AS(nn::linear_forward(w, b, bad), Error);
}

TEST_CASE("linear backward matches finite differences") {
    Rng rng(101);
    nn::ParamStore ps;
    auto& w = ps.add("w", {4, 5});
    auto& b = ps.add("b", {4});
    nn::init_linear(w, rng);
    nn::init_uniform(b, rng, 0.3);
    Mat x = random_mat(rng, 3, 5);
    const Mat proj = random_mat(rng, 3, 4);

    auto loss = [&] { return dot_loss(nn::linear_forward(w, b, x), proj); };
    ps.zero_grads();
    const Mat dx = nn::linear_backward(w, b, x, proj);
    check_tensor_grad(w, loss);
    check_tensor_grad(b, loss);
    check_input_grad(x, dx, loss);
}

TEST_CASE("conv1d forward: zero padding and tap placement by hand") {
    nn::ParamStore ps;
    auto& w = ps.add("w", {1, 1, 3});
    auto& b = ps.add("b", {1});
    w.value = {2.0f, 3.0f, 5.0f};  // taps at offsets -1, 0, +1
    b.value = {10.0f};
    Mat x(3, 1);
    x.data() = {1.0, 10.0, 100.0};
    const Mat y = nn::conv1d_forward(w, b, x);
    REQUIRE(y(0, 0) == Approx(10 + 3 * 1 + 5 * 10).epsilon(1e-12));
    REQUIRE(y(1, 0) == Approx(10 + 2 * 1 + 3 * 10 + 5 * 100).epsilon(1e-12));
    REQUIRE(y(2, 0) == Approx(10 + 2 * 10 + 3 * 100).epsilon(1e-12));
}

TEST_CASE("conv1d backward matches finite differences") {
    Rng rng(102);
    nn::ParamStore ps;
    auto& w = ps.add("w", {3, 4, 3});
    auto& b = ps.add("b", {3});
    nn::init_uniform(w, rng, 0.4);
    nn::init_uniform(b, rng, 0.3);
    Mat x = random_mat(rng, 5, 4);
    const Mat proj = random_mat(rng, 5, 3);

    auto loss = [&] { return dot_loss(nn::conv1d_forward(w, b, x), proj); };
    ps.zero_grads();
    const Mat dx = nn::conv1d_backward(w, b, x, proj);
    check_tensor_grad(w, loss);
    check_tensor_grad(b, loss);
    check_input_grad(x, dx, loss);
}

TEST_CASE("tanh backward matches finite differences") {
    Rng rng(103);
    Mat x = random_mat(rng, 4, 6);
    const Mat proj = random_mat(rng, 4, 6);
    auto loss = [&] { return dot_loss(nn::tanh_forward(x), proj); };
    const Mat y = nn::tanh_forward(x);
    const Mat dx = nn::tanh_backward(y, proj);
    check_input_grad(x, dx, loss, 1e-4);
}

TEST_CASE("attention backward matches finite differences") {
    Rng rng(104);
    nn::ParamStore ps;
    const std::size_t dim = 4;
    nn::AttnParams p{&ps.add("wq", {dim, dim}), &ps.add("bq", {dim}),
                     &ps.add("wk", {dim, dim}), &ps.add("bk", {dim}),
                     &ps.add("wv", {dim, dim}), &ps.add("bv", {dim}),
                     &ps.add("wo", {dim, dim}), &ps.add("bo", {dim})};
    for (std::size_t i = 0; i < ps.tensor_count(); ++i)
        nn::init_uniform(ps.tensor(i), rng, 0.5);
    Mat x = random_mat(rng, 3, dim);
    const Mat proj = random_mat(rng, 3, dim);

    auto loss = [&] {
        nn::AttnCache c;
        return dot_loss(nn::attention_forward(p, x, c), proj);
    };
    ps.zero_grads();
    nn::AttnCache cache;
    nn::attention_forward(p, x, cache);
    const Mat dx = nn::attention_backward(p, cache, proj);
    for (std::size_t i = 0; i < ps.tensor_count(); ++i)
        check_tensor_grad(ps.tensor(i), loss, 5e-4);
    check_input_grad(x, dx, loss, 5e-4);
}

TEST_CASE("softmax rows are stable and normalized") {
    Mat s(2, 3);
    s.data() = {1000.0, 1001.0, 999.0, -2.0, 0.0, 2.0};
    const Mat a = nn::softmax_rows(s);
    for (std::size_t r = 0; r < 2; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            REQUIRE(std::isfinite(a(r, c)));
            sum += a(r, c);
        }
        REQUIRE(sum == Approx(1.0).epsilon(1e-12));
    }
    REQUIRE(a(0, 1) > a(0, 0));
}

TEST_CASE("embedding gathers rows and accumulates duplicate-id grads") {
    nn::ParamStore ps;
    auto& tbl = ps.add("emb", {5, 2});
    for (std::size_t i = 0; i < tbl.size(); ++i) tbl.value[i] = static_cast<float>(i);
    const std::vector<int> ids{3, 0, 3};
    const Mat y = nn::embed_forward(tbl, ids);
    REQUIRE(y(0, 0) == 6.0);
    REQUIRE(y(0, 1) == 7.0);
    REQUIRE(y(1, 0) == 0.0);
    REQUIRE(y(2, 1) == 7.0);

    Mat dy(3, 2);
    dy.data() = {1, 2, 10, 20, 100, 200};
    nn::embed_backward(tbl, ids, dy);
    REQUIRE(tbl.grad[3 * 2 + 0] == 101.0);
    REQUIRE(tbl.grad[3 * 2 + 1] == 202.0);
    REQUIRE(tbl.grad[0] == 10.0);
    REQUIRE(tbl.grad[2 * 2] == 0.0);

    REQUIRE_THROWS_AS(nn::embed_forward(tbl, {5}), Error);
    REQUIRE_THROWS_AS(nn::embed_forward(tbl, {-1}), Error);
}

TEST_CASE("global norm clipping hits the target norm exactly") {
    nn::ParamStore ps;
    auto& a = ps.add("a", {3});
    auto& b = ps.add("b", {2});
    // norm 50: grads (30, 40) split across tensors
    a.grad = {30.0, 0.0, 0.0};
    b.grad = {0.0, 40.0};
    const double pre = nn::clip_global_norm(ps, 5.0);
    REQUIRE(pre == Approx(50.0).epsilon(1e-12));
    REQUIRE(ps.global_grad_norm() == Approx(5.0).margin(1e-6));
    REQUIRE(a.grad[0] == Approx(3.0).epsilon(1e-12));
    REQUIRE(b.grad[1] == Approx(4.0).epsilon(1e-12));

    // under the threshold: untouched
    a.grad = {0.3, 0.0, 0.0};
    b.grad = {0.0, 0.4};
    REQUIRE(nn::clip_global_norm(ps, 5.0) == Approx(0.5).epsilon(1e-12));
    REQUIRE(a.grad[0] == 0.3);
}

TEST_CASE("adam: zero gradients leave a fresh model untouched") {
    Rng rng(105);
    nn::ParamStore ps;
    auto& w = ps.add("w", {8, 8});
    nn::init_linear(w, rng);
    const std::vector<float> before = w.value;
    auto st = nn::AdamState::for_params(ps);
    ps.zero_grads();
    nn::adam_update(ps, st, {});
    REQUIRE(w.value == before);
}

TEST_CASE("adam first step moves by ~lr for a unit gradient") {
    nn::ParamStore ps;
    auto& w = ps.add("w", {1});
    w.value = {0.25f};
    w.grad = {1.0};
    auto st = nn::AdamState::for_params(ps);
    nn::AdamConfig cfg;
    cfg.lr = 1e-4;
    nn::adam_update(ps, st, cfg);
    // bias-corrected m-hat = v-hat = 1 at step 1
    REQUIRE(static_cast<double>(w.value[0]) ==
            Approx(0.25 - 1e-4 / (1.0 + 1e-8)).margin(1e-9));
    REQUIRE(st.step == 1);
}

TEST_CASE("parameter store bookkeeping") {
    nn::ParamStore ps;
    ps.add("x", {2, 3});
    ps.add("y", {4});
    REQUIRE(ps.param_count() == 10);
    REQUIRE(ps.tensor_count() == 2);
    REQUIRE(ps.has("x"));
    REQUIRE(!ps.has("z"));
    REQUIRE_THROWS_AS(ps.add("x", {1}), Error);
    REQUIRE_THROWS_AS(ps.get("z"), Error);
    ps.get("x").grad.assign(6, 2.0);
    REQUIRE(ps.global_grad_norm() == Approx(std::sqrt(24.0)).epsilon(1e-12));
    ps.zero_grads();
    REQUIRE(ps.global_grad_norm() == 0.0);
}

TEST_CASE("seeded initialization is reproducible") {
    nn::ParamStore a, b;
    Rng ra(42), rb(42);
    nn::init_linear(a.add("w", {6, 6}), ra);
    nn::init_linear(b.add("w", {6, 6}), rb);
    REQUIRE(a.get("w").value == b.get("w").value);
}
