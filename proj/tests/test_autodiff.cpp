#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "multiref/autodiff.hpp"
#include "multiref/kernels.hpp"
#include "multiref/nn.hpp"

using namespace multiref;

namespace {

// Central-difference check of d(loss)/d(leaf) against the tape.
void check_gradient(const Var& leaf, const std::function<Var()>& make_loss, real tol = 1e-6,
                    real h = 1e-6) {
    leaf->clear_grad();
    Var loss = make_loss();
    backward(loss);
    Tensor analytic = leaf->grad;
    REQUIRE(analytic.same_shape(leaf->value));

    for (size_t i = 0; i < leaf->value.numel(); ++i) {
        const real orig = leaf->value[i];
        leaf->value[i] = orig + h;
        real up;
        {
            NoGradGuard ng;
            up = make_loss()->value[0];
        }
        leaf->value[i] = orig - h;
        real dn;
        {
            NoGradGuard ng;
            dn = make_loss()->value[0];
        }
        leaf->value[i] = orig;
        const real numeric = (up - dn) / (2 * h);
        const real scale = std::max({std::fabs(numeric), std::fabs(analytic[i]), 1.0});
        CHECK(std::fabs(numeric - analytic[i]) / scale < tol);
    }
    leaf->clear_grad();
}

Tensor arange_tensor(std::vector<int> shape, real start = 0.0, real step = 0.25) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = start + step * static_cast<real>(i);
    return t;
}

}  // namespace

TEST_CASE("broadcast add/sub/mul values and gradients") {
    Rng rng(7);
    Var a = variable(Tensor::randn({2, 3, 4}, rng));
    Var b = variable(Tensor::randn({3, 1}, rng));

    Var s = add(a, b);
    REQUIRE(s->value.shape() == std::vector<int>({2, 3, 4}));
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int j = 0; j < 4; ++j)
                CHECK(s->value.at(n, c, j) == doctest::Approx(a->value.at(n, c, j) + b->value.at(c, 0)));

    check_gradient(a, [&] { return sum_all(mul(add(a, b), sub(a, b))); });
    check_gradient(b, [&] { return sum_all(mul(add(a, b), sub(a, b))); });
}

TEST_CASE("unary op gradients") {
    Rng rng(11);
    Var a = variable(Tensor::randn({5, 3}, rng));
    check_gradient(a, [&] { return sum_all(sigmoid(a)); });
    check_gradient(a, [&] { return sum_all(exp_op(scale(a, 0.3))); });
    check_gradient(a, [&] { return mean_all(leaky_relu(a, 0.2)); }, 1e-5);
    // keep abs away from the kink
    for (size_t i = 0; i < a->value.numel(); ++i)
        if (std::fabs(a->value[i]) < 0.05) a->value[i] = 0.3;
    check_gradient(a, [&] { return sum_all(abs_op(a)); });
}

TEST_CASE("softmax known values, sorted reduction and gradient") {
    // logits (0, ln 3) -> weights (0.25, 0.75)
    Tensor t({2, 1});
    t[0] = 0.0;
    t[1] = std::log(3.0);
    Var v = variable(t);
    Var sm = softmax(v, 0);
    CHECK(sm->value[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(sm->value[1] == doctest::Approx(0.75).epsilon(1e-12));

    Rng rng(3);
    Var a = variable(Tensor::randn({3, 4}, rng));
    check_gradient(a, [&] { return sum_all(mul(softmax(a, 0, true), a)); });

    // sorted reduction: permuting the reduced axis permutes outputs bit-exactly
    Tensor x({3, 2});
    x[0] = 0.3; x[1] = -1.7; x[2] = 1.1; x[3] = 0.9; x[4] = -0.2; x[5] = 2.0;
    Tensor xp({3, 2});  // rows permuted 2,0,1
    xp[0] = x[4]; xp[1] = x[5]; xp[2] = x[0]; xp[3] = x[1]; xp[4] = x[2]; xp[5] = x[3];
    Tensor y = softmax(constant(x), 0, true)->value;
    Tensor yp = softmax(constant(xp), 0, true)->value;
    CHECK(y[0] == yp[2]);
    CHECK(y[2] == yp[4]);
    CHECK(y[4] == yp[0]);
    CHECK(y[1] == yp[3]);
}

TEST_CASE("reductions, reshape, concat, slice") {
    Rng rng(5);
    Var a = variable(Tensor::randn({2, 3, 2}, rng));
    Var b = variable(Tensor::randn({2, 2, 2}, rng));

    Var s = sum_axis(a, 1, false);
    REQUIRE(s->value.shape() == std::vector<int>({2, 2}));
    CHECK(s->value.at(0, 0) ==
          doctest::Approx(a->value.at(0, 0, 0) + a->value.at(0, 1, 0) + a->value.at(0, 2, 0)));

    Var c = concat({a, b}, 1);
    REQUIRE(c->value.shape() == std::vector<int>({2, 5, 2}));
    CHECK(c->value.at(0, 3, 1) == b->value.at(0, 0, 1));
    CHECK(c->value.at(1, 4, 0) == b->value.at(1, 1, 0));

    Var sl = slice_axis(c, 1, 3, 2);
    CHECK(max_abs_diff(sl->value, b->value) == 0.0);

    check_gradient(a, [&] { return sum_all(mul(concat({a, b}, 1), concat({a, b}, 1))); });
    check_gradient(b, [&] { return sum_all(abs_op(slice_axis(concat({a, b}, 1), 1, 2, 3))); });
    check_gradient(a, [&] { return mean_all(mul(sum_axis(a, 2, true), sum_axis(a, 2, true))); });
    check_gradient(a, [&] { return sum_all(mul(reshape(a, {12}), reshape(a, {12}))); });
}

TEST_CASE("conv2d matches a naive loop oracle") {
    Rng rng(13);
    Var x = variable(Tensor::randn({2, 3, 5, 6}, rng));
    Var w = variable(Tensor::randn({4, 3, 3, 3}, rng));
    Var b = variable(Tensor::randn({4}, rng));
    const int stride = 2, pad = 1;
    Var y = conv2d(x, w, b, stride, pad);
    REQUIRE(y->value.shape() == std::vector<int>({2, 4, 3, 3}));

    for (int n = 0; n < 2; ++n)
        for (int co = 0; co < 4; ++co)
            for (int oi = 0; oi < 3; ++oi)
                for (int oj = 0; oj < 3; ++oj) {
                    real acc = b->value[static_cast<size_t>(co)];
                    for (int ci = 0; ci < 3; ++ci)
                        for (int ki = 0; ki < 3; ++ki)
                            for (int kj = 0; kj < 3; ++kj) {
                                const int ii = oi * stride - pad + ki;
                                const int jj = oj * stride - pad + kj;
                                if (ii < 0 || ii >= 5 || jj < 0 || jj >= 6) continue;
                                acc += x->value.at(n, ci, ii, jj) * w->value.at(co, ci, ki, kj);
                            }
                    CHECK(y->value.at(n, co, oi, oj) == doctest::Approx(acc).epsilon(1e-12));
                }

    auto loss = [&] { return mean_all(mul(conv2d(x, w, b, stride, pad), conv2d(x, w, b, stride, pad))); };
    check_gradient(x, loss, 1e-5);
    check_gradient(w, loss, 1e-5);
    check_gradient(b, loss, 1e-5);
}

TEST_CASE("instance norm normalizes and backpropagates") {
    Rng rng(17);
    Var x = variable(Tensor::randn({2, 3, 4, 4}, rng, 2.0));
    Var g = variable(Tensor::full({3}, 1.3));
    Var b = variable(Tensor::full({3}, -0.2));
    Var y = instance_norm(x, g, b);

    // per-(n,c) mean ~ beta, std ~ gamma
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) {
            real mu = 0.0;
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) mu += y->value.at(n, c, i, j);
            mu /= 16.0;
            CHECK(mu == doctest::Approx(-0.2).epsilon(1e-9));
        }

    auto loss = [&] { return mean_all(mul(instance_norm(x, g, b), instance_norm(x, g, b))); };
    check_gradient(x, loss, 1e-4);
    check_gradient(g, loss, 1e-5);
    check_gradient(b, loss, 1e-5);
}

TEST_CASE("avg pool and nearest upsample") {
    Var x = variable(arange_tensor({1, 2, 4, 4}));
    Var p = avg_pool2(x);
    REQUIRE(p->value.shape() == std::vector<int>({1, 2, 2, 2}));
    CHECK(p->value.at(0, 0, 0, 0) ==
          doctest::Approx(0.25 * (x->value.at(0, 0, 0, 0) + x->value.at(0, 0, 0, 1) +
                                  x->value.at(0, 0, 1, 0) + x->value.at(0, 0, 1, 1))));
    Var u = upsample_nearest2(x);
    REQUIRE(u->value.shape() == std::vector<int>({1, 2, 8, 8}));
    CHECK(u->value.at(0, 1, 5, 4) == x->value.at(0, 1, 2, 2));

    check_gradient(x, [&] { return sum_all(mul(avg_pool2(x), avg_pool2(x))); });
    check_gradient(x, [&] { return sum_all(mul(upsample_nearest2(x), upsample_nearest2(x))); });
}

TEST_CASE("grid_sample identity is exact on power-of-two-plus-one sizes") {
    Rng rng(23);
    Var x = variable(Tensor::randn({1, 2, 9, 17}, rng));
    Tensor grid = kernels::identity_grid(9, 17).reshaped({1, 9, 17, 2});
    Var y = grid_sample(x, constant(grid));
    CHECK(bit_equal(y->value, x->value));
}

TEST_CASE("grid_sample identity is machine-precision on general sizes") {
    Rng rng(29);
    Var x = variable(Tensor::randn({2, 3, 12, 10}, rng));
    Tensor grid({2, 12, 10, 2});
    const Tensor base = kernels::identity_grid(12, 10);
    for (int n = 0; n < 2; ++n)
        std::copy(base.data(), base.data() + base.numel(), grid.data() + n * base.numel());
    Var y = grid_sample(x, constant(grid));
    CHECK(max_abs_diff(y->value, x->value) < 1e-13);
}

TEST_CASE("grid_sample integer shift matches the shift oracle exactly") {
    Rng rng(31);
    const int H = 9, W = 17;  // W-1, H-1 powers of two so pixel coords are exact
    Var x = variable(Tensor::randn({1, 2, H, W}, rng));
    // flow sampling one pixel to the right: out(i,j) = in(i, j+1)
    Tensor grid({1, H, W, 2});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            grid.at(0, i, j, 0) = (2.0 * (j + 1) - (W - 1)) / (W - 1);
            grid.at(0, i, j, 1) = (2.0 * i - (H - 1)) / (H - 1);
        }
    Var y = grid_sample(x, constant(grid));
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j + 1 < W; ++j)  // interior columns
                CHECK(y->value.at(0, c, i, j) == x->value.at(0, c, i, j + 1));
}

TEST_CASE("grid_sample gradients match finite differences") {
    Rng rng(37);
    Var x = variable(Tensor::randn({1, 2, 6, 5}, rng));
    // keep sample points strictly interior and away from integer pixels
    Tensor g({1, 3, 4, 2});
    for (size_t i = 0; i < g.numel(); ++i) g[i] = 0.37 * std::sin(1.7 * static_cast<real>(i) + 0.3);
    Var grid = variable(g);
    auto loss = [&] { return mean_all(mul(grid_sample(x, grid), grid_sample(x, grid))); };
    check_gradient(x, loss, 1e-5);
    check_gradient(grid, loss, 1e-4, 1e-7);
}

TEST_CASE("matmul2x2 and inv2x2") {
    Rng rng(41);
    Tensor a({2, 2, 2});
    a.at(0, 0, 0) = 1.0; a.at(0, 0, 1) = 2.0; a.at(0, 1, 0) = 3.0; a.at(0, 1, 1) = 4.0;
    a.at(1, 0, 0) = 2.0; a.at(1, 0, 1) = 0.0; a.at(1, 1, 0) = 0.0; a.at(1, 1, 1) = 0.5;
    Tensor b({2, 2, 2});
    b.at(0, 0, 0) = 0.0; b.at(0, 0, 1) = 1.0; b.at(0, 1, 0) = 1.0; b.at(0, 1, 1) = 0.0;
    b.at(1, 0, 0) = 1.0; b.at(1, 0, 1) = 2.0; b.at(1, 1, 0) = 3.0; b.at(1, 1, 1) = 4.0;
    Var va = variable(a), vb = variable(b);
    Var c = matmul2x2(va, vb);
    CHECK(c->value.at(0, 0, 0) == doctest::Approx(2.0));
    CHECK(c->value.at(0, 0, 1) == doctest::Approx(1.0));
    CHECK(c->value.at(0, 1, 0) == doctest::Approx(4.0));
    CHECK(c->value.at(0, 1, 1) == doctest::Approx(3.0));

    Var inv = inv2x2(va);
    Var should_be_identity = matmul2x2(va, inv);
    CHECK(should_be_identity->value.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(should_be_identity->value.at(0, 0, 1) == doctest::Approx(0.0));
    CHECK(should_be_identity->value.at(1, 1, 1) == doctest::Approx(1.0));

    auto loss = [&] { return sum_all(mul(matmul2x2(va, inv2x2(vb)), va)); };
    check_gradient(va, loss, 1e-5);
    check_gradient(vb, loss, 1e-5);
}

TEST_CASE("fuse_weighted_sum oracle, permutation bit-exactness, gradients") {
    Rng rng(43);
    const int K = 3, N = 2, C = 4, H = 3, W = 3;
    Var masks = variable(Tensor::rand_uniform({K, N, 1, H, W}, rng, 0.05, 1.0));
    Var feats = variable(Tensor::randn({K, N, C, H, W}, rng));

    Var out = fuse_weighted_sum(masks, feats);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    real acc = 0.0;
                    for (int k = 0; k < K; ++k)
                        acc += masks->value[(((static_cast<size_t>(k) * N + n) * 1 + 0) * H + i) * W + j] *
                               feats->value[(((static_cast<size_t>(k) * N + n) * C + c) * H + i) * W + j];
                    const size_t oi = ((static_cast<size_t>(n) * C + c) * H + i) * W + j;
                    CHECK(out->value[oi] == doctest::Approx(acc).epsilon(1e-12));
                }

    // permuting the K axis of both inputs leaves the output bit-identical
    std::vector<int> perm{2, 0, 1};
    Tensor mp(masks->value.shape()), fp(feats->value.shape());
    const size_t mblk = masks->value.numel() / K, fblk = feats->value.numel() / K;
    for (int k = 0; k < K; ++k) {
        std::copy(masks->value.data() + perm[k] * mblk, masks->value.data() + (perm[k] + 1) * mblk,
                  mp.data() + k * mblk);
        std::copy(feats->value.data() + perm[k] * fblk, feats->value.data() + (perm[k] + 1) * fblk,
                  fp.data() + k * fblk);
    }
    Var out_p = fuse_weighted_sum(constant(mp), constant(fp));
    CHECK(bit_equal(out->value, out_p->value));

    auto loss = [&] { return mean_all(mul(fuse_weighted_sum(masks, feats), fuse_weighted_sum(masks, feats))); };
    check_gradient(masks, loss, 1e-5);
    check_gradient(feats, loss, 1e-5);

    // element-wise masks (M == C)
    Var masks_e = variable(Tensor::rand_uniform({K, N, C, H, W}, rng, 0.05, 1.0));
    auto loss_e = [&] { return mean_all(abs_op(fuse_weighted_sum(masks_e, feats))); };
    check_gradient(masks_e, loss_e, 1e-5);
}

TEST_CASE("antialias downsample halves resolution and keeps mass") {
    Var x = variable(Tensor::full({1, 1, 8, 8}, 0.5));
    Var y = nn::antialias_downsample(x, 2);
    REQUIRE(y->value.shape() == std::vector<int>({1, 1, 4, 4}));
    // constant input stays constant in the interior where the kernel is fully supported
    CHECK(y->value.at(0, 0, 1, 1) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(y->value.at(0, 0, 2, 2) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("hourglass keeps spatial size and declared channel count") {
    Rng rng(47);
    nn::Hourglass hg(5, 8, 2, 32, rng);
    Var x = variable(Tensor::randn({2, 5, 16, 16}, rng), false);
    Var y = hg.forward(x);
    REQUIRE(y->value.shape() == std::vector<int>({2, hg.out_channels, 16, 16}));
    CHECK(hg.out_channels == 13);
    CHECK(y->value.all_finite());
}

TEST_CASE("backward accumulates across shared subexpressions") {
    Var a = variable(Tensor::scalar(3.0));
    Var b = mul(a, a);           // a^2
    Var loss = sum_all(mul(b, a));  // a^3
    backward(loss);
    CHECK(a->grad[0] == doctest::Approx(27.0));  // 3 a^2
    a->clear_grad();
}

TEST_CASE("NoGradGuard suppresses tape construction but keeps touch counts") {
    Var a = variable(Tensor::scalar(2.0));
    const auto touches_before = a->touch_count.load();
    {
        NoGradGuard ng;
        Var y = mul(a, a);
        CHECK_FALSE(y->requires_grad);
        CHECK(y->parents.empty());
    }
    CHECK(a->touch_count.load() == touches_before + 2);
}
