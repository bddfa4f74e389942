#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "safectrl/tensor.hpp"

using namespace safectrl;

// ---------------------------------------------------------------------------
// Gradient oracle: central finite differences (h = 1e-3) over an independent
// double-precision re-evaluation of the same math. The production kernels run
// in f32; differencing those directly would drown the signal in cancellation,
// so every checked function is mirrored here in plain double loops.
// ---------------------------------------------------------------------------

namespace {

using dvec = std::vector<double>;
using dfun = std::function<double(const std::vector<dvec>&)>;

constexpr double kFdStep = 1e-3;
constexpr double kFdTol = 1e-4;

// rel err with unit floor: relative for large gradients, absolute for tiny.
bool grad_close(float got, double want) {
    const double denom = std::max(1.0, std::abs(want));
    return std::abs(static_cast<double>(got) - want) / denom < kFdTol;
}

// Central differences of f at inputs, one coordinate at a time.
std::vector<dvec> fd_grad(const dfun& f, std::vector<dvec> inputs) {
    std::vector<dvec> grads;
    for (size_t t = 0; t < inputs.size(); ++t) {
        dvec g(inputs[t].size());
        for (size_t i = 0; i < inputs[t].size(); ++i) {
            const double keep = inputs[t][i];
            inputs[t][i] = keep + kFdStep;
            const double fp = f(inputs);
            inputs[t][i] = keep - kFdStep;
            const double fm = f(inputs);
            inputs[t][i] = keep;
            g[i] = (fp - fm) / (2.0 * kFdStep);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

void check_grads(const std::vector<Tensor>& leaves, const std::vector<dvec>& want) {
    REQUIRE(leaves.size() == want.size());
    for (size_t t = 0; t < leaves.size(); ++t) {
        const auto& g = leaves[t].grad();
        REQUIRE(g.size() == want[t].size());
        for (size_t i = 0; i < g.size(); ++i) {
            INFO("leaf ", t, " coord ", i, " got ", g[i], " want ", want[t][i]);
            CHECK(grad_close(g[i], want[t][i]));
        }
    }
}

dvec to_dvec(const Tensor& t) {
    return dvec(t.data().begin(), t.data().end());
}

// double-precision mirrors ---------------------------------------------------

dvec dmatmul(const dvec& a, const dvec& b, int m, int k, int n) {
    dvec out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk)
            for (int j = 0; j < n; ++j) out[i * n + j] += a[i * k + kk] * b[kk * n + j];
    return out;
}

dvec dsoftmax_rows(const dvec& x, int m, int n, double divisor) {
    dvec out(x.size());
    for (int i = 0; i < m; ++i) {
        double mx = x[i * n];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            out[i * n + j] = std::exp((x[i * n + j] - mx) / divisor);
            z += out[i * n + j];
        }
        for (int j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    return out;
}

double dmse(const dvec& p, const dvec& t) {
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) s += (p[i] - t[i]) * (p[i] - t[i]);
    return s / static_cast<double>(p.size());
}

double ddot(const dvec& a, const dvec& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

dvec dconv2d(const dvec& x, const dvec& w, const dvec& b, int ci, int h, int wd, int co, int kh,
             int kw, int stride, int pad) {
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    dvec out(static_cast<size_t>(co) * oh * ow);
    for (int oc = 0; oc < co; ++oc)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double s = b[static_cast<size_t>(oc)];
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * stride + ky - pad;
                            const int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                            s += x[(ic * h + iy) * wd + ix] * w[((oc * ci + ic) * kh + ky) * kw + kx];
                        }
                out[(oc * oh + oy) * ow + ox] = s;
            }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("matmul values") {
    auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto r = matmul(eye, b);
    CHECK(r.data() == std::vector<float>{1, 2, 3, 4});

    auto a1 = Tensor::from_data({1, 2}, {1, 2});
    auto b1 = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(a1, b1).item() == doctest::Approx(11.0f));

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("matmul gradients vs finite differences, 50 seeds") {
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(1000 + static_cast<std::uint64_t>(seed));
        auto a = Tensor::randn({3, 4}, rng, 1.0f, true);
        auto b = Tensor::randn({4, 2}, rng, 1.0f, true);
        auto c = Tensor::randn({3, 2}, rng, 1.0f);  // fixed weights, not a leaf under test

        auto loss = reduce_sum(mul(matmul(a, b), c));
        backward(loss);

        const dvec cd = to_dvec(c);
        auto f = [&](const std::vector<dvec>& in) {
            return ddot(dmatmul(in[0], in[1], 3, 4, 2), cd);
        };
        check_grads({a, b}, fd_grad(f, {to_dvec(a), to_dvec(b)}));
    }
}

TEST_CASE("softmax_rows values and invariants") {
    auto u = softmax_rows(Tensor::from_data({1, 3}, {0, 0, 0}), 1.0f);
    for (float v : u.data()) CHECK(v == doctest::Approx(1.0f / 3.0f));

    auto s = softmax_rows(Tensor::from_data({1, 2}, {1000, 0}), 1.0f);
    CHECK(s.data()[0] == doctest::Approx(1.0f));
    CHECK(s.data()[1] == doctest::Approx(0.0f));
    for (float v : s.data()) CHECK(std::isfinite(v));

    auto t = softmax_rows(Tensor::from_data({1, 2}, {std::log(2.0f), 0.0f}), 1.0f);
    CHECK(t.data()[0] == doctest::Approx(2.0f / 3.0f));
    CHECK(t.data()[1] == doctest::Approx(1.0f / 3.0f));

    // rows sum to 1 and shifting a row by a constant changes nothing
    Rng rng(7);
    auto x = Tensor::randn({5, 8}, rng);
    auto y = softmax_rows(x, 2.0f);
    for (int i = 0; i < 5; ++i) {
        double row = 0.0;
        for (int j = 0; j < 8; ++j) row += y.data()[i * 8 + j];
        CHECK(std::abs(row - 1.0) < 1e-6);
    }
    auto shifted = x.clone();
    for (int j = 0; j < 8; ++j) shifted.data()[2 * 8 + j] += 13.25f;
    auto y2 = softmax_rows(shifted, 2.0f);
    for (int j = 0; j < 8; ++j)
        CHECK(y2.data()[2 * 8 + j] == doctest::Approx(y.data()[2 * 8 + j]).epsilon(1e-5));

    CHECK_THROWS_AS(softmax_rows(Tensor::from_data({1, 1}, {INFINITY}), 1.0f), NumericError);
}

TEST_CASE("softmax_rows gradients vs finite differences, 50 seeds") {
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(2000 + static_cast<std::uint64_t>(seed));
        auto x = Tensor::randn({4, 5}, rng, 1.0f, true);
        auto c = Tensor::randn({4, 5}, rng, 1.0f);
        const float divisor = 0.5f + rng.uniform() * 2.0f;

        auto loss = reduce_sum(mul(softmax_rows(x, divisor), c));
        backward(loss);

        const dvec cd = to_dvec(c);
        auto f = [&](const std::vector<dvec>& in) {
            return ddot(dsoftmax_rows(in[0], 4, 5, divisor), cd);
        };
        check_grads({x}, fd_grad(f, {to_dvec(x)}));
    }
}

TEST_CASE("mse values and gradient") {
    auto p = Tensor::from_data({3}, {1, 2, 3});
    CHECK(mse(p, p.clone()).item() == 0.0f);

    auto q = Tensor::from_data({2}, {1, 1});
    CHECK(mse(q, Tensor::zeros({2})).item() == doctest::Approx(1.0f));

    CHECK_THROWS_AS(mse(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);

    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(3000 + static_cast<std::uint64_t>(seed));
        auto pred = Tensor::randn({10}, rng, 1.0f, true);
        auto target = Tensor::randn({10}, rng, 1.0f);
        auto loss = mse(pred, target);
        backward(loss);

        // closed form 2(pred-target)/N and the FD oracle must both agree
        const dvec td = to_dvec(target);
        auto f = [&](const std::vector<dvec>& in) { return dmse(in[0], td); };
        auto want = fd_grad(f, {to_dvec(pred)});
        check_grads({pred}, want);
        for (int i = 0; i < 10; ++i) {
            const float closed = 2.0f * (pred.data()[i] - target.data()[i]) / 10.0f;
            CHECK(pred.grad()[i] == doctest::Approx(closed).epsilon(1e-5));
        }
    }
}

TEST_CASE("backward basics") {
    auto w = Tensor::from_data({3}, {5, -1, 2}, true);
    backward(reduce_sum(w));
    CHECK(w.grad() == std::vector<float>{1, 1, 1});

    auto w2 = Tensor::from_data({1}, {2}, true);
    backward(mse(w2, Tensor::zeros({1})));
    CHECK(w2.grad()[0] == doctest::Approx(4.0f));

    CHECK_THROWS_AS(backward(Tensor::zeros({3}, true)), ContractError);
}

TEST_CASE("backward is deterministic for a fixed seed") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = Tensor::randn({6, 8}, rng, 1.0f, true);
        auto wq = Tensor::randn({8, 4}, rng, 0.5f, true);
        auto wk = Tensor::randn({8, 4}, rng, 0.5f, true);
        auto wv = Tensor::randn({8, 4}, rng, 0.5f, true);
        auto target = Tensor::randn({6, 4}, rng, 1.0f);
        auto att = softmax_rows(matmul(matmul(x, wq), transpose(matmul(x, wk))), 2.0f);
        auto loss = mse(matmul(att, matmul(x, wv)), target);
        backward(loss);
        std::vector<float> all;
        for (const Tensor* t : {&x, &wq, &wk, &wv})
            all.insert(all.end(), t->grad().begin(), t->grad().end());
        return all;
    };
    CHECK(run(42) == run(42));
    CHECK(run(42) != run(43));
}

TEST_CASE("attention block composite gradient vs finite differences, 50 seeds") {
    const int m = 6, dx = 8, dk = 4;
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(4000 + static_cast<std::uint64_t>(seed));
        auto x = Tensor::randn({m, dx}, rng, 1.0f, true);
        auto wq = Tensor::randn({dx, dk}, rng, 0.5f, true);
        auto wk = Tensor::randn({dx, dk}, rng, 0.5f, true);
        auto wv = Tensor::randn({dx, dk}, rng, 0.5f, true);
        auto target = Tensor::randn({m, dk}, rng, 1.0f);
        const float divisor = std::sqrt(static_cast<float>(dk));

        auto q = matmul(x, wq);
        auto k = matmul(x, wk);
        auto v = matmul(x, wv);
        auto att = softmax_rows(matmul(q, transpose(k)), divisor);
        auto loss = mse(matmul(att, v), target);
        backward(loss);

        const dvec td = to_dvec(target);
        auto f = [&](const std::vector<dvec>& in) {
            const dvec qq = dmatmul(in[0], in[1], m, dx, dk);
            const dvec kk = dmatmul(in[0], in[2], m, dx, dk);
            const dvec vv = dmatmul(in[0], in[3], m, dx, dk);
            dvec scores(static_cast<size_t>(m) * m, 0.0);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < m; ++j)
                    for (int d2 = 0; d2 < dk; ++d2)
                        scores[i * m + j] += qq[i * dk + d2] * kk[j * dk + d2];
            const dvec att_d = dsoftmax_rows(scores, m, m, divisor);
            const dvec out = dmatmul(att_d, vv, m, m, dk);
            return dmse(out, td);
        };
        check_grads({x, wq, wk, wv}, fd_grad(f, {to_dvec(x), to_dvec(wq), to_dvec(wk), to_dvec(wv)}));
    }
}

TEST_CASE("elementwise and structural op gradients vs finite differences, 50 seeds") {
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(5000 + static_cast<std::uint64_t>(seed));

        // sigmoid/silu/softplus/exp chained with scale & add
        auto x = Tensor::randn({7}, rng, 1.0f, true);
        auto c = Tensor::randn({7}, rng, 1.0f);
        auto loss = reduce_sum(mul(add(silu(x), mul(sigmoid(x), softplus(elem_exp(scale(x, 0.5f))))), c));
        backward(loss);
        const dvec cd = to_dvec(c);
        auto f = [&](const std::vector<dvec>& in) {
            double s = 0.0;
            for (size_t i = 0; i < in[0].size(); ++i) {
                const double v = in[0][i];
                const double sig = 1.0 / (1.0 + std::exp(-v));
                const double e = std::exp(0.5 * v);
                const double sp = std::log1p(std::exp(e));
                s += (v * sig + sig * sp) * cd[i];
            }
            return s;
        };
        check_grads({x}, fd_grad(f, {to_dvec(x)}));

        // abs + log on shifted-positive values
        auto y = Tensor::randn({6}, rng, 1.0f, true);
        // keep |y| comfortably away from 0 where abs is non-differentiable
        for (float& v : y.data()) v = (v >= 0.0f ? v + 0.5f : v - 0.5f);
        auto loss2 = reduce_mean(elem_log(add(elem_abs(y), Tensor::full({6}, 1.0f))));
        backward(loss2);
        auto f2 = [&](const std::vector<dvec>& in) {
            double s = 0.0;
            for (double v : in[0]) s += std::log(std::abs(v) + 1.0);
            return s / 6.0;
        };
        check_grads({y}, fd_grad(f2, {to_dvec(y)}));

        // add_rowvec / div_by_scalar / concat_cols / slice_col / transpose
        auto a = Tensor::randn({3, 4}, rng, 1.0f, true);
        auto b = Tensor::randn({3, 2}, rng, 1.0f, true);
        auto rv = Tensor::randn({6}, rng, 1.0f, true);
        auto s = Tensor::from_data({1}, {1.5f + rng.uniform()}, true);
        auto k = Tensor::randn({6, 3}, rng, 1.0f);
        auto cat = add_rowvec(concat_cols(a, b), rv);
        auto scaled = div_by_scalar(cat, s);
        auto loss3 = add(reduce_sum(mul(slice_col(scaled, 4), slice_col(scaled, 1))),
                         reduce_sum(mul(transpose(scaled), k)));
        backward(loss3);
        const dvec kd = to_dvec(k);
        auto f3 = [&](const std::vector<dvec>& in) {
            // in: a[3x4], b[3x2], rv[6], s[1]
            dvec m(18);
            for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 4; ++j) m[i * 6 + j] = in[0][i * 4 + j];
                for (int j = 0; j < 2; ++j) m[i * 6 + 4 + j] = in[1][i * 2 + j];
                for (int j = 0; j < 6; ++j) m[i * 6 + j] = (m[i * 6 + j] + in[2][j]) / in[3][0];
            }
            double out = 0.0;
            for (int i = 0; i < 3; ++i) out += m[i * 6 + 4] * m[i * 6 + 1];
            for (int j = 0; j < 6; ++j)
                for (int i = 0; i < 3; ++i) out += m[i * 6 + j] * kd[j * 3 + i];
            return out;
        };
        check_grads({a, b, rv, s}, fd_grad(f3, {to_dvec(a), to_dvec(b), to_dvec(rv), to_dvec(s)}));
    }
}

TEST_CASE("scalar-broadcast, gather and fusion gradients vs finite differences, 50 seeds") {
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(8000 + static_cast<std::uint64_t>(seed));

        auto table = Tensor::randn({5, 3}, rng, 1.0f, true);
        const std::vector<int> rows = {rng.uniform_int(0, 4), rng.uniform_int(0, 4),
                                       rng.uniform_int(0, 4), rng.uniform_int(0, 4)};
        auto g = gather_rows(table, rows);                      // [4,3]
        auto s_mul = Tensor::from_data({1}, {0.5f + rng.uniform()}, true);
        auto s_add = Tensor::from_data({1}, {rng.normal()}, true);
        auto other = Tensor::randn({4, 3}, rng, 1.0f, true);
        std::vector<float> m = {0.0f, rng.uniform(), 1.0f, rng.uniform()};
        auto fused = fuse_masked(add_scalar_bcast(mul_by_scalar(g, s_mul), s_add), other, m);
        auto c = Tensor::randn({4, 3}, rng, 1.0f);
        backward(reduce_sum(mul(fused, c)));

        const dvec cd = to_dvec(c);
        auto f = [&](const std::vector<dvec>& in) {
            // in: table[5x3], s_mul, s_add, other[4x3]
            double out = 0.0;
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 3; ++j) {
                    const double gv = in[0][static_cast<size_t>(rows[static_cast<size_t>(i)]) * 3 +
                                            static_cast<size_t>(j)] * in[1][0] + in[2][0];
                    const double mi = m[static_cast<size_t>(i)];
                    out += ((1.0 - mi) * gv + mi * in[3][i * 3 + j]) * cd[i * 3 + j];
                }
            return out;
        };
        check_grads({table, s_mul, s_add, other},
                    fd_grad(f, {to_dvec(table), to_dvec(s_mul), to_dvec(s_add), to_dvec(other)}));
    }
}

TEST_CASE("fuse_masked selects bit-exact rows at mask 0 and 1") {
    Rng rng(77);
    auto a = Tensor::randn({3, 4}, rng);
    auto b = Tensor::randn({3, 4}, rng);
    auto out = fuse_masked(a, b, {0.0f, 1.0f, 0.5f});
    for (int j = 0; j < 4; ++j) {
        CHECK(std::memcmp(&out.data()[0 * 4 + j], &a.data()[0 * 4 + j], 4) == 0);
        CHECK(std::memcmp(&out.data()[1 * 4 + j], &b.data()[1 * 4 + j], 4) == 0);
        CHECK(out.data()[2 * 4 + j] ==
              doctest::Approx(0.5f * a.data()[2 * 4 + j] + 0.5f * b.data()[2 * 4 + j]));
    }
    CHECK_THROWS_AS(fuse_masked(a, b, {0.0f, 1.0f}), ShapeError);
}

TEST_CASE("reduce extrema route gradient to the extreme element") {
    // spaced values so the h=1e-3 probe cannot flip the argmax
    auto x = Tensor::from_data({5}, {0.3f, -0.8f, 1.4f, 0.9f, -1.1f}, true);
    backward(reduce_max(x));
    CHECK(x.grad() == std::vector<float>{0, 0, 1, 0, 0});

    auto y = x.clone(true);
    backward(reduce_min(y));
    CHECK(y.grad() == std::vector<float>{0, 0, 0, 0, 1});

    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(6000 + static_cast<std::uint64_t>(seed));
        // distinct levels + small jitter keep pairwise gaps > 2h
        std::vector<float> vals(8);
        for (int i = 0; i < 8; ++i) vals[static_cast<size_t>(i)] = 0.25f * static_cast<float>(i) + 0.05f * rng.uniform();
        for (int i = 7; i > 0; --i) std::swap(vals[static_cast<size_t>(i)], vals[rng.uniform_int(0, i)]);
        auto z = Tensor::from_data({8}, vals, true);
        auto loss = add(scale(reduce_max(z), 2.0f), reduce_min(z));
        backward(loss);
        auto f = [](const std::vector<dvec>& in) {
            double mx = in[0][0], mn = in[0][0];
            for (double v : in[0]) {
                mx = std::max(mx, v);
                mn = std::min(mn, v);
            }
            return 2.0 * mx + mn;
        };
        check_grads({z}, fd_grad(f, {to_dvec(z)}));
    }
}

TEST_CASE("conv2d and upsample gradients vs finite differences, 50 seeds") {
    const int ci = 2, h = 5, wd = 5, co = 3, kh = 3, kw = 3;
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(7000 + static_cast<std::uint64_t>(seed));
        const int stride = (seed % 2) + 1;
        const int pad = 1;
        auto x = Tensor::randn({ci, h, wd}, rng, 1.0f, true);
        auto w = Tensor::randn({co, ci, kh, kw}, rng, 0.5f, true);
        auto b = Tensor::randn({co}, rng, 0.5f, true);

        auto out = upsample_nearest2x(conv2d(x, w, b, stride, pad));
        auto c = Tensor::randn(out.shape(), rng, 1.0f);
        auto loss = reduce_sum(mul(out, c));
        backward(loss);

        const dvec cd = to_dvec(c);
        const int oh = (h + 2 * pad - kh) / stride + 1;
        const int ow = (wd + 2 * pad - kw) / stride + 1;
        auto f = [&](const std::vector<dvec>& in) {
            const dvec conv = dconv2d(in[0], in[1], in[2], ci, h, wd, co, kh, kw, stride, pad);
            dvec up(static_cast<size_t>(co) * 4 * oh * ow);
            for (int oc = 0; oc < co; ++oc)
                for (int y = 0; y < 2 * oh; ++y)
                    for (int xx = 0; xx < 2 * ow; ++xx)
                        up[(oc * 2 * oh + y) * 2 * ow + xx] = conv[(oc * oh + y / 2) * ow + xx / 2];
            return ddot(up, cd);
        };
        check_grads({x, w, b}, fd_grad(f, {to_dvec(x), to_dvec(w), to_dvec(b)}));
    }
}

TEST_CASE("reshape keeps values and routes gradients") {
    Rng rng(11);
    auto x = Tensor::randn({2, 3, 4}, rng, 1.0f, true);
    auto flat = reshape(x, {6, 4});
    CHECK(flat.data() == x.data());
    auto c = Tensor::randn({6, 4}, rng);
    backward(reduce_sum(mul(flat, c)));
    for (int i = 0; i < 24; ++i) CHECK(x.grad()[i] == c.data()[i]);
    CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
}

TEST_CASE("adam: zero gradient leaves params unchanged") {
    auto w = Tensor::from_data({3}, {1, 2, 3}, true);
    Adam opt({w}, 1e-3f);
    opt.zero_grad();
    opt.step();
    CHECK(w.data() == std::vector<float>{1, 2, 3});
}

TEST_CASE("adam: first step with unit gradient moves by about -lr") {
    auto w = Tensor::from_data({1}, {0.5f}, true);
    Adam opt({w}, 1e-3f);
    w.zero_grad();
    w.node()->grad[0] = 1.0f;
    opt.step();
    // mhat = vhat = 1 at t=1, so the update is lr/(1+eps)
    CHECK(w.data()[0] == doctest::Approx(0.5f - 1e-3f).epsilon(1e-5));
}

TEST_CASE("adam: 100 steps minimize (w-3)^2") {
    auto w = Tensor::from_data({1}, {0.0f}, true);
    Adam opt({w}, 0.1f);
    for (int i = 0; i < 100; ++i) {
        opt.zero_grad();
        auto diff = sub(w, Tensor::full({1}, 3.0f));
        backward(mul(diff, diff));
        opt.step();
    }
    CHECK(std::abs(w.data()[0] - 3.0f) < 0.1f);
}

TEST_CASE("adam: missing grads raise a contract error") {
    auto w = Tensor::from_data({2}, {1, 2}, true);
    Adam opt({w}, 1e-3f);
    CHECK_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("non-finite detection") {
    auto bad = Tensor::from_data({2}, {1.0f, NAN});
    CHECK_THROWS_AS(assert_finite(bad, "bad"), NumericError);
    CHECK_THROWS_AS(elem_log(Tensor::from_data({1}, {-1.0f})), NumericError);
    CHECK_THROWS_AS(div_by_scalar(Tensor::zeros({2}), Tensor::scalar(0.0f)), NumericError);
    auto ok = Tensor::from_data({2}, {1.0f, 2.0f});
    CHECK_NOTHROW(assert_finite(ok, "ok"));
}
