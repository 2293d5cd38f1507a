#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "coot/aggregation.hpp"
#include "test_util.hpp"

using namespace coot;
using coot::testing::check_scalar;
using coot::testing::rand_tensor;
using coot::testing::weighted_sum;

namespace {

void randomize(ParamStore& store, Rng& rng, double scale = 0.6) {
    for (auto& p : store)
        for (std::size_t i = 0; i < p->value.size(); ++i)
            p->value[i] = float(rng.uniform(-scale, scale));
}

// Step-by-step double-precision evaluation: per head, Q = GELU(W1 K^T + b1),
// scores = W2 Q + b2, softmax over the time axis, output sum a_i (.) x_i.
std::vector<double> afa_oracle(const Tensor& x, const Mask& mask,
                               const AfaParams& p) {
    const std::size_t T = x.rows();
    const std::size_t d = std::size_t(p.width);
    const std::size_t H = p.heads.size();
    const std::size_t dh = d / H;
    const std::size_t da = std::size_t(p.attn_width);
    std::vector<double> out(d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        const auto& hp = p.heads[h];
        // Q[a][t]
        std::vector<double> q(da * T, 0.0);
        for (std::size_t a = 0; a < da; ++a)
            for (std::size_t t = 0; t < T; ++t) {
                double s = double(hp.b1->value[a]);
                for (std::size_t c = 0; c < d; ++c)
                    s += double(hp.w1->value.at(c, a)) * double(x.at(t, c));
                q[a * T + t] =
                    0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
            }
        // scores[j][t]
        std::vector<double> scores(dh * T, 0.0);
        for (std::size_t j = 0; j < dh; ++j)
            for (std::size_t t = 0; t < T; ++t) {
                double s = double(hp.b2->value[j]);
                for (std::size_t a = 0; a < da; ++a)
                    s += double(hp.w2->value.at(a, j)) * q[a * T + t];
                scores[j * T + t] = s;
            }
        // softmax over t per dimension j, masked
        for (std::size_t j = 0; j < dh; ++j) {
            double mx = -1e300;
            for (std::size_t t = 0; t < T; ++t)
                if (mask.valid[t]) mx = std::max(mx, scores[j * T + t]);
            double denom = 0;
            for (std::size_t t = 0; t < T; ++t) {
                if (!mask.valid[t]) {
                    scores[j * T + t] = 0;
                    continue;
                }
                scores[j * T + t] = std::exp(scores[j * T + t] - mx);
                denom += scores[j * T + t];
            }
            for (std::size_t t = 0; t < T; ++t) scores[j * T + t] /= denom;
        }
        for (std::size_t j = 0; j < dh; ++j)
            for (std::size_t t = 0; t < T; ++t)
                out[h * dh + j] +=
                    scores[j * T + t] * double(x.at(t, h * dh + j));
    }
    return out;
}

} // namespace

TEST_CASE("single timestep passes through unchanged") {
    Rng rng(71);
    ParamStore store;
    AfaParams p = make_afa_params(store, "afa", 8, 2, 16);
    randomize(store, rng);
    Tensor x = rand_tensor(rng, 1, 8);
    Tape t;
    Var out = attention_fa(t, t.constant(x), Mask::all(1), p);
    for (std::size_t c = 0; c < 8; ++c)
        CHECK(double(t.value(out)[c]) == doctest::Approx(double(x[c])).epsilon(1e-7));
}

TEST_CASE("identical rows collapse to that row") {
    Rng rng(73);
    ParamStore store;
    AfaParams p = make_afa_params(store, "afa", 8, 2, 16);
    randomize(store, rng);
    Tensor row = rand_tensor(rng, 1, 8);
    Tensor x(5, 8);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 8; ++c) x.at(r, c) = row[c];
    Tape t;
    Var out = attention_fa(t, t.constant(x), Mask::all(5), p);
    for (std::size_t c = 0; c < 8; ++c)
        CHECK(std::fabs(double(t.value(out)[c]) - double(row[c])) <= 1e-6);
}

TEST_CASE("matches the dense oracle") {
    Rng rng(79);
    ParamStore store;
    AfaParams p = make_afa_params(store, "afa", 8, 2, 16);
    randomize(store, rng);
    Tensor x = rand_tensor(rng, 5, 8);
    Mask mask = Mask::all(5);
    Tape t;
    Var out = attention_fa(t, t.constant(x), mask, p);
    auto expect = afa_oracle(x, mask, p);
    for (std::size_t c = 0; c < 8; ++c)
        CHECK(std::fabs(double(t.value(out)[c]) - expect[c]) <= 1e-5);

    Mask partial({1, 0, 1, 1, 0});
    Var masked = attention_fa(t, t.constant(x), partial, p);
    auto expect_masked = afa_oracle(x, partial, p);
    for (std::size_t c = 0; c < 8; ++c)
        CHECK(std::fabs(double(t.value(masked)[c]) - expect_masked[c]) <= 1e-5);
}

TEST_CASE("output lies in the per-dimension convex hull of valid inputs") {
    Rng rng(83);
    ParamStore store;
    AfaParams p = make_afa_params(store, "afa", 6, 3, 12);
    randomize(store, rng, 1.2);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t T = std::size_t(rng.uniform_int(2, 9));
        Tensor x = rand_tensor(rng, T, 6, -3, 3);
        Mask mask = Mask::all(T);
        for (std::size_t r = 1; r < T; ++r)
            mask.valid[r] = rng.uniform() < 0.8 ? 1 : 0;
        Tape t;
        Var out = attention_fa(t, t.constant(x), mask, p);
        for (std::size_t c = 0; c < 6; ++c) {
            double lo = 1e300, hi = -1e300;
            for (std::size_t r = 0; r < T; ++r) {
                if (!mask.valid[r]) continue;
                lo = std::min(lo, double(x.at(r, c)));
                hi = std::max(hi, double(x.at(r, c)));
            }
            CHECK(double(t.value(out)[c]) >= lo - 1e-6);
            CHECK(double(t.value(out)[c]) <= hi + 1e-6);
        }
    }
}

TEST_CASE("invariant to trailing padding") {
    Rng rng(89);
    ParamStore store;
    AfaParams p = make_afa_params(store, "afa", 8, 2, 16);
    randomize(store, rng);
    Tensor x4 = rand_tensor(rng, 4, 8);
    Tensor x7(7, 8);
    for (std::size_t i = 0; i < x4.size(); ++i) x7[i] = x4[i];
    for (std::size_t i = x4.size(); i < x7.size(); ++i)
        x7[i] = float(rng.uniform(-9, 9));
    Mask m7({1, 1, 1, 1, 0, 0, 0});

    Tape t;
    Var a = attention_fa(t, t.constant(x4), Mask::all(4), p);
    Var b = attention_fa(t, t.constant(x7), m7, p);
    for (std::size_t c = 0; c < 8; ++c) CHECK(t.value(a)[c] == t.value(b)[c]);
}

TEST_CASE("invariant under timestep permutation") {
    Rng rng(97);
    ParamStore store;
    AfaParams p = make_afa_params(store, "afa", 8, 2, 16);
    randomize(store, rng);
    Tensor x = rand_tensor(rng, 5, 8);
    std::vector<std::size_t> perm{4, 2, 0, 3, 1};
    Tensor px(5, 8);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 8; ++c) px.at(r, c) = x.at(perm[r], c);
    Tape t;
    Var a = attention_fa(t, t.constant(x), Mask::all(5), p);
    Var b = attention_fa(t, t.constant(px), Mask::all(5), p);
    for (std::size_t c = 0; c < 8; ++c)
        CHECK(double(t.value(a)[c]) ==
              doctest::Approx(double(t.value(b)[c])).epsilon(1e-5));
}

TEST_CASE("passes grad_check") {
    Rng rng(101);
    ParamStore store;
    AfaParams p = make_afa_params(store, "afa", 8, 2, 16);
    randomize(store, rng, 0.4);
    Tensor x = rand_tensor(rng, 5, 8);
    Mask mask({1, 1, 0, 1, 1});

    auto build = [&](Tape& t) {
        return weighted_sum(t, attention_fa(t, t.leaf(x), mask, p), rng);
    };
    CHECK(check_scalar(build, true, false).max_rel_err <= 1e-3);
    CHECK(check_scalar(build, true, true).max_rel_err <= 1e-5);
}
