#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "realm/checkpoint.hpp"
#include "realm/gradcheck.hpp"
#include "realm/ops_loss.hpp"
#include "realm/ops_signal.hpp"

using namespace realm;

namespace {

// gradient check harness: build() maps (tape, bound params) to a scalar loss node
template <typename F>
GradCheckReport check_grads(ParamStore<double>& store, const std::vector<std::string>& names, F build,
                            double tol = 1e-3) {
    auto loss_fn = [&](bool with_grad) {
        Tape<double> tape(with_grad);
        BoundParams<double> P(tape, store);
        NodePtr<double> loss = build(tape, P);
        const double v = loss->value[0];
        if (with_grad) {
            tape.backward(loss);
            P.harvest_grads();
        }
        return v;
    };
    return finite_diff_check(store, names, loss_fn, tol, 1e-5);
}

// fixed pseudo-random projection so reductions have non-uniform grads
Tensor<double> projection(const std::vector<int64_t>& shape, uint64_t seed) {
    Rng rng(seed);
    return randn<double>(shape, rng);
}

NodePtr<double> project_sum(Tape<double>& tp, NodePtr<double> x, uint64_t seed) {
    auto r = tp.leaf(projection(x->value.shape, seed), false, "proj");
    return sum_all(tp, mul(tp, x, r));
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor<float> t({2, 3});
    CHECK(t.numel() == 6);
    t.at(1, 2) = 5.f;
    CHECK(t[5] == 5.f);
    CHECK_THROWS(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}));
    Tensor<float> s = Tensor<float>::scalar(2.f);
    CHECK(s.is_scalar());
}

TEST_CASE("rng determinism and normal moments") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng r(7);
    double mean = 0, var = 0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = r.normal();
    for (double x : xs) mean += x;
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("backward: linear identity and quadratic") {
    // loss = sum(w), w shape (3,) -> grad = [1,1,1]
    {
        Tape<double> tp;
        auto w = tp.leaf(Tensor<double>({3}, {1.0, 2.0, 3.0}), true, "w");
        auto loss = sum_all(tp, w);
        tp.backward(loss);
        for (int i = 0; i < 3; ++i) CHECK(w->grad[i] == doctest::Approx(1.0));
    }
    // loss = sum(w*w), w=[1,2] -> grad = [2,4]
    {
        Tape<double> tp;
        auto w = tp.leaf(Tensor<double>({2}, {1.0, 2.0}), true, "w");
        auto loss = sum_all(tp, mul(tp, w, w));
        tp.backward(loss);
        CHECK(w->grad[0] == doctest::Approx(2.0));
        CHECK(w->grad[1] == doctest::Approx(4.0));
    }
}

TEST_CASE("backward: error contracts") {
    Tape<double> tp;
    auto w = tp.leaf(Tensor<double>({2}, {1.0, 2.0}), true, "w");
    auto y = mul(tp, w, w);
    CHECK_THROWS_WITH_AS(tp.backward(y), doctest::Contains("scalar"), std::runtime_error);

    // NaN loss names the producing op
    Tape<double> tq;
    auto a = tq.leaf(Tensor<double>({1}, {800.0}), true, "a");
    auto e = exp_op(tq, a);  // overflows to inf
    auto loss = sum_all(tq, e);
    CHECK_THROWS_WITH_AS(tq.backward(loss), doctest::Contains("exp"), std::runtime_error);
}

TEST_CASE("unreached parameters keep zero gradient") {
    Tape<double> tp;
    auto w = tp.leaf(Tensor<double>({2}, {1.0, 2.0}), true, "w");
    auto u = tp.leaf(Tensor<double>({2}, {5.0, 6.0}), true, "u");
    auto loss = sum_all(tp, w);
    tp.backward(loss);
    CHECK(u->grad.data.empty());  // never touched
    CHECK(w->grad[0] == 1.0);
}

TEST_CASE("gradcheck: elementwise and activations") {
    Rng rng(3);
    ParamStore<double> store;
    store.add("x", randn<double>({2, 5}, rng));
    store.add("y", randn<double>({2, 5}, rng));
    auto rep = check_grads(store, {"x", "y"}, [](Tape<double>& tp, BoundParams<double>& P) {
        auto a = silu_op(tp, P["x"]);
        auto b = gelu_op(tp, P["y"]);
        auto c = mul(tp, a, b);
        auto d = sigmoid_op(tp, add(tp, c, P["x"]));
        auto e = softplus_op(tp, sub(tp, d, P["y"]));
        auto f = exp_op(tp, scale(tp, e, 0.3));
        return project_sum(tp, f, 11);
    });
    INFO(rep.summary());
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradcheck: linear, bias, layer_norm") {
    Rng rng(4);
    ParamStore<double> store;
    store.add("x", randn<double>({3, 4, 6}, rng));
    store.add("w", randn<double>({5, 6}, rng, 0.4));
    store.add("b", randn<double>({5}, rng, 0.2));
    store.add("g", rand_uniform<double>({5}, rng, 0.5, 1.5));
    store.add("beta", randn<double>({5}, rng, 0.1));
    auto rep = check_grads(store, {"x", "w", "b", "g", "beta"}, [](Tape<double>& tp, BoundParams<double>& P) {
        auto y = linear(tp, P["x"], P["w"], P["b"]);
        auto z = layer_norm(tp, y, P["g"], P["beta"], 1e-5);
        return project_sum(tp, z, 12);
    });
    INFO(rep.summary());
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("layer_norm near-zero variance flagged as skipped") {
    ParamStore<double> store;
    store.add("x", Tensor<double>({1, 8}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5}));
    store.add("g", Tensor<double>::full({8}, 1.0));
    store.add("beta", Tensor<double>::zeros({8}));
    // eps below the FD step squared: perturbations drive the row through the
    // |x|-like kink at zero variance, which the checker must flag, not fail
    auto rep = check_grads(store, {"x"}, [](Tape<double>& tp, BoundParams<double>& P) {
        auto z = layer_norm(tp, P["x"], P["g"], P["beta"], 1e-14);
        return project_sum(tp, z, 13);
    });
    bool flagged = false;
    for (auto& it : rep.items)
        if (it.name == "x" && (it.skipped || it.n_skipped > 0)) flagged = true;
    CHECK(flagged);
}

TEST_CASE("gradcheck: slicing, concat, flip, embedding, broadcast") {
    Rng rng(5);
    ParamStore<double> store;
    store.add("x", randn<double>({2, 3, 6}, rng));
    store.add("tab", randn<double>({4, 6}, rng));
    store.add("v", randn<double>({6}, rng));
    auto rep = check_grads(store, {"x", "tab", "v"}, [](Tape<double>& tp, BoundParams<double>& P) {
        auto a = slice_last(tp, P["x"], 0, 3);
        auto b = slice_last(tp, P["x"], 3, 6);
        auto c = concat_last(tp, a, b);          // == x
        auto f = flip_time(tp, c);
        auto r = rows_embed(tp, P["tab"], {2, 0});
        auto g = add_rows_over_time(tp, f, r);
        auto h = mul_lastdim(tp, g, P["v"]);
        auto i = add_bias(tp, h, P["v"]);
        return project_sum(tp, i, 14);
    });
    INFO(rep.summary());
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: tcn_conv centered and causal") {
    Rng rng(6);
    for (bool causal : {false, true}) {
        ParamStore<double> store;
        store.add("x", randn<double>({2, 3, 7}, rng));
        store.add("w", randn<double>({4, 3}, rng, 0.5));
        store.add("b", randn<double>({4}, rng, 0.2));
        auto rep = check_grads(store, {"x", "w", "b"}, [causal](Tape<double>& tp, BoundParams<double>& P) {
            auto h = gelu_op(tp, tcn_conv(tp, P["x"], P["w"], P["b"], causal));
            return project_sum(tp, h, 15);
        });
        INFO("causal=", causal, "\n", rep.summary());
        CHECK(rep.pass);
        CHECK(rep.max_rel_err < 1e-5);
    }
}

TEST_CASE("gradcheck: eca pieces") {
    Rng rng(7);
    for (bool causal : {false, true}) {
        ParamStore<double> store;
        store.add("h", randn<double>({2, 5, 3, 6}, rng));
        store.add("we", randn<double>({5}, rng, 0.5));
        auto rep = check_grads(store, {"h", "we"}, [causal](Tape<double>& tp, BoundParams<double>& P) {
            auto e = eca_energy(tp, P["h"], causal);
            auto a = sigmoid_op(tp, chan_conv(tp, e, P["we"]));
            auto ht = scale_channels(tp, P["h"], a);
            auto f = flatten_cd(tp, ht);
            return project_sum(tp, f, 16);
        });
        INFO("causal=", causal, "\n", rep.summary());
        CHECK(rep.pass);
        CHECK(rep.max_rel_err < 1e-5);
    }
}

TEST_CASE("fused tokenizer frontend equals composed path and passes gradcheck") {
    Rng rng(8);
    for (bool causal : {false, true}) {
        ParamStore<double> store;
        store.add("x", randn<double>({2, 5, 9}, rng));
        store.add("wt", randn<double>({3, 3}, rng, 0.5));
        store.add("bt", randn<double>({3}, rng, 0.2));
        store.add("we", randn<double>({5}, rng, 0.5));

        Tape<double> tp(false);
        BoundParams<double> P(tp, store);
        auto fused = tokenizer_frontend(tp, P["x"], P["wt"], P["bt"], P["we"], causal);
        auto h = gelu_op(tp, tcn_conv(tp, P["x"], P["wt"], P["bt"], causal));
        auto e = eca_energy(tp, h, causal);
        auto a = sigmoid_op(tp, chan_conv(tp, e, P["we"]));
        auto composed = flatten_cd(tp, scale_channels(tp, h, a));
        REQUIRE(fused->value.same_shape(composed->value));
        double max_diff = 0;
        for (int64_t i = 0; i < fused->value.numel(); ++i)
            max_diff = std::max(max_diff, std::abs(fused->value[i] - composed->value[i]));
        CHECK(max_diff < 1e-12);

        auto rep = check_grads(store, {"x", "wt", "bt", "we"}, [causal](Tape<double>& tq, BoundParams<double>& Q) {
            auto f = tokenizer_frontend(tq, Q["x"], Q["wt"], Q["bt"], Q["we"], causal);
            return project_sum(tq, f, 17);
        });
        INFO("causal=", causal, "\n", rep.summary());
        CHECK(rep.pass);
        CHECK(rep.max_rel_err < 1e-5);
    }
}

TEST_CASE("gradcheck: depthwise causal conv") {
    Rng rng(9);
    ParamStore<double> store;
    store.add("x", randn<double>({2, 6, 4}, rng));
    store.add("w", randn<double>({4, 4}, rng, 0.5));
    store.add("b", randn<double>({4}, rng, 0.2));
    auto rep = check_grads(store, {"x", "w", "b"}, [](Tape<double>& tp, BoundParams<double>& P) {
        auto y = silu_op(tp, dwconv_causal(tp, P["x"], P["w"], P["b"]));
        return project_sum(tp, y, 18);
    });
    INFO(rep.summary());
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("rope: identity at t=0, norm preservation, shift invariance, gradcheck") {
    Rng rng(10);
    Tensor<double> v = randn<double>({1, 3, 8}, rng);
    Tape<double> tp(false);
    auto x = tp.leaf(v, false, "x");
    auto y0 = rope(tp, x, 0, 10000.0);
    for (int64_t i = 0; i < 8; ++i) CHECK(y0->value[i] == doctest::Approx(v[i]).epsilon(1e-12));

    for (int64_t t = 0; t < 3; ++t) {
        double n_in = 0, n_out = 0;
        for (int64_t i = 0; i < 8; ++i) {
            n_in += v.at(0, t, i) * v.at(0, t, i);
            n_out += y0->value.at(0, t, i) * y0->value.at(0, t, i);
        }
        CHECK(std::sqrt(n_out) == doctest::Approx(std::sqrt(n_in)).epsilon(1e-10));
    }

    // <rope(b,t1), rope(c,t2)> == <rope(b,t1+s), rope(c,t2+s)>
    Rng rng2(11);
    Tensor<double> b = randn<double>({1, 1, 8}, rng2), c = randn<double>({1, 1, 8}, rng2);
    auto dot_at = [&](int64_t t1, int64_t t2) {
        Tape<double> tq(false);
        auto rb = rope(tq, tq.leaf(b, false), t1, 10000.0);
        auto rc = rope(tq, tq.leaf(c, false), t2, 10000.0);
        double d = 0;
        for (int64_t i = 0; i < 8; ++i) d += rb->value[i] * rc->value[i];
        return d;
    };
    for (int64_t s : {1, 5, 40}) CHECK(dot_at(3, 9) == doctest::Approx(dot_at(3 + s, 9 + s)).epsilon(1e-6));

    // odd N rejected
    Tape<double> tr(false);
    auto bad = tr.leaf(Tensor<double>({1, 1, 7}), false);
    CHECK_THROWS(rope(tr, bad, 0, 10000.0));

    ParamStore<double> store;
    store.add("x", randn<double>({2, 4, 6}, rng));
    auto rep = check_grads(store, {"x"}, [](Tape<double>& tq, BoundParams<double>& P) {
        return project_sum(tq, rope(tq, P["x"], 3, 10000.0), 19);
    });
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("ssd_scan: hand-unrolled recurrence and pure skip") {
    // H=1, P=1, N=1, abar=0.5, bk=ck=1, D=0, u=[1,0,0] -> y=[1,0.5,0.25]
    Tape<double> tp(false);
    auto u = tp.leaf(Tensor<double>({1, 3, 1}, {1, 0, 0}), false);
    auto ab = tp.leaf(Tensor<double>({1, 3, 1}, {0.5, 0.5, 0.5}), false);
    auto bk = tp.leaf(Tensor<double>::full({1, 3, 1}, 1.0), false);
    auto ck = tp.leaf(Tensor<double>::full({1, 3, 1}, 1.0), false);
    auto d = tp.leaf(Tensor<double>::zeros({1}), false);
    auto y = ssd_scan(tp, u, ab, bk, ck, d, 1, 1);
    CHECK(y->value[0] == doctest::Approx(1.0));
    CHECK(y->value[1] == doctest::Approx(0.5));
    CHECK(y->value[2] == doctest::Approx(0.25));

    // B=C=0 -> y_t = D_h u_t exactly
    Tape<double> tq(false);
    Rng rng(12);
    Tensor<double> uv = randn<double>({2, 4, 6}, rng);
    auto u2 = tq.leaf(uv, false);
    auto ab2 = tq.leaf(rand_uniform<double>({2, 4, 2}, rng, 0.1, 0.9), false);
    auto z1 = tq.leaf(Tensor<double>::zeros({2, 4, 3}), false);
    auto z2 = tq.leaf(Tensor<double>::zeros({2, 4, 3}), false);
    auto d2 = tq.leaf(Tensor<double>({2}, {1.5, -2.0}), false);
    auto y2 = ssd_scan(tq, u2, ab2, z1, z2, d2, 2, 3);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t t = 0; t < 4; ++t)
            for (int64_t h = 0; h < 2; ++h)
                for (int64_t p = 0; p < 3; ++p)
                    CHECK(y2->value.at(b, t, h * 3 + p) ==
                          doctest::Approx(d2->value[h] * uv.at(b, t, h * 3 + p)).epsilon(1e-12));
}

TEST_CASE("ssd_scan matches an independent naive oracle") {
    // oracle: direct dense recurrence, written without any shared kernels
    Rng rng(13);
    const int64_t B = 2, Tn = 16, H = 2, P = 3, N = 4;
    Tensor<double> u = randn<double>({B, Tn, H * P}, rng);
    Tensor<double> ab = rand_uniform<double>({B, Tn, H}, rng, 0.05, 0.98);
    Tensor<double> bk = randn<double>({B, Tn, N}, rng);
    Tensor<double> ck = randn<double>({B, Tn, N}, rng);
    Tensor<double> dd = randn<double>({H}, rng);

    Tensor<double> want({B, Tn, H * P});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h) {
            std::vector<double> S(static_cast<size_t>(N * P), 0.0);
            for (int64_t t = 0; t < Tn; ++t) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t p = 0; p < P; ++p)
                        S[n * P + p] = ab.at(b, t, h) * S[n * P + p] + bk.at(b, t, n) * u.at(b, t, h * P + p);
                for (int64_t p = 0; p < P; ++p) {
                    double acc = dd[h] * u.at(b, t, h * P + p);
                    for (int64_t n = 0; n < N; ++n) acc += ck.at(b, t, n) * S[n * P + p];
                    want.at(b, t, h * P + p) = acc;
                }
            }
        }

    Tape<double> tp(false);
    auto y = ssd_scan(tp, tp.leaf(u, false), tp.leaf(ab, false), tp.leaf(bk, false), tp.leaf(ck, false),
                      tp.leaf(dd, false), H, N);
    double max_diff = 0;
    for (int64_t i = 0; i < want.numel(); ++i) max_diff = std::max(max_diff, std::abs(y->value[i] - want[i]));
    CHECK(max_diff < 1e-10);
}

TEST_CASE("gradcheck: ssd_scan (T spanning checkpoint segments)") {
    Rng rng(14);
    // T=70 crosses the seg=64 checkpoint boundary on purpose
    ParamStore<double> store;
    store.add("u", randn<double>({2, 70, 6}, rng, 0.5));
    store.add("ab_raw", randn<double>({2, 70, 2}, rng, 0.5));
    store.add("bk", randn<double>({2, 70, 4}, rng, 0.5));
    store.add("ck", randn<double>({2, 70, 4}, rng, 0.5));
    store.add("d", randn<double>({2}, rng, 0.5));
    auto rep = check_grads(store, {"u", "ab_raw", "bk", "ck", "d"}, [](Tape<double>& tp, BoundParams<double>& P) {
        auto ab = sigmoid_op(tp, P["ab_raw"]);  // keep abar in (0,1)
        auto y = ssd_scan(tp, P["u"], ab, P["bk"], P["ck"], P["d"], 2, 4);
        return project_sum(tp, y, 20);
    });
    INFO(rep.summary());
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("loss ops: hand values and gradchecks") {
    // cmae: C=2, two masked positions, residuals (1,1),(2,0) -> 3
    {
        Tape<double> tp(false);
        Tensor<double> target({1, 3, 2});
        Tensor<double> xhat = target;
        xhat.at(0, 0, 0) += 1;
        xhat.at(0, 0, 1) += 1;
        xhat.at(0, 2, 0) += 2;
        xhat.at(0, 1, 0) += 99;  // unmasked: must not contribute
        Tensor<uint8_t> mask({1, 3});
        mask.at(0, 0) = 1;
        mask.at(0, 2) = 1;
        auto l = cmae_loss(tp, tp.leaf(xhat, false), target, mask);
        CHECK(l->value[0] == doctest::Approx(3.0));
    }
    // masked-only gradient flow: grads at unmasked positions exactly zero
    {
        Tape<double> tp;
        Rng rng(15);
        Tensor<double> xhat = randn<double>({2, 4, 3}, rng);
        Tensor<double> target = randn<double>({2, 4, 3}, rng);
        Tensor<uint8_t> mask({2, 4});
        mask.at(0, 1) = 1;
        mask.at(1, 3) = 1;
        auto xh = tp.leaf(xhat, true);
        auto l = cmae_loss(tp, xh, target, mask);
        tp.backward(l);
        for (int64_t b = 0; b < 2; ++b)
            for (int64_t t = 0; t < 4; ++t)
                for (int64_t c = 0; c < 3; ++c) {
                    if (mask.at(b, t)) continue;
                    CHECK(xh->grad.at(b, t, c) == 0.0);
                }
    }
    // empty mask is an error
    {
        Tape<double> tp(false);
        Tensor<uint8_t> mask({1, 3});
        auto xh = tp.leaf(Tensor<double>({1, 3, 2}), false);
        CHECK_THROWS(cmae_loss(tp, xh, Tensor<double>({1, 3, 2}), mask));
    }
    // cosine: zs = zt -> 0; orthogonal -> 1; zs = -zt -> 2
    {
        Tape<double> tp(false);
        Rng rng(16);
        Tensor<double> z = randn<double>({2, 3, 4}, rng);
        CHECK(cosine_align_loss(tp, tp.leaf(z, false), z)->value[0] == doctest::Approx(0.0).epsilon(1e-10));
        Tensor<double> neg = z;
        for (auto& v : neg.data) v = -v;
        CHECK(cosine_align_loss(tp, tp.leaf(neg, false), z)->value[0] == doctest::Approx(2.0).epsilon(1e-10));
        Tensor<double> zs({1, 1, 2}, {1.0, 0.0}), zt({1, 1, 2}, {0.0, 1.0});
        CHECK(cosine_align_loss(tp, tp.leaf(zs, false), zt)->value[0] == doctest::Approx(1.0));
    }
    // velocity: T=2, residuals (1,0),(0,1) -> 0.5 ; recon: T=1,C=2 residual (3,4) -> 25
    {
        Tape<double> tp(false);
        Tensor<double> v({1, 2, 2});
        Tensor<double> vh = v;
        vh.at(0, 0, 0) = 1;
        vh.at(0, 1, 1) = 1;
        CHECK(velocity_mse(tp, tp.leaf(vh, false), v)->value[0] == doctest::Approx(0.5));
        Tensor<double> x({1, 1, 2});
        Tensor<double> xh({1, 1, 2}, {3.0, 4.0});
        CHECK(recon_mse(tp, tp.leaf(xh, false), x)->value[0] == doctest::Approx(25.0));
    }
    // gradchecks
    {
        Rng rng(17);
        ParamStore<double> store;
        store.add("zs", randn<double>({2, 3, 5}, rng));
        Tensor<double> zt = randn<double>({2, 3, 5}, rng);
        auto rep = check_grads(store, {"zs"}, [&](Tape<double>& tp, BoundParams<double>& P) {
            return cosine_align_loss(tp, P["zs"], zt);
        });
        CHECK(rep.pass);
        CHECK(rep.max_rel_err < 1e-5);
    }
    {
        Rng rng(18);
        ParamStore<double> store;
        store.add("xh", randn<double>({2, 4, 3}, rng));
        Tensor<double> tgt = randn<double>({2, 4, 3}, rng);
        Tensor<uint8_t> mask({2, 4});
        mask.at(0, 0) = mask.at(0, 2) = mask.at(1, 1) = 1;
        auto rep = check_grads(store, {"xh"}, [&](Tape<double>& tp, BoundParams<double>& P) {
            return cmae_loss(tp, P["xh"], tgt, mask);
        });
        CHECK(rep.pass);
        Tensor<double> v = randn<double>({2, 4, 2}, rng);
        ParamStore<double> s2;
        s2.add("vh", randn<double>({2, 4, 2}, rng));
        auto rep2 = check_grads(s2, {"vh"}, [&](Tape<double>& tp, BoundParams<double>& P) {
            return velocity_mse(tp, P["vh"], v);
        });
        CHECK(rep2.pass);
    }
}

TEST_CASE("masked_replace semantics and grads") {
    Rng rng(19);
    Tensor<double> z = randn<double>({2, 3, 4}, rng);
    Tensor<double> tok = randn<double>({4}, rng);
    Tensor<uint8_t> none({2, 3}), all({2, 3}), mixed({2, 3});
    std::fill(all.data.begin(), all.data.end(), uint8_t(1));
    mixed.at(0, 1) = 1;
    mixed.at(1, 2) = 1;

    Tape<double> tp(false);
    auto zn = tp.leaf(z, false);
    auto tk = tp.leaf(tok, false);
    auto out_none = masked_replace(tp, zn, none, tk);
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(out_none->value[i] == z[i]);
    auto out_all = masked_replace(tp, zn, all, tk);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t t = 0; t < 3; ++t)
            for (int64_t j = 0; j < 4; ++j) CHECK(out_all->value.at(b, t, j) == tok[j]);
    auto out_mixed = masked_replace(tp, zn, mixed, tk);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t t = 0; t < 3; ++t)
            for (int64_t j = 0; j < 4; ++j) {
                const double want = mixed.at(b, t) ? tok[j] : z.at(b, t, j);
                CHECK(out_mixed->value.at(b, t, j) == want);  // unmasked stay bit-identical
            }

    ParamStore<double> store;
    store.add("z", randn<double>({2, 3, 4}, rng));
    store.add("tok", randn<double>({4}, rng));
    auto rep = check_grads(store, {"z", "tok"}, [&](Tape<double>& tq, BoundParams<double>& P) {
        return project_sum(tq, masked_replace(tq, P["z"], mixed, P["tok"]), 21);
    });
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("adamw: first step, zero grad, lr=0, missing grads") {
    ParamStore<double> store;
    store.add("p", Tensor<double>({1}, {1.0}));
    CHECK_THROWS_WITH_AS(store.adamw_step(0.1, 0.0), doctest::Contains("missing gradient"), std::runtime_error);

    store.zero_grads();
    store.grad("p")[0] = 1.0;
    store.adamw_step(0.1, 0.0);
    CHECK(store.value("p")[0] == doctest::Approx(0.9).epsilon(1e-6));  // bias-corrected first step = lr*sign(g)

    // zero gradient leaves the parameter unchanged
    ParamStore<double> s2;
    s2.add("p", Tensor<double>({1}, {0.7}));
    s2.zero_grads();
    s2.adamw_step(0.1, 0.0);
    CHECK(s2.value("p")[0] == doctest::Approx(0.7));

    // lr = 0 leaves parameters unchanged even with grads and wd
    ParamStore<double> s3;
    s3.add("p", Tensor<double>({2}, {0.3, -0.4}));
    s3.zero_grads();
    s3.grad("p")[0] = 2.0;
    s3.adamw_step(0.0, 1e-5);
    CHECK(s3.value("p")[0] == doctest::Approx(0.3));
    CHECK(s3.value("p")[1] == doctest::Approx(-0.4));
}

TEST_CASE("clip_global_norm: hand case, threshold, zero, idempotence, errors") {
    ParamStore<double> store;
    store.add("g", Tensor<double>({2}, {0.0, 0.0}));
    store.zero_grads();
    store.grad("g")[0] = 3.0;
    store.grad("g")[1] = 4.0;
    const double factor = store.clip_global_norm(1.0);
    CHECK(factor == doctest::Approx(0.2));
    CHECK(store.grad("g")[0] == doctest::Approx(0.6));
    CHECK(store.grad("g")[1] == doctest::Approx(0.8));
    // idempotent
    CHECK(store.clip_global_norm(1.0) == doctest::Approx(1.0));
    CHECK(store.grad("g")[0] == doctest::Approx(0.6));

    ParamStore<double> s2;
    s2.add("g", Tensor<double>({1}, {0.0}));
    s2.zero_grads();
    s2.grad("g")[0] = 0.1;
    CHECK(s2.clip_global_norm(1.0) == doctest::Approx(1.0));
    CHECK(s2.grad("g")[0] == doctest::Approx(0.1));

    ParamStore<double> s3;
    s3.add("g", Tensor<double>({3}));
    s3.zero_grads();
    CHECK(s3.clip_global_norm(1.0) == doctest::Approx(1.0));  // zero-norm guard

    CHECK_THROWS(s3.clip_global_norm(0.0));
    CHECK_THROWS(s3.clip_global_norm(-1.0));
}

TEST_CASE("schedules") {
    TrainSchedule warmup;
    warmup.kind = SchedulerKind::WarmupExpDecay;
    warmup.peak_lr = 6.25e-4;
    warmup.warmup_epochs = 4;
    warmup.decay_rate = 0.995;
    warmup.max_epochs = 75;
    warmup.patience = 10;
    warmup.validate();
    CHECK(warmup.lr_at(0) == doctest::Approx(6.25e-4 / 4));
    CHECK(warmup.lr_at(3) == doctest::Approx(6.25e-4));
    CHECK(warmup.lr_at(4) == doctest::Approx(6.25e-4 * 0.995));

    TrainSchedule cos;
    cos.kind = SchedulerKind::CosineAnnealing;
    cos.peak_lr = 5e-4;
    cos.min_lr = 5e-6;
    cos.warmup_epochs = 0;
    cos.max_epochs = 100;
    cos.patience = 30;
    cos.validate();
    CHECK(cos.lr_at(0) == doctest::Approx(5e-4));
    CHECK(cos.lr_at(99) == doctest::Approx(5e-6));
    CHECK(cos.lr_at(49) < 5e-4);
    CHECK(cos.lr_at(49) > 5e-6);

    TrainSchedule bad;
    bad.min_lr = 1.0;
    bad.peak_lr = 0.5;
    CHECK_THROWS(bad.validate());
    TrainSchedule bad2;
    bad2.patience = 100;
    bad2.max_epochs = 10;
    CHECK_THROWS(bad2.validate());
}

TEST_CASE("checkpoint io: round-trip and error cases") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "realm_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "w.ckpt").string();

    Rng rng(20);
    ParamStore<float> store;
    store.add("a.w", randn<float>({3, 4}, rng));
    store.add("a.b", randn<float>({4}, rng));
    store.add("z", randn<float>({2, 2, 2}, rng));
    write_checkpoint(path, store);

    auto back = read_checkpoint<float>(path);
    for (const auto& [name, e] : store.entries()) {
        REQUIRE(back.has(name));
        const auto& r = back.value(name);
        REQUIRE(r.shape == e.value.shape);
        for (int64_t i = 0; i < r.numel(); ++i) CHECK(r[i] == e.value[i]);  // bit-exact f32 round-trip
    }

    // f64 round-trip
    ParamStore<double> d64;
    d64.add("x", randn<double>({5}, rng));
    const std::string p64 = (dir / "w64.ckpt").string();
    write_checkpoint(p64, d64);
    auto b64 = read_checkpoint<double>(p64);
    for (int64_t i = 0; i < 5; ++i) CHECK(b64.value("x")[i] == d64.value("x")[i]);

    // bad magic
    {
        std::ofstream os(dir / "bad.ckpt", std::ios::binary);
        os << "XXXXgarbage";
    }
    CHECK_THROWS_WITH_AS(read_checkpoint<float>((dir / "bad.ckpt").string()), doctest::Contains("magic"),
                         std::runtime_error);

    // version mismatch
    {
        std::ofstream os(dir / "ver.ckpt", std::ios::binary);
        os << "RLMW";
        uint32_t v = 99, n = 0;
        os.write(reinterpret_cast<char*>(&v), 4);
        os.write(reinterpret_cast<char*>(&n), 4);
    }
    CHECK_THROWS_WITH_AS(read_checkpoint<float>((dir / "ver.ckpt").string()), doctest::Contains("version"),
                         std::runtime_error);

    // truncation
    {
        std::ifstream is(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        std::ofstream os(dir / "trunc.ckpt", std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_WITH_AS(read_checkpoint<float>((dir / "trunc.ckpt").string()), doctest::Contains("truncated"),
                         std::runtime_error);
}

TEST_CASE("finite_diff_check rejects nondeterministic forwards") {
    ParamStore<double> store;
    store.add("p", Tensor<double>({1}, {1.0}));
    int calls = 0;
    auto loss_fn = [&](bool) { return static_cast<double>(++calls); };
    CHECK_THROWS_WITH_AS(finite_diff_check<double>(store, {"p"}, loss_fn, 1e-3), doctest::Contains("nondeterministic"),
                         std::runtime_error);
}

TEST_CASE("dropout: eval identity, inverted scaling, drop statistics") {
    Rng rng(21);
    Tensor<double> x = Tensor<double>::full({1000}, 1.0);
    Tape<double> tp(false);
    auto xn = tp.leaf(x, false);
    CHECK(dropout(tp, xn, 0.0, nullptr) == xn);  // rate 0: same node
    Rng drng(22);
    auto y = dropout(tp, xn, 0.3, &drng);
    int64_t dropped = 0;
    double mean = 0;
    for (int64_t i = 0; i < 1000; ++i) {
        if (y->value[i] == 0.0)
            ++dropped;
        else
            CHECK(y->value[i] == doctest::Approx(1.0 / 0.7));
        mean += y->value[i];
    }
    CHECK(dropped > 230);
    CHECK(dropped < 370);
    CHECK(mean / 1000 == doctest::Approx(1.0).epsilon(0.1));
}
