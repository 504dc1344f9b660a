#include <catch2/catch_amalgamated.hpp>

#include "msfuse/nn.hpp"
#include "msfuse/tape.hpp"
#include "oracles.hpp"

using msfuse::Rng;
using msfuse::Tensor;
using msfuse::ad::Tape;
using msfuse::ad::Var;
namespace nn = msfuse::nn;

TEST_CASE("elementwise and reduction gradients match finite differences", "[tape]") {
    Rng rng(42);
    Tensor a = oracles::random_tensor({3, 4}, rng);
    Tensor b = oracles::random_tensor({3, 4}, rng, 0.1, 1.0);

    auto build = [&](Tape& t) {
        Var va = t.param(&a);
        Var vb = t.param(&b);
        Var x = t.mul(t.add(va, vb), t.sub(va, vb));
        x = t.tanh_(t.affine(x, 0.5, 0.1));
        return t.mean(t.mul(t.sigmoid(x), t.relu(va)));
    };
    auto rep = oracles::fd_check({{"a", &a}, {"b", &b}}, build);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("matmul family gradients", "[tape]") {
    Rng rng(7);
    Tensor a = oracles::random_tensor({4, 3}, rng);
    Tensor b = oracles::random_tensor({3, 5}, rng);
    Tensor w = oracles::random_tensor({2, 5}, rng);
    Tensor v = oracles::random_tensor({4}, rng);

    auto build = [&](Tape& t) {
        Var p = t.matmul(t.param(&a), t.param(&b));      // 4x5
        Var q = t.matmul_nt(p, t.param(&w));             // 4x2
        Var r = t.tmatvec(q, t.param(&v));               // 2
        return t.sum(t.mul(r, r));
    };
    auto rep = oracles::fd_check({{"a", &a}, {"b", &b}, {"w", &w}, {"v", &v}}, build);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("softmax, norm2, dot, bce gradients", "[tape]") {
    Rng rng(11);
    Tensor x = oracles::random_tensor({6}, rng);
    Tensor y = oracles::random_tensor({6}, rng, 0.2, 1.2);

    auto build = [&](Tape& t) {
        Var s = t.softmax(t.param(&x));
        Var d = t.dot(s, t.param(&y));
        Var n = t.norm2(t.sub(s, t.param(&y)));
        return t.add(t.bce_with_logit(d, 1.0), t.bce_with_logit(n, 0.0));
    };
    auto rep = oracles::fd_check({{"x", &x}, {"y", &y}}, build);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("conv1d matches a naive loop and its gradients check out", "[tape]") {
    Rng rng(3);
    Tensor x = oracles::random_tensor({2, 11}, rng);
    Tensor w = oracles::random_tensor({3, 2, 4}, rng);
    Tensor b = oracles::random_tensor({3}, rng);
    int stride = 2;

    Tape t;
    Var out = t.conv1d(t.param(&x), t.param(&w), t.param(&b), stride);
    const Tensor& o = t.val(out);
    REQUIRE(o.shape() == std::vector<int>{3, 4});
    // naive re-evaluation
    for (int oc = 0; oc < 3; ++oc) {
        for (int p = 0; p < 4; ++p) {
            double s = b[oc];
            for (int ic = 0; ic < 2; ++ic)
                for (int j = 0; j < 4; ++j) s += x.at(ic, p * stride + j) * w[(oc * 2 + ic) * 4 + j];
            CHECK(o.at(oc, p) == Catch::Approx(s).margin(1e-12));
        }
    }

    auto build = [&](Tape& tt) {
        Var c = tt.conv1d(tt.param(&x), tt.param(&w), tt.param(&b), stride);
        return tt.sum(tt.mul(c, c));
    };
    auto rep = oracles::fd_check({{"x", &x}, {"w", &w}, {"b", &b}}, build);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("conv3d matches a naive loop and its gradients check out", "[tape]") {
    Rng rng(5);
    Tensor x = oracles::random_tensor({2, 5, 6, 4}, rng);
    Tensor w = oracles::random_tensor({3, 2, 3, 3, 3}, rng);
    Tensor b = oracles::random_tensor({3}, rng);
    int stride = 2, pad = 1;

    Tape t;
    Var out = t.conv3d(t.param(&x), t.param(&w), t.param(&b), stride, pad);
    const Tensor& o = t.val(out);
    int ex = (5 + 2 - 3) / 2 + 1, ey = (6 + 2 - 3) / 2 + 1, ez = (4 + 2 - 3) / 2 + 1;
    REQUIRE(o.shape() == std::vector<int>{3, ex, ey, ez});

    for (int oc = 0; oc < 3; ++oc)
        for (int ox = 0; ox < ex; ++ox)
            for (int oy = 0; oy < ey; ++oy)
                for (int oz = 0; oz < ez; ++oz) {
                    double s = b[oc];
                    for (int ic = 0; ic < 2; ++ic)
                        for (int ki = 0; ki < 3; ++ki)
                            for (int kj = 0; kj < 3; ++kj)
                                for (int kl = 0; kl < 3; ++kl) {
                                    int ix = ox * stride - pad + ki;
                                    int iy = oy * stride - pad + kj;
                                    int iz = oz * stride - pad + kl;
                                    if (ix < 0 || ix >= 5 || iy < 0 || iy >= 6 || iz < 0 || iz >= 4)
                                        continue;
                                    s += x[((ic * 5 + ix) * 6 + iy) * 4 + iz] *
                                         w[(((oc * 2 + ic) * 3 + ki) * 3 + kj) * 3 + kl];
                                }
                    CHECK(o[((oc * ex + ox) * ey + oy) * ez + oz] == Catch::Approx(s).margin(1e-12));
                }

    auto build = [&](Tape& tt) {
        Var c = tt.conv3d(tt.param(&x), tt.param(&w), tt.param(&b), stride, pad);
        Var m = tt.volume_mean(tt.relu(c));
        return tt.sum(tt.mul(m, m));
    };
    auto rep = oracles::fd_check({{"x", &x}, {"w", &w}, {"b", &b}}, build);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gru step gradients", "[tape]") {
    Rng rng(9);
    nn::GruParams gp = nn::GruParams::init(rng, 3, 4);
    Tensor x = oracles::random_tensor({5, 4}, rng);
    Tensor h = oracles::random_tensor({5, 3}, rng);

    auto build = [&](Tape& t) {
        auto bound = nn::bind(t, gp);
        Var out = nn::gru_step_rows(t, bound, t.param(&x), t.param(&h));
        out = nn::gru_step_rows(t, bound, t.param(&x), out);
        return t.sum(t.mul(out, out));
    };
    nn::ParamRefs refs = gp.params();
    refs.push_back({"x", &x});
    refs.push_back({"h", &h});
    auto rep = oracles::fd_check(refs, build);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-6);
    CHECK(rep.coords_checked > 100);
}

TEST_CASE("gather, stack, slice, concat, pad gradients", "[tape]") {
    Rng rng(13);
    Tensor table = oracles::random_tensor({6, 3}, rng);
    Tensor v = oracles::random_tensor({4}, rng);

    auto build = [&](Tape& t) {
        Var g = t.gather_rows(t.param(&table), {0, 2, 2, 5});  // duplicate index on purpose
        Var s = t.slice_rows(g, 1, 4);
        std::vector<Var> rows = {t.row(s, 0), t.row(s, 2)};
        Var st = t.stack_rows(rows);
        Var flat = t.reshape(st, {6});
        Var c = t.concat({flat, t.pad_tail(t.param(&v), 6)});
        return t.mean(t.mul(c, c));
    };
    auto rep = oracles::fd_check({{"table", &table}, {"v", &v}}, build);
    INFO(rep.worst);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("adam applies no update with zero learning rate", "[tape]") {
    Rng rng(1);
    Tensor p = oracles::random_tensor({4}, rng);
    Tensor before = p;
    Tensor g = oracles::random_tensor({4}, rng);
    nn::Adam opt(0.0);
    opt.step({&p}, {&g});
    for (int i = 0; i < 4; ++i) CHECK(p[i] == before[i]);
}
