#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cseg/losses.hpp"
#include "testing.hpp"

using namespace cseg;
using cseg::testing::fd_check;
using cseg::testing::random_tensor;

TEST_CASE("context_vectors: constant map pools to a constant vector") {
    ScaleFeatures<double> f{Tensor<double>::full({2, 4, 6, 6}, 3.5),
                            Tensor<double>::full({2, 4, 6, 6}, -1.25),
                            Tensor<double>::full({2, 4, 3, 3}, 0.75)};
    Tape<double> tape;
    auto g = context_vectors(tape, f);
    for (double v : g.fine.data()) CHECK(v == doctest::Approx(3.5));
    for (double v : g.small.data()) CHECK(v == doctest::Approx(-1.25));
    for (double v : g.large.data()) CHECK(v == doctest::Approx(0.75));
    CHECK(g.fine.shape() == Shape4{2, 4, 1, 1});
}

TEST_CASE("context_vectors: matches brute-force per-channel mean") {
    Rng rng = make_rng(40);
    ScaleFeatures<double> f{random_tensor({2, 5, 8, 8}, rng), random_tensor({2, 5, 8, 8}, rng),
                            random_tensor({2, 5, 4, 4}, rng)};
    Tape<double> tape;
    auto g = context_vectors(tape, f);
    auto brute = [](const Tensor<double>& t, int b, int c) {
        double s = 0;
        for (int y = 0; y < t.shape().h; ++y)
            for (int x = 0; x < t.shape().w; ++x) s += t.at(b, c, y, x);
        return s / (t.shape().h * t.shape().w);
    };
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 5; ++c) {
            CHECK(g.fine.at(b, c, 0, 0) == doctest::Approx(brute(f.fine, b, c)).epsilon(1e-6));
            CHECK(g.large.at(b, c, 0, 0) == doctest::Approx(brute(f.large, b, c)).epsilon(1e-6));
        }
}

TEST_CASE("inter_scale_loss: equal vectors give zero") {
    auto v = Tensor<double>::from({1, 3, 1, 1}, {1.0, 2.0, 3.0});
    ContextVectors<double> g{v, v, v};
    Tape<double> tape;
    auto l = inter_scale_loss(tape, g, 0.7);
    CHECK(l.item() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("inter_scale_loss: doubly-orthogonal triple with lambda1=1 gives 2") {
    ContextVectors<double> g{Tensor<double>::from({1, 3, 1, 1}, {1, 0, 0}),
                             Tensor<double>::from({1, 3, 1, 1}, {0, 1, 0}),
                             Tensor<double>::from({1, 3, 1, 1}, {0, 0, 1})};
    Tape<double> tape;
    auto l = inter_scale_loss(tape, g, 1.0);
    CHECK(l.item() == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("inter_scale_loss: matches a direct dot/norm reference") {
    Rng rng = make_rng(41);
    const double lambda1 = 0.37;
    auto gf = random_tensor({3, 6, 1, 1}, rng);
    auto gs = random_tensor({3, 6, 1, 1}, rng);
    auto gl = random_tensor({3, 6, 1, 1}, rng);
    Tape<double> tape;
    auto l = inter_scale_loss(tape, {gf, gs, gl}, lambda1);
    auto cosref = [](const Tensor<double>& a, const Tensor<double>& b, int bi) {
        double dot = 0, na = 0, nb = 0;
        for (int i = 0; i < 6; ++i) {
            dot += a.at(bi, i, 0, 0) * b.at(bi, i, 0, 0);
            na += a.at(bi, i, 0, 0) * a.at(bi, i, 0, 0);
            nb += b.at(bi, i, 0, 0) * b.at(bi, i, 0, 0);
        }
        return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-8);
    };
    for (int b = 0; b < 3; ++b) {
        const double expect =
            lambda1 * ((1 - cosref(gf, gs, b)) + (1 - cosref(gs, gl, b)));
        CHECK(l.data()[b] == doctest::Approx(expect).epsilon(1e-6));
        CHECK(l.data()[b] >= 0.0);
        CHECK(l.data()[b] <= 4 * lambda1);
    }
}

TEST_CASE("inter_scale_loss: invariant under positive rescaling of any vector") {
    Rng rng = make_rng(42);
    auto gf = random_tensor({1, 8, 1, 1}, rng);
    auto gs = random_tensor({1, 8, 1, 1}, rng);
    auto gl = random_tensor({1, 8, 1, 1}, rng);
    Tape<double> t1;
    const double base = inter_scale_loss(t1, {gf, gs, gl}, 0.1).item();
    for (double c : {0.01, 3.0, 250.0}) {
        auto scaled = gs.detach_copy();
        for (auto& v : scaled.data()) v *= c;
        Tape<double> t2;
        const double l = inter_scale_loss(t2, {gf, scaled, gl}, 0.1).item();
        CHECK(l == doctest::Approx(base).epsilon(1e-6));
    }
}

TEST_CASE("inter_scale_loss: zero-norm vector is guarded, not NaN") {
    ContextVectors<double> g{Tensor<double>::zeros({1, 4, 1, 1}),
                             Tensor<double>::from({1, 4, 1, 1}, {1, 2, 3, 4}),
                             Tensor<double>::from({1, 4, 1, 1}, {1, 1, 1, 1})};
    Tape<double> tape;
    auto l = inter_scale_loss(tape, g, 1.0);
    CHECK(all_finite(l.data()));
}

TEST_CASE("self_similarity: rows sum to one and entries lie in (0,1)") {
    Rng rng = make_rng(43);
    auto map = random_tensor({2, 4, 8, 8}, rng);
    Tape<double> tape;
    auto a = self_similarity(tape, map, 4);  // L = 16
    CHECK(a.shape() == Shape4{2, 16, 16, 1});
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 16; ++i) {
            double s = 0;
            for (int j = 0; j < 16; ++j) {
                const double v = a.at(b, i, j, 0);
                CHECK(v > 0.0);
                CHECK(v < 1.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-5);
        }
}

TEST_CASE("self_similarity: orthogonal equal-norm tokens force equal off-diagonals") {
    // 4x4 map pooled at grid 2 gives L=4 tokens; craft the map so the 4
    // pooled tokens are orthogonal with equal norms.
    const int d = 4;
    auto map = Tensor<double>::zeros({1, d, 2, 2});
    for (int t = 0; t < 4; ++t) map.at(0, t, t / 2, t % 2) = 2.0;  // token t = 2*e_t
    Tape<double> tape;
    auto a = self_similarity(tape, map, 2);
    const double s = 4.0 / std::sqrt(static_cast<double>(d));  // diagonal logit
    const double diag = std::exp(s) / (std::exp(s) + 3.0);
    const double off = 1.0 / (std::exp(s) + 3.0);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(a.at(0, i, j, 0) == doctest::Approx(i == j ? diag : off).epsilon(1e-9));
}

TEST_CASE("self_similarity: matches a naive pooled Gram + softmax reference") {
    Rng rng = make_rng(44);
    const int d = 3, grid = 2;
    auto map = random_tensor({1, d, 4, 4}, rng);
    Tape<double> tape;
    auto a = self_similarity(tape, map, grid);
    // Naive reference: 2x2 average pool, flatten row-major, Gram / sqrt(D),
    // row softmax.
    double tokens[4][3];
    for (int ty = 0; ty < 2; ++ty)
        for (int tx = 0; tx < 2; ++tx)
            for (int c = 0; c < d; ++c) {
                double s = 0;
                for (int y = 2 * ty; y < 2 * ty + 2; ++y)
                    for (int x = 2 * tx; x < 2 * tx + 2; ++x) s += map.at(0, c, y, x);
                tokens[ty * 2 + tx][c] = s / 4.0;
            }
    for (int i = 0; i < 4; ++i) {
        double logits[4], mx = -1e300;
        for (int j = 0; j < 4; ++j) {
            double dot = 0;
            for (int c = 0; c < d; ++c) dot += tokens[i][c] * tokens[j][c];
            logits[j] = dot / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, logits[j]);
        }
        double denom = 0;
        for (int j = 0; j < 4; ++j) denom += std::exp(logits[j] - mx);
        for (int j = 0; j < 4; ++j)
            CHECK(a.at(0, i, j, 0) ==
                  doctest::Approx(std::exp(logits[j] - mx) / denom).epsilon(1e-6));
    }
}

TEST_CASE("self_similarity: map smaller than the grid is rejected") {
    auto map = Tensor<double>::zeros({1, 4, 8, 8});
    Tape<double> tape;
    CHECK_THROWS_WITH_AS(self_similarity(tape, map, 16), doctest::Contains("intra_grid"),
                         Error);
}

TEST_CASE("intra_scale_loss: identity gives zero") {
    const int l = 5;
    auto a = Tensor<double>::zeros({1, l, l, 1});
    for (int i = 0; i < l; ++i) a.at(0, i, i, 0) = 1.0;
    Tape<double> tape;
    CHECK(intra_scale_loss(tape, a, 0.9).item() == doctest::Approx(0.0));
}

TEST_CASE("intra_scale_loss: uniform matrix closed form 2(L-1)/L^2") {
    const int l = 4;
    auto a = Tensor<double>::full({1, l, l, 1}, 1.0 / l);
    Tape<double> tape;
    CHECK(intra_scale_loss(tape, a, 1.0).item() == doctest::Approx(0.375).epsilon(1e-12));
}

TEST_CASE("intra_scale_loss: matches direct summation on random row-stochastic input") {
    Rng rng = make_rng(45);
    const int l = 7;
    auto a = Tensor<double>::zeros({2, l, l, 1});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < l; ++i) {
            double row[16], s = 0;
            for (int j = 0; j < l; ++j) {
                row[j] = u(rng);
                s += row[j];
            }
            for (int j = 0; j < l; ++j) a.at(b, i, j, 0) = row[j] / s;
        }
    const double lambda2 = 0.43;
    Tape<double> tape;
    auto loss = intra_scale_loss(tape, a, lambda2);
    for (int b = 0; b < 2; ++b) {
        double s = 0;
        for (int i = 0; i < l; ++i)
            for (int j = 0; j < l; ++j)
                s += std::abs(a.at(b, i, j, 0) - (i == j ? 1.0 : 0.0));
        CHECK(loss.data()[b] == doctest::Approx(lambda2 * s / (l * l)).epsilon(1e-9));
        CHECK(loss.data()[b] >= 0.0);
    }
}

TEST_CASE("intra_scale_loss: minimized at identity over row-stochastic inputs") {
    Rng rng = make_rng(46);
    const int l = 4;
    auto ident = Tensor<double>::zeros({1, l, l, 1});
    for (int i = 0; i < l; ++i) ident.at(0, i, i, 0) = 1.0;
    Tape<double> t0;
    const double at_identity = intra_scale_loss(t0, ident, 1.0).item();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        auto a = Tensor<double>::zeros({1, l, l, 1});
        for (int i = 0; i < l; ++i) {
            double row[4], s = 0;
            for (int j = 0; j < l; ++j) {
                row[j] = u(rng);
                s += row[j];
            }
            for (int j = 0; j < l; ++j) a.at(0, i, j, 0) = row[j] / s;
        }
        Tape<double> t;
        CHECK(intra_scale_loss(t, a, 1.0).item() >= at_identity);
    }
}

TEST_CASE("pseudo_ce_loss: closed forms") {
    SUBCASE("O = 0.9 everywhere") {
        auto o = Tensor<double>::full({1, 1, 4, 4}, 0.9);
        auto t = threshold_ge(o, 0.5);
        for (double v : t.data()) CHECK(v == 1.0);
        Tape<double> tape;
        CHECK(pseudo_ce_loss(tape, o, t).item() ==
              doctest::Approx(-std::log(0.9)).epsilon(1e-9));
    }
    SUBCASE("O = 0.5 everywhere: threshold is >=, so T = 1") {
        auto o = Tensor<double>::full({1, 1, 4, 4}, 0.5);
        auto t = threshold_ge(o, 0.5);
        for (double v : t.data()) CHECK(v == 1.0);
        Tape<double> tape;
        CHECK(pseudo_ce_loss(tape, o, t).item() ==
              doctest::Approx(-std::log(0.5)).epsilon(1e-9));
    }
}

TEST_CASE("pseudo_ce_loss: matches an elementwise reference on random probabilities") {
    Rng rng = make_rng(47);
    auto o = Tensor<double>::zeros({2, 1, 5, 5});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : o.data()) v = u(rng);
    auto t = threshold_ge(o, 0.5);
    Tape<double> tape;
    const double got = pseudo_ce_loss(tape, o, t).item();
    double ref = 0;
    for (long i = 0; i < o.numel(); ++i) {
        const double p = std::min(1.0 - 1e-7, std::max(1e-7, o.data()[i]));
        ref -= t.data()[i] * std::log(p) + (1 - t.data()[i]) * std::log(1 - p);
    }
    ref /= o.numel();
    CHECK(got == doctest::Approx(ref).epsilon(1e-7));
}

TEST_CASE("pseudo_ce_loss: bounded by log 2 when targets come from own thresholding") {
    Rng rng = make_rng(48);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        auto o = Tensor<double>::zeros({1, 1, 6, 6});
        for (auto& v : o.data()) v = u(rng);
        auto t = threshold_ge(o, 0.5);
        Tape<double> tape;
        CHECK(pseudo_ce_loss(tape, o, t).item() <= std::log(2.0) + 1e-9);
    }
}

TEST_CASE("total loss: zero components give zero and the worked example holds") {
    Tape<double> tape;
    auto zero = Tensor<double>::zeros({1, 1, 1, 1});
    auto zero_b = Tensor<double>::zeros({2, 1, 1, 1});
    CHECK(total_from_components(tape, zero, zero_b, zero_b).item() == 0.0);

    auto ce = Tensor<double>::full({1, 1, 1, 1}, 0.5);
    auto inter = Tensor<double>::from({2, 1, 1, 1}, {0.2, 0.4});
    auto intra = Tensor<double>::from({2, 1, 1, 1}, {0.1, 0.3});
    Tape<double> t2;
    CHECK(total_from_components(t2, ce, inter, intra).item() ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("total_loss: report decomposes exactly per the combination rule") {
    ModelConfig mc;
    mc.sae.embed_dim = 8;
    mc.dat.heads = 2;
    mc.dat.num_blocks = 1;
    mc.seed = 49;
    auto model = Model<double>::build(mc);
    Rng rng = make_rng(50);
    auto img = random_tensor({2, 3, 32, 32}, rng);
    Tape<double> tape;
    auto fr = model.forward(tape, img, true);
    LossConfig lc;
    auto tl = total_loss(tape, fr, lc);
    double recomposed = tl.report.ce;
    for (int b = 0; b < 2; ++b)
        recomposed +=
            (tl.report.inter_per_item[b] + tl.report.intra_per_item[b]) / 2.0;
    CHECK(tl.report.total == doctest::Approx(recomposed).epsilon(1e-12));
    CHECK(tl.report.inter >= 0.0);
    CHECK(tl.report.intra >= 0.0);
    CHECK(tl.report.inter <= 4 * lc.lambda1 + 1e-12);
}

TEST_CASE("total_loss: differentiable end-to-end (spot gradient check)") {
    ModelConfig mc;
    mc.sae.embed_dim = 8;
    mc.dat.heads = 2;
    mc.dat.num_blocks = 1;
    mc.seed = 51;
    auto model = Model<double>::build(mc);
    Rng rng = make_rng(52);
    auto img = random_tensor({1, 3, 32, 32}, rng);
    LossConfig lc;
    auto forward = [&](Tape<double>& t) {
        auto fr = model.forward(t, img, true);
        return total_loss(t, fr, lc).total;
    };
    auto rep = fd_check(forward, model.params.trainable(), 25, 1e-4, 2e-2, 1e-6, rng);
    CHECK_MESSAGE(rep.failed == 0, rep.first_failure);
}
