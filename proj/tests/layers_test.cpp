#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "kneeattn/layers.hpp"
#include "support/gradcheck.hpp"

using namespace kneeattn;
using kneeattn::testing::LossBuilder;
using kneeattn::testing::max_relative_error;
using kneeattn::testing::random_projection;
using kneeattn::testing::random_tensor;

namespace {

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(perm[i], j);
    return out;
}

}  // namespace

TEST(Gru, ZeroWeightsAndInputGiveZeroStates) {
    Tape tape;
    GruWeights w{tape.constant(Tensor({2, 9})), tape.constant(Tensor({3, 9})), tape.constant(Tensor({1, 9})),
                 tape.constant(Tensor({1, 9}))};
    Tensor h = gru_forward(w, tape.constant(Tensor({8, 2})), 2).value();
    EXPECT_EQ(h, Tensor({8, 3}));
}

TEST(Gru, ScalarRecurrenceMatchesHandEvaluation) {
    const double wr = 0.3, wz = -0.4, wn = 0.8, ur = 0.5, uz = 0.2, un = -0.7;
    const double bir = 0.1, biz = 0.05, bin = -0.2, bhr = -0.3, bhz = 0.15, bhn = 0.25;
    const double xs[3] = {0.5, -1.0, 2.0};
    Tape tape;
    GruWeights w{tape.constant(Tensor::row({wr, wz, wn})), tape.constant(Tensor::row({ur, uz, un})),
                 tape.constant(Tensor::row({bir, biz, bin})), tape.constant(Tensor::row({bhr, bhz, bhn}))};
    Tensor h = gru_forward(w, tape.constant(Tensor({3, 1}, std::vector<double>{xs[0], xs[1], xs[2]})), 1).value();

    double prev = 0.0;
    for (int t = 0; t < 3; ++t) {
        double r = sigm(wr * xs[t] + bir + ur * prev + bhr);
        double z = sigm(wz * xs[t] + biz + uz * prev + bhz);
        double n = std::tanh(wn * xs[t] + bin + r * (un * prev + bhn));
        prev = (1.0 - z) * n + z * prev;
        EXPECT_NEAR(h[t], prev, 1e-15) << "step " << t;
    }
}

TEST(Gru, StateResetsAtSequenceBoundary) {
    std::mt19937_64 rng(2);
    Tape tape;
    GruWeights w{tape.constant(random_tensor({2, 6}, rng)), tape.constant(random_tensor({2, 6}, rng)),
                 tape.constant(random_tensor({1, 6}, rng)), tape.constant(random_tensor({1, 6}, rng))};
    Tensor seq = random_tensor({4, 2}, rng);
    Tensor twice({8, 2});
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 2; ++j) twice(i, j) = seq(i % 4, j);
    Tensor h = gru_forward(w, tape.constant(twice), 2).value();
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(h(i, j), h(i + 4, j));
}

TEST(Gru, GradientCheck) {
    std::mt19937_64 rng(13);
    std::vector<Tensor> p{random_tensor({4, 2}, rng), random_tensor({2, 9}, rng), random_tensor({3, 9}, rng),
                          random_tensor({1, 9}, rng), random_tensor({1, 9}, rng)};
    LossBuilder build = [](Tape&, const std::vector<Var>& v) {
        return random_projection(gru_forward(GruWeights{v[1], v[2], v[3], v[4]}, v[0], 1));
    };
    EXPECT_LT(max_relative_error(build, p), 1e-5);
}

TEST(TemporalAttention, IdenticalStatesGiveUniformScores) {
    Tape tape;
    Tensor h({5, 3});
    for (std::size_t i = 0; i < 5; ++i) h(i, 0) = 0.2, h(i, 1) = -0.4, h(i, 2) = 0.9;
    auto out = temporal_attention(tape.constant(h), tape.constant(Tensor::row({1.5, -2.0, 0.3})), 1);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(out.scores.value()[i], 0.2, 1e-12);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.context.value()[j], h(0, j), 1e-12);
}

TEST(TemporalAttention, HandExample) {
    Tape tape;
    auto out = temporal_attention(tape.constant(Tensor({3, 1}, std::vector<double>{0, std::log(2.0), 0})),
                                  tape.constant(Tensor::row({1.0})), 1);
    EXPECT_NEAR(out.scores.value()[0], 0.25, 1e-15);
    EXPECT_NEAR(out.scores.value()[1], 0.5, 1e-15);
    EXPECT_NEAR(out.scores.value()[2], 0.25, 1e-15);
    EXPECT_NEAR(out.context.value().item(), 0.5 * std::log(2.0), 1e-15);
}

TEST(TemporalAttention, FixedModes) {
    std::mt19937_64 rng(3);
    Tensor h = random_tensor({8, 2}, rng);
    Tape tape;
    Var hv = tape.constant(h);
    Var wb = tape.constant(Tensor::row({4.0, -1.0}));
    auto uniform = temporal_attention(hv, wb, 2, TemporalScoreMode::constant);
    for (double s : uniform.scores.value().values()) EXPECT_EQ(s, 0.25);
    auto last = temporal_attention(hv, wb, 2, TemporalScoreMode::last_step);
    EXPECT_EQ(last.context.value(), last_hidden(hv, 2).value());
}

TEST(TemporalAttention, ContextIsConvexCombinationAndScoresSumToOne) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor h = random_tensor({3 * 6, 4}, rng, -3.0, 3.0);
        Tape tape;
        auto out = temporal_attention(tape.constant(h), tape.constant(random_tensor({1, 4}, rng, -3.0, 3.0)), 3);
        for (std::size_t s = 0; s < 3; ++s) {
            double total = 0;
            for (std::size_t t = 0; t < 6; ++t) total += out.scores.value()(s, t);
            EXPECT_NEAR(total, 1.0, 1e-9);
            for (std::size_t j = 0; j < 4; ++j) {
                double lo = INFINITY, hi = -INFINITY;
                for (std::size_t t = 0; t < 6; ++t) lo = std::min(lo, h(s * 6 + t, j)), hi = std::max(hi, h(s * 6 + t, j));
                EXPECT_GE(out.context.value()(s, j), lo - 1e-12);
                EXPECT_LE(out.context.value()(s, j), hi + 1e-12);
            }
        }
    }
}

TEST(TemporalAttention, GradientCheck) {
    std::mt19937_64 rng(5);
    std::vector<Tensor> p{random_tensor({2 * 6, 4}, rng), random_tensor({1, 4}, rng)};
    LossBuilder build = [](Tape&, const std::vector<Var>& v) {
        auto out = temporal_attention(v[0], v[1], 2);
        return add(random_projection(out.context), random_projection(out.scores));
    };
    EXPECT_LT(max_relative_error(build, p), 1e-6);
}

TEST(SelfAttention, EqualContextsGiveUniformScores) {
    std::mt19937_64 rng(6);
    Tensor x({4, 3});
    for (std::size_t i = 0; i < 4; ++i) x(i, 0) = 0.3, x(i, 1) = -1.1, x(i, 2) = 0.6;
    Tape tape;
    HeadWeights w{tape.constant(random_tensor({3, 2}, rng)), tape.constant(random_tensor({3, 2}, rng)),
                  tape.constant(random_tensor({3, 2}, rng))};
    auto out = self_attention(tape.constant(x), w);
    for (double s : out.scores.value().values()) EXPECT_NEAR(s, 0.25, 1e-12);
    Tensor v = matmul(tape.constant(x), w.value).value();
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(out.head.value()(i, j), v(0, j), 1e-12);
}

TEST(SelfAttention, HandExample) {
    Tape tape;
    Var one = tape.constant(Tensor::scalar(1.0));
    auto out = self_attention(tape.constant(Tensor({2, 1}, std::vector<double>{1, 0})), {one, one, one});
    const double e = std::exp(1.0);
    EXPECT_NEAR(out.scores.value()(0, 0), e / (e + 1), 1e-15);
    EXPECT_NEAR(out.scores.value()(0, 1), 1 / (e + 1), 1e-15);
    EXPECT_NEAR(out.scores.value()(1, 0), 0.5, 1e-15);
    EXPECT_NEAR(out.scores.value()(1, 1), 0.5, 1e-15);
    EXPECT_NEAR(out.head.value()[0], e / (e + 1), 1e-15);
    EXPECT_NEAR(out.head.value()[1], 0.5, 1e-15);
}

TEST(SelfAttention, PermutationEquivariance) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({6, 3}, rng, -2.0, 2.0);
        std::vector<std::size_t> perm{0, 1, 2, 3, 4, 5};
        std::shuffle(perm.begin(), perm.end(), rng);
        Tape tape;
        HeadWeights w{tape.constant(random_tensor({3, 2}, rng)), tape.constant(random_tensor({3, 2}, rng)),
                      tape.constant(random_tensor({3, 2}, rng))};
        auto a = self_attention(tape.constant(x), w);
        auto b = self_attention(tape.constant(permute_rows(x, perm)), w);
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(b.head.value()(i, j), a.head.value()(perm[i], j), 1e-12);
            for (std::size_t j = 0; j < 6; ++j)
                EXPECT_NEAR(b.scores.value()(i, j), a.scores.value()(perm[i], perm[j]), 1e-12);
        }
    }
}

TEST(MultiHead, SingleHeadIdentityOutputEqualsSelfAttention) {
    std::mt19937_64 rng(8);
    Tape tape;
    Var x = tape.constant(random_tensor({5, 3}, rng));
    HeadWeights w{tape.constant(random_tensor({3, 3}, rng)), tape.constant(random_tensor({3, 3}, rng)),
                  tape.constant(random_tensor({3, 3}, rng))};
    auto sa = self_attention(x, w);
    auto mha = multi_head_attention(x, {w}, tape.constant(Tensor::identity(3)));
    EXPECT_EQ(mha.output.value(), sa.head.value());
    EXPECT_EQ(mha.scores.at(0).value(), sa.scores.value());
}

TEST(MultiHead, ShapeLaw) {
    std::mt19937_64 rng(9);
    Tape tape;
    std::vector<HeadWeights> heads;
    for (int p = 0; p < 3; ++p)
        heads.push_back({tape.constant(random_tensor({4, 2}, rng)), tape.constant(random_tensor({4, 2}, rng)),
                         tape.constant(random_tensor({4, 2}, rng))});
    auto out = multi_head_attention(tape.constant(random_tensor({4, 4}, rng)), heads,
                                    tape.constant(random_tensor({2, 6}, rng)));
    EXPECT_EQ(out.output.shape(), (Shape{4, 2}));
    ASSERT_EQ(out.scores.size(), 3u);
    for (const Var& s : out.scores) EXPECT_EQ(s.shape(), (Shape{4, 4}));
    EXPECT_THROW(multi_head_attention(tape.constant(random_tensor({4, 4}, rng)), heads,
                                      tape.constant(random_tensor({2, 4}, rng))),
                 ContractError);
}

TEST(MultiHead, ZeroHeadContributesUniformMeanOfValues) {
    std::mt19937_64 rng(10);
    Tape tape;
    Tensor xt = random_tensor({4, 3}, rng);
    Var x = tape.constant(xt);
    HeadWeights h1{tape.constant(random_tensor({3, 2}, rng)), tape.constant(random_tensor({3, 2}, rng)),
                   tape.constant(random_tensor({3, 2}, rng))};
    Var zero = tape.constant(Tensor({3, 2}));
    Tensor wo = random_tensor({2, 4}, rng);
    auto out = multi_head_attention(x, {h1, {zero, zero, zero}}, tape.constant(wo));
    for (double s : out.scores[1].value().values()) EXPECT_NEAR(s, 0.25, 1e-15);

    // Hand assembly: [HE1 | mean of V2 rows (= 0)] · W^Oᵀ.
    Tensor he1 = self_attention(x, h1).head.value();
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t o = 0; o < 2; ++o) {
            double expect = 0;
            for (std::size_t j = 0; j < 2; ++j) expect += he1(i, j) * wo(o, j);
            EXPECT_NEAR(out.output.value()(i, o), expect, 1e-14);
        }
}

TEST(MultiHead, GradientCheck) {
    std::mt19937_64 rng(11);
    std::vector<Tensor> p{random_tensor({4, 3}, rng)};
    for (int i = 0; i < 6; ++i) p.push_back(random_tensor({3, 2}, rng));
    p.push_back(random_tensor({2, 4}, rng));
    LossBuilder build = [](Tape&, const std::vector<Var>& v) {
        auto out = multi_head_attention(v[0], {{v[1], v[2], v[3]}, {v[4], v[5], v[6]}}, v[7]);
        return add(random_projection(out.output), random_projection(out.scores[0]));
    };
    EXPECT_LT(max_relative_error(build, p), 1e-6);
}

TEST(CnnHead, ClosedFormForOnesWeights) {
    CnnConfig cfg{1, 3, 0, 1, 0};
    const double c = 0.1;
    Tape tape;
    CnnWeights w;
    w.kernels.push_back(tape.constant(Tensor({1, 2, 3}, 1.0)));
    w.biases.push_back(tape.constant(Tensor({1, 1})));
    w.dense_w = tape.constant(Tensor({4, 1}, 1.0));
    w.dense_b = tape.constant(Tensor({1, 1}));
    double y = cnn_head(tape.constant(Tensor({6, 2}, c)), w, cfg).value().item();
    EXPECT_NEAR(y, 4.0 * std::tanh(6.0 * c), 1e-15);
}

TEST(CnnHead, ScalarOutputForEveryTableConfigAtThirtyCycles) {
    std::mt19937_64 rng(12);
    for (std::size_t f : {3u, 5u, 7u, 8u})
        for (std::size_t k : {2u, 3u, 4u, 5u})
            for (std::size_t np : {1u, 2u})
                for (std::size_t nnp : {1u, 2u}) {
                    CnnConfig cfg{f, k, np, nnp, 0};
                    Tape tape;
                    CnnWeights w;
                    for (const auto& spec : cnn_layers(3, cfg)) {
                        w.kernels.push_back(tape.constant(random_tensor({spec.out_channels, spec.in_channels, k}, rng)));
                        w.biases.push_back(tape.constant(random_tensor({1, spec.out_channels}, rng)));
                    }
                    std::size_t width = cnn_output_length(30, cfg) * cnn_layers(3, cfg).back().out_channels;
                    w.dense_w = tape.constant(random_tensor({width, 1}, rng));
                    w.dense_b = tape.constant(random_tensor({1, 1}, rng));
                    EXPECT_EQ(cnn_head(tape.constant(random_tensor({30, 3}, rng)), w, cfg).shape(), (Shape{1, 1}));
                }
}

TEST(CnnHead, LengthUnderflowIsConfigurationError) {
    EXPECT_THROW(cnn_output_length(4, CnnConfig{3, 3, 2, 1, 0}), ConfigError);
    EXPECT_THROW(cnn_output_length(2, CnnConfig{3, 3, 0, 1, 0}), ConfigError);
    EXPECT_EQ(cnn_output_length(30, CnnConfig{3, 3, 1, 1, 0}), 13u);
}

TEST(CnnHead, GradientCheck) {
    std::mt19937_64 rng(14);
    CnnConfig cfg{3, 3, 1, 1, 4};
    std::vector<Tensor> p{random_tensor({10, 2}, rng), random_tensor({3, 2, 3}, rng), random_tensor({1, 3}, rng),
                          random_tensor({3, 3, 3}, rng), random_tensor({1, 3}, rng)};
    std::size_t width = cnn_output_length(10, cfg) * 3;
    p.push_back(random_tensor({width, 4}, rng));
    p.push_back(random_tensor({1, 4}, rng));
    p.push_back(random_tensor({4, 1}, rng));
    p.push_back(random_tensor({1, 1}, rng));
    LossBuilder build = [cfg](Tape&, const std::vector<Var>& v) {
        CnnWeights w{{v[1], v[3]}, {v[2], v[4]}, v[5], v[6], v[7], v[8]};
        return cnn_head(v[0], w, cfg);
    };
    EXPECT_LT(max_relative_error(build, p), 1e-4);
}
