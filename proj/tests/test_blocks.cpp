#include "dfm/blocks.hpp"
#include "dfm/grad_check.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace dfm;

namespace {

using T64 = Tensor64;

T64 randn(const Shape& shape, Rng& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = n(rng);
    return T64::from(shape, v);
}

void zero_out(T64& t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); }

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Attention, SingleContextRowIsLinearInItsValue) {
    Rng rng(1);
    auto params = make_attention<double>(8, 6, 2, rng);
    auto q = randn({1, 3, 8}, rng);
    auto kv = randn({1, 1, 6}, rng);
    AttentionTrace<double> trace;
    auto out = multi_head_attention(q, kv, SequenceMask::all_valid(1, 1), params, &trace);
    for (double w : trace.weights.data()) EXPECT_DOUBLE_EQ(w, 1.0);
    auto expected = linear(linear(kv, params.value), params.output);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at({0, i, c}), expected.at({0, 0, c}), 1e-12);
}

TEST(Attention, IdenticalRowsGiveUniformWeights) {
    Rng rng(2);
    auto params = make_attention<double>(8, 8, 2, rng);
    auto q = randn({1, 2, 8}, rng);
    auto row = randn({1, 1, 8}, rng);
    auto kv = concat<double>({row, row, row, row}, 1);
    SequenceMask mask{1, 4, {1, 1, 0, 1}};
    AttentionTrace<double> trace;
    multi_head_attention(q, kv, mask, params, &trace);
    const auto& w = trace.weights;  // [heads, Lq, Lk]
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(w.at({h, i, j}), j == 2 ? 0.0 : 1.0 / 3.0, 1e-12);
}

TEST(Attention, FullWidthWeightsSumToOne) {
    Rng rng(3);
    auto params = make_attention<float>(768, 1024, 12, rng);
    std::normal_distribution<float> n;
    std::vector<float> qv(3 * 768), kv(5 * 1024);
    for (auto& v : qv) v = n(rng);
    for (auto& v : kv) v = n(rng);
    AttentionTrace<float> trace;
    auto out = multi_head_attention(Tensor::from({1, 3, 768}, qv), Tensor::from({1, 5, 1024}, kv),
                                    SequenceMask::all_valid(1, 5), params, &trace);
    EXPECT_EQ(out.shape(), (Shape{1, 3, 768}));
    for (std::size_t r = 0; r < 12 * 3; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < 5; ++j) total += trace.weights.data()[r * 5 + j];
        EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(Attention, MaskedPositionsGetExactlyZeroWeight) {
    Rng rng(4);
    auto params = make_attention<double>(8, 6, 2, rng);
    auto q = randn({2, 3, 8}, rng);
    auto kv = randn({2, 5, 6}, rng, 50.0);
    SequenceMask mask{2, 5, {1, 0, 1, 0, 0, 0, 0, 0, 1, 1}};
    AttentionTrace<double> trace;
    auto out = multi_head_attention(q, kv, mask, params, &trace);
    for (std::size_t bh = 0; bh < 4; ++bh) {
        const std::size_t b = bh / 2;
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 5; ++j)
                if (!mask.is_valid(b, j)) EXPECT_EQ(trace.weights.at({bh, i, j}), 0.0);
    }
    // Changing masked rows leaves the output untouched.
    std::vector<double> altered(kv.data().begin(), kv.data().end());
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t j = 0; j < 5; ++j)
            if (!mask.is_valid(b, j))
                for (std::size_t c = 0; c < 6; ++c) altered[(b * 5 + j) * 6 + c] = 1e3;
    auto out2 = multi_head_attention(q, T64::from({2, 5, 6}, altered), mask, params);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.data()[i], out2.data()[i]);
}

TEST(Attention, AllMaskedContextIsRejected) {
    Rng rng(5);
    auto params = make_attention<double>(4, 4, 2, rng);
    SequenceMask mask{1, 2, {0, 0}};
    EXPECT_THROW(multi_head_attention(randn({1, 1, 4}, rng), randn({1, 2, 4}, rng), mask, params), UsageError);
}

TEST(Attention, HeadsMustDivideWidth) {
    Rng rng(6);
    EXPECT_THROW(make_attention<float>(1024, 1024, 12, rng), UsageError);
    EXPECT_NO_THROW(make_attention<float>(768, 1024, 12, rng));
}

TEST(Attention, GradientsPassFiniteDifferences) {
    Rng rng(7);
    auto proto = make_attention<double>(6, 4, 2, rng);
    auto q = randn({1, 3, 6}, rng);
    auto kv = randn({1, 5, 4}, rng);
    SequenceMask mask{1, 5, {1, 1, 0, 1, 1}};
    auto fn = [&](const std::vector<T64>& in) {
        auto p = proto;
        p.query = {in[2], in[3]};
        p.key = {in[4], in[5]};
        p.value = {in[6], in[7]};
        p.output = {in[8], in[9]};
        return multi_head_attention(in[0], in[1], mask, p);
    };
    std::vector<T64> inputs = {q, kv};
    for (const auto* l : {&proto.query, &proto.key, &proto.value, &proto.output}) {
        inputs.push_back(l->weight);
        inputs.push_back(randn(l->bias.shape(), rng, 0.1));
    }
    auto rep = grad_check(fn, inputs, 1e-5);
    EXPECT_TRUE(rep.passed) << rep.max_rel_err;
}

TEST(EncoderBlock, ZeroOutputProjectionsGiveIdentity) {
    Rng rng(8);
    auto p = make_encoder_block<double>(8, 8, 2, 16, 0.1, rng);
    zero_out(p.attention.output.weight);
    zero_out(p.ffn_out.weight);
    auto x = randn({1, 4, 8}, rng);
    Rng drop(1);
    auto y = encoder_block<double>(x, nullptr, SequenceMask::all_valid(1, 4), p, &drop);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(EncoderBlock, ShapePreservedForVariousLengths) {
    Rng rng(9);
    auto self = make_encoder_block<float>(768, 768, 12, 1536, 0.1, rng);
    auto cross = make_encoder_block<float>(768, 1024, 12, 1536, 0.1, rng);
    std::normal_distribution<float> n;
    for (std::size_t len : {1u, 7u, 96u}) {
        std::vector<float> xv(len * 768), cv(3 * 1024);
        for (auto& v : xv) v = n(rng);
        for (auto& v : cv) v = n(rng);
        auto x = Tensor::from({1, len, 768}, xv);
        auto c = Tensor::from({1, 3, 1024}, cv);
        EXPECT_EQ(encoder_block<float>(x, nullptr, SequenceMask::all_valid(1, len), self, nullptr).shape(), x.shape());
        EXPECT_EQ(encoder_block(x, &c, SequenceMask::all_valid(1, 3), cross, nullptr).shape(), x.shape());
    }
}

TEST(EncoderBlock, DropoutOnlyWhenTraining) {
    Rng rng(10);
    auto p = make_encoder_block<double>(8, 8, 2, 16, 0.5, rng);
    auto x = randn({1, 5, 8}, rng);
    auto mask = SequenceMask::all_valid(1, 5);
    auto a = encoder_block<double>(x, nullptr, mask, p, nullptr);
    auto b = encoder_block<double>(x, nullptr, mask, p, nullptr);
    Rng drop(3);
    auto c = encoder_block<double>(x, nullptr, mask, p, &drop);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST(EncoderBlock, FullBlockGradientsPass) {
    Rng rng(11);
    auto proto = make_encoder_block<double>(6, 4, 2, 12, 0.0, rng);
    NamedParams<double> named;
    append_params("b", proto, named);
    auto x = randn({1, 3, 6}, rng);
    auto ctx = randn({1, 4, 4}, rng);
    auto mask = SequenceMask::all_valid(1, 4);
    auto fn = [&](const std::vector<T64>& in) {
        auto p = proto;
        std::size_t k = 2;
        for (auto* l : {&p.attention.query, &p.attention.key, &p.attention.value, &p.attention.output}) {
            l->weight = in[k++];
            l->bias = in[k++];
        }
        p.attention_norm = {in[k], in[k + 1]};
        p.ffn_norm = {in[k + 2], in[k + 3]};
        k += 4;
        p.ffn_in = {in[k], in[k + 1]};
        p.ffn_out = {in[k + 2], in[k + 3]};
        return encoder_block(in[0], &in[1], mask, p, nullptr);
    };
    std::vector<T64> inputs = {x, ctx};
    for (auto* l : {&proto.attention.query, &proto.attention.key, &proto.attention.value, &proto.attention.output}) {
        inputs.push_back(l->weight);
        inputs.push_back(randn(l->bias.shape(), rng, 0.1));
    }
    inputs.push_back(randn({6}, rng, 0.1));
    inputs.push_back(randn({6}, rng, 0.1));
    inputs.push_back(randn({6}, rng, 0.1));
    inputs.push_back(randn({6}, rng, 0.1));
    inputs.push_back(proto.ffn_in.weight);
    inputs.push_back(randn({12}, rng, 0.1));
    inputs.push_back(proto.ffn_out.weight);
    inputs.push_back(randn({6}, rng, 0.1));
    for (auto& t : inputs) t = T64::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
    // layer-norm gammas near 1
    for (std::size_t idx : {10u, 12u}) {
        for (auto& v : inputs[idx].mutable_data()) v += 1.0;
    }
    auto rep = grad_check(fn, inputs, 1e-5);
    EXPECT_TRUE(rep.passed) << rep.max_rel_err;
}

TEST(EncoderBlock, EveryParameterReceivesGradient) {
    Rng rng(12);
    auto p = make_encoder_block<double>(8, 6, 2, 16, 0.0, rng);
    NamedParams<double> named;
    append_params("b", p, named);
    for (auto& [name, t] : named) {
        if (name.find("bias") != std::string::npos || name.find("beta") != std::string::npos)
            for (auto& v : t.mutable_data()) v = 0.01;
        t.set_requires_grad(true);
    }
    auto x = randn({2, 4, 8}, rng);
    auto ctx = randn({2, 3, 6}, rng);
    auto y = encoder_block(x, &ctx, SequenceMask::all_valid(2, 3), p, nullptr);
    backward(sum(mul(y, randn(y.shape(), rng))));
    for (auto& [name, t] : named) {
        double mag = 0.0;
        for (double g : t.grad()) mag += std::abs(g);
        EXPECT_GT(mag, 0.0) << name;
    }
}

TEST(ClsPooling, PermutationInvariantWithoutPositions) {
    Rng rng(13);
    const std::size_t d = 16, len = 6;
    std::vector<EncoderBlockParams<double>> stack;
    for (int i = 0; i < 3; ++i) stack.push_back(make_encoder_block<double>(d, d, 4, 2 * d, 0.1, rng));
    auto cls = make_cls<double>(d, rng);
    auto seq = randn({len, d}, rng);
    auto run = [&](const T64& s, bool positional) {
        auto x = reshape(prepend_cls(add_positional(s, positional), cls), {1, len + 1, d});
        for (const auto& b : stack) x = encoder_block<double>(x, nullptr, SequenceMask::all_valid(1, len + 1), b, nullptr);
        return slice(x, 1, 0, 1);
    };
    std::vector<std::size_t> order(len);
    std::iota(order.begin(), order.end(), 0);
    auto base = run(seq, false);
    auto base_pos = run(seq, true);
    double pos_diff = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        std::shuffle(order.begin(), order.end(), rng);
        auto permuted = gather_rows(seq, std::span<const std::size_t>(order));
        auto out = run(permuted, false);
        for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.data()[c], base.data()[c], 1e-5);
        auto out_pos = run(permuted, true);
        for (std::size_t c = 0; c < d; ++c) pos_diff = std::max(pos_diff, std::abs(out_pos.data()[c] - base_pos.data()[c]));
    }
    EXPECT_GT(pos_diff, 1e-5);
}

TEST(MlpHead, ClassifySumsToOneAndRegressIsScalar) {
    Rng rng(14);
    auto head = make_head<float>(768, 512, 7, rng);
    EXPECT_EQ(head.fc1.out_dim(), 512u);
    EXPECT_EQ(head.fc2.out_dim(), 512u);
    std::normal_distribution<float> n;
    std::vector<float> xv(4 * 768);
    for (auto& v : xv) v = n(rng);
    auto probs = mlp_head(Tensor::from({4, 768}, xv), head, HeadMode::Classify);
    ASSERT_EQ(probs.shape(), (Shape{4, 7}));
    for (std::size_t r = 0; r < 4; ++r) {
        double total = 0.0;
        for (std::size_t j = 0; j < 7; ++j) total += probs.at({r, j});
        EXPECT_NEAR(total, 1.0, 1e-6);
    }
    auto reg = make_head<float>(768, 512, 1, rng);
    EXPECT_EQ(mlp_head(Tensor::from({4, 768}, xv), reg, HeadMode::Regress).shape(), (Shape{4, 1}));
}

TEST(MlpHead, ZeroParametersGiveUniform) {
    Rng rng(15);
    auto head = make_head<double>(5, 512, 7, rng);
    NamedParams<double> named;
    append_params("h", head, named);
    for (auto& [name, t] : named) zero_out(t);
    auto p = mlp_head(randn({1, 5}, rng), head, HeadMode::Classify);
    for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 7.0);
}

TEST(MlpHead, GradientsPass) {
    Rng rng(16);
    auto proto = make_head<double>(5, 6, 7, rng);
    auto fn = [&](const std::vector<T64>& in) {
        HeadParams<double> p{{in[1], in[2]}, {in[3], in[4]}, {in[5], in[6]}};
        return mlp_head(in[0], p, HeadMode::Classify);
    };
    auto rep = grad_check(fn,
                          {randn({3, 5}, rng), proto.fc1.weight, randn({6}, rng, 0.1), proto.fc2.weight,
                           randn({6}, rng, 0.1), proto.fc3.weight, randn({7}, rng, 0.1)},
                          1e-5);
    EXPECT_TRUE(rep.passed) << rep.max_rel_err;
}

// Step-by-step recurrence with scalar arithmetic, gate order i, f, g, o.
TEST(BiLstm, MatchesScalarRecurrence) {
    Rng rng(17);
    auto params = make_bilstm<double>(2, 1, 1, rng);
    const double wx[2][2][4] = {{{0.5, -0.3, 0.8, 0.1}, {0.2, 0.4, -0.6, 0.7}},
                                {{-0.2, 0.6, 0.3, -0.5}, {0.9, -0.1, 0.2, 0.4}}};
    const double wh[2][4] = {{0.3, -0.2, 0.5, 0.6}, {-0.4, 0.1, 0.7, -0.3}};
    const double bias[2][4] = {{0.1, 0.2, -0.1, 0.05}, {-0.05, 0.3, 0.0, 0.1}};
    for (int dir = 0; dir < 2; ++dir) {
        auto& cell = params.layers[0][dir];
        auto iw = cell.input_weight.mutable_data();
        for (int r = 0; r < 2; ++r)
            for (int g = 0; g < 4; ++g) iw[r * 4 + g] = wx[dir][r][g];
        auto rw = cell.recurrent_weight.mutable_data();
        auto bb = cell.bias.mutable_data();
        for (int g = 0; g < 4; ++g) {
            rw[g] = wh[dir][g];
            bb[g] = bias[dir][g];
        }
    }
    const double xs[2][2] = {{1.0, -0.5}, {0.3, 2.0}};

    auto run = [&](int dir, std::vector<int> steps) {
        double h = 0.0, c = 0.0;
        for (int t : steps) {
            double z[4];
            for (int g = 0; g < 4; ++g) z[g] = xs[t][0] * wx[dir][0][g] + xs[t][1] * wx[dir][1][g] + h * wh[dir][g] + bias[dir][g];
            double i = sigmoid_ref(z[0]), f = sigmoid_ref(z[1]), g = std::tanh(z[2]), o = sigmoid_ref(z[3]);
            c = f * c + i * g;
            h = o * std::tanh(c);
        }
        return h;
    };
    auto out = bilstm_encode(T64::from({2, 2}, {xs[0][0], xs[0][1], xs[1][0], xs[1][1]}), params);
    ASSERT_EQ(out.shape(), (Shape{2}));
    EXPECT_NEAR(out.data()[0], run(0, {0, 1}), 1e-12);
    EXPECT_NEAR(out.data()[1], run(1, {1, 0}), 1e-12);

    // A single step is seen identically by both directions.
    auto one = bilstm_encode(T64::from({1, 2}, {xs[0][0], xs[0][1]}), params);
    EXPECT_NEAR(one.data()[0], run(0, {0}), 1e-12);
    EXPECT_NEAR(one.data()[1], run(1, {0}), 1e-12);
}

TEST(BiLstm, OutputWidthAndEmptyInput) {
    Rng rng(18);
    auto params = make_bilstm<double>(6, 6, 2, rng);
    EXPECT_EQ(bilstm_encode(randn({4, 6}, rng), params).numel(), 12u);
    EXPECT_THROW(bilstm_encode(T64::zeros({0, 6}), params), UsageError);
}

TEST(PrependCls, RowsAreExact) {
    Rng rng(19);
    auto seq = randn({3, 4}, rng);
    auto cls = randn({4}, rng);
    auto out = prepend_cls(seq, cls);
    ASSERT_EQ(out.shape(), (Shape{4, 4}));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.at({0, c}), cls.data()[c]);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(out.data()[4 + i], seq.data()[i]);
    EXPECT_EQ(prepend_cls(randn({1, 4}, rng), cls).shape(), (Shape{2, 4}));
    EXPECT_THROW(prepend_cls(randn({3, 5}, rng), cls), ShapeError);
    EXPECT_THROW(prepend_cls(T64::zeros({0, 4}), cls), ShapeError);
    auto batched = prepend_cls(randn({2, 3, 4}, rng), cls);
    EXPECT_EQ(batched.shape(), (Shape{2, 4, 4}));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(batched.at({1, 0, c}), cls.data()[c]);
}

TEST(Positional, SinusoidValues) {
    auto zeros = T64::zeros({3, 8});
    auto pe = add_positional(zeros, true);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(pe.at({0, c}), c % 2 == 0 ? 0.0 : 1.0);
    // direct formula
    for (std::size_t pos = 0; pos < 3; ++pos)
        for (std::size_t i = 0; i < 4; ++i) {
            double angle = double(pos) / std::pow(10000.0, 2.0 * i / 8.0);
            EXPECT_NEAR(pe.at({pos, 2 * i}), std::sin(angle), 1e-15);
            EXPECT_NEAR(pe.at({pos, 2 * i + 1}), std::cos(angle), 1e-15);
        }
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NE(pe.at({0, 2 * i}), pe.at({1, 2 * i}));
        EXPECT_NE(pe.at({0, 2 * i + 1}), pe.at({1, 2 * i + 1}));
    }
    Rng rng(20);
    auto x = randn({3, 8}, rng);
    auto same = add_positional(x, false);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same.data()[i], x.data()[i]);
}

TEST(Dropout, InferenceIdentityAndInvertedScaling) {
    Rng rng(21);
    auto x = T64::full({1000}, 1.0);
    auto same = dropout(x, 0.3, nullptr);
    for (double v : same.data()) EXPECT_EQ(v, 1.0);
    auto d = dropout(x, 0.5, &rng);
    std::size_t kept = 0;
    for (double v : d.data()) {
        EXPECT_TRUE(v == 0.0 || v == 2.0);
        kept += v != 0.0;
    }
    EXPECT_GT(kept, 400u);
    EXPECT_LT(kept, 600u);
}

TEST(Init, XavierBoundsAndClsScale) {
    Rng rng(22);
    auto l = make_linear<double>(100, 50, rng);
    const double bound = std::sqrt(6.0 / 150.0);
    for (double w : l.weight.data()) EXPECT_LE(std::abs(w), bound);
    for (double b : l.bias.data()) EXPECT_EQ(b, 0.0);
    auto cls = make_cls<double>(4000, rng);
    double ss = 0.0;
    for (double v : cls.data()) ss += v * v;
    EXPECT_NEAR(std::sqrt(ss / 4000), 0.02, 0.002);
}
