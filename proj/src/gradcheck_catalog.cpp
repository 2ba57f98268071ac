#include "dfm/gradcheck_catalog.hpp"

#include "dfm/blocks.hpp"
#include "dfm/objective.hpp"

#include <random>

namespace dfm {

namespace {

using T64 = Tensor64;

T64 uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return T64::from(shape, std::move(v));
}

// Values in +-[0.1, 1] so kinks at zero stay out of the difference stencil.
T64 away_from_zero(const Shape& shape, Rng& rng) {
    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
    return T64::from(shape, std::move(v));
}

struct Cursor {
    const std::vector<T64>& in;
    std::size_t pos = 0;
    T64 next() { return in.at(pos++); }
};

Linear<double> bind(Cursor& c, const Linear<double>&) { return {c.next(), c.next()}; }
LayerNormParams<double> bind(Cursor& c, const LayerNormParams<double>&) { return {c.next(), c.next()}; }

AttentionParams<double> bind(Cursor& c, const AttentionParams<double>& proto) {
    AttentionParams<double> p = proto;
    p.query = bind(c, proto.query);
    p.key = bind(c, proto.key);
    p.value = bind(c, proto.value);
    p.output = bind(c, proto.output);
    return p;
}

EncoderBlockParams<double> bind(Cursor& c, const EncoderBlockParams<double>& proto) {
    EncoderBlockParams<double> p = proto;
    p.attention = bind(c, proto.attention);
    p.attention_norm = bind(c, proto.attention_norm);
    p.ffn_norm = bind(c, proto.ffn_norm);
    p.ffn_in = bind(c, proto.ffn_in);
    p.ffn_out = bind(c, proto.ffn_out);
    return p;
}

HeadParams<double> bind(Cursor& c, const HeadParams<double>& proto) {
    HeadParams<double> p;
    p.fc1 = bind(c, proto.fc1);
    p.fc2 = bind(c, proto.fc2);
    p.fc3 = bind(c, proto.fc3);
    return p;
}

BiLstmParams<double> bind(Cursor& c, const BiLstmParams<double>& proto) {
    BiLstmParams<double> p = proto;
    for (auto& layer : p.layers)
        for (auto& cell : layer) {
            cell.input_weight = c.next();
            cell.recurrent_weight = c.next();
            cell.bias = c.next();
        }
    return p;
}

// Parameter values as plain inputs, in append_params order.  Biases and
// LayerNorm parameters are randomised so their gradients are not trivial.
template <typename P>
std::vector<T64> flatten(const P& params, Rng& rng) {
    NamedParams<double> named;
    append_params("p", params, named);
    std::vector<T64> out;
    for (const auto& [name, t] : named) {
        const bool is_weight = name.ends_with(".weight") || name.ends_with(".w_ih") || name.ends_with(".w_hh");
        out.push_back(is_weight ? t.detach() : uniform(t.shape(), rng, -0.5, 0.5));
        if (name.ends_with(".gamma")) out.back() = uniform(t.shape(), rng, 0.5, 1.5);
    }
    return out;
}

SequenceMask ragged_mask(std::size_t batch, std::size_t length) {
    SequenceMask m = SequenceMask::all_valid(batch, length);
    // Last row keeps only its first half.
    for (std::size_t i = (length + 1) / 2; i < length; ++i) m.valid[(batch - 1) * length + i] = 0;
    return m;
}

std::vector<T64> join(std::vector<T64> head, const std::vector<T64>& tail) {
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
}

}  // namespace

std::vector<GradCheckCase> gradcheck_catalog(std::uint64_t seed, bool inject_fault) {
    Rng rng(seed);
    std::vector<GradCheckCase> cases;
    auto prim = [&](std::string name, TensorFn fn, std::vector<T64> inputs) {
        cases.push_back({std::move(name), "primitive", std::move(fn), std::move(inputs)});
    };
    auto comp = [&](std::string name, TensorFn fn, std::vector<T64> inputs) {
        cases.push_back({std::move(name), "composite", std::move(fn), std::move(inputs)});
    };
    using V = const std::vector<T64>&;

    // ---- primitives
    prim("matmul", [](V in) { return matmul(in[0], in[1]); }, {uniform({3, 4}, rng), uniform({4, 5}, rng)});
    prim("matmul_batched", [](V in) { return matmul(in[0], in[1]); },
         {uniform({2, 3, 4}, rng), uniform({2, 4, 2}, rng)});
    prim("add", [](V in) { return add(in[0], in[1]); }, {uniform({3, 4}, rng), uniform({3, 4}, rng)});
    prim("add_broadcast", [](V in) { return add(in[0], in[1]); }, {uniform({2, 3, 4}, rng), uniform({4}, rng)});
    prim("sub", [](V in) { return sub(in[0], in[1]); }, {uniform({3, 4}, rng), uniform({3, 4}, rng)});
    prim("sub_broadcast", [](V in) { return sub(in[0], in[1]); }, {uniform({2, 3, 4}, rng), uniform({3, 4}, rng)});
    prim("mul", [](V in) { return mul(in[0], in[1]); }, {uniform({3, 4}, rng), uniform({3, 4}, rng)});
    prim("mul_broadcast", [](V in) { return mul(in[0], in[1]); }, {uniform({2, 3, 4}, rng), uniform({4}, rng)});
    prim("scale", [](V in) { return scale(in[0], -1.7); }, {uniform({3, 4}, rng)});
    prim("add_scalar", [](V in) { return add_scalar(in[0], 0.3); }, {uniform({3, 4}, rng)});
    prim("relu", [](V in) { return relu(in[0]); }, {away_from_zero({3, 4}, rng)});
    prim("sigmoid", [](V in) { return sigmoid(in[0]); }, {uniform({3, 4}, rng, -3, 3)});
    prim("tanh", [](V in) { return tanh(in[0]); }, {uniform({3, 4}, rng, -3, 3)});
    prim("log", [](V in) { return log(in[0]); }, {uniform({3, 4}, rng, 0.5, 2.0)});
    prim("abs", [](V in) { return abs(in[0]); }, {away_from_zero({3, 4}, rng)});
    prim("clamp_min", [](V in) { return clamp_min(in[0], 0.0); }, {away_from_zero({3, 4}, rng)});
    prim("softmax_last", [](V in) { return softmax(in[0], 2); }, {uniform({2, 3, 4}, rng, -2, 2)});
    prim("softmax_middle", [](V in) { return softmax(in[0], 1); }, {uniform({2, 3, 4}, rng, -2, 2)});
    prim("sum", [](V in) { return sum(in[0]); }, {uniform({3, 4}, rng)});
    prim("sum_axis", [](V in) { return sum(in[0], 1); }, {uniform({2, 3, 4}, rng)});
    prim("mean_axis", [](V in) { return mean(in[0], 0); }, {uniform({2, 3, 4}, rng)});
    prim("concat", [](V in) { return concat<double>({in[0], in[1]}, 1); },
         {uniform({2, 3, 4}, rng), uniform({2, 2, 4}, rng)});
    prim("slice", [](V in) { return slice(in[0], 1, 1, 3); }, {uniform({2, 4, 3}, rng)});
    prim("reshape", [](V in) { return reshape(in[0], {4, 6}); }, {uniform({2, 3, 4}, rng)});
    prim("permute", [](V in) { return permute(in[0], {2, 0, 1}); }, {uniform({2, 3, 4}, rng)});
    prim("transpose", [](V in) { return transpose(in[0]); }, {uniform({2, 3, 4}, rng)});
    prim("layer_norm", [](V in) { return layer_norm(in[0], in[1], in[2]); },
         {uniform({3, 5}, rng), uniform({5}, rng, 0.5, 1.5), uniform({5}, rng)});
    prim("gather_rows",
         [](V in) {
             const std::size_t rows[] = {0, 2, 2, 4};
             return gather_rows(in[0], std::span<const std::size_t>(rows));
         },
         {uniform({5, 3}, rng)});
    prim("masked_fill",
         [](V in) {
             const std::uint8_t mask[] = {0, 1, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0};
             return masked_fill(in[0], std::span<const std::uint8_t>(mask), -5.0);
         },
         {uniform({3, 4}, rng)});

    // ---- composites
    {
        auto lin = make_linear<double>(5, 3, rng);
        comp("linear",
             [lin](V in) {
                 Cursor c{in, 1};
                 return linear(in[0], bind(c, lin));
             },
             join({uniform({2, 4, 5}, rng)}, flatten(lin, rng)));
    }
    comp("dropout",
         [](V in) {
             Rng local(99);
             return dropout(in[0], 0.3, &local);
         },
         {uniform({4, 5}, rng)});
    {
        auto att = make_attention<double>(8, 6, 2, rng);
        const auto mask = ragged_mask(2, 4);
        comp("attention",
             [att, mask](V in) {
                 Cursor c{in, 2};
                 return multi_head_attention(in[0], in[1], mask, bind(c, att));
             },
             join({uniform({2, 3, 8}, rng), uniform({2, 4, 6}, rng)}, flatten(att, rng)));
    }
    {
        auto block = make_encoder_block<double>(8, 8, 2, 16, 0.0, rng);
        const auto mask = ragged_mask(2, 4);
        comp("encoder_block_self",
             [block, mask](V in) {
                 Cursor c{in, 1};
                 return encoder_block<double>(in[0], nullptr, mask, bind(c, block), nullptr);
             },
             join({uniform({2, 4, 8}, rng)}, flatten(block, rng)));
    }
    {
        auto block = make_encoder_block<double>(8, 6, 2, 16, 0.0, rng);
        const auto mask = ragged_mask(2, 5);
        comp("encoder_block_cross",
             [block, mask](V in) {
                 Cursor c{in, 2};
                 return encoder_block(in[0], &in[1], mask, bind(c, block), nullptr);
             },
             join({uniform({2, 3, 8}, rng), uniform({2, 5, 6}, rng)}, flatten(block, rng)));
    }
    {
        auto head = make_head<double>(5, 6, kNumClasses, rng);
        comp("mlp_head_classify",
             [head](V in) {
                 Cursor c{in, 1};
                 return mlp_head(in[0], bind(c, head), HeadMode::Classify);
             },
             join({uniform({3, 5}, rng)}, flatten(head, rng)));
    }
    {
        auto head = make_head<double>(5, 6, 1, rng);
        comp("mlp_head_regress",
             [head](V in) {
                 Cursor c{in, 1};
                 return mlp_head(in[0], bind(c, head), HeadMode::Regress);
             },
             join({uniform({3, 5}, rng)}, flatten(head, rng)));
    }
    {
        auto lstm = make_bilstm<double>(4, 3, 2, rng);
        comp("bilstm",
             [lstm](V in) {
                 Cursor c{in, 1};
                 return bilstm_encode(in[0], bind(c, lstm));
             },
             join({uniform({3, 4}, rng)}, flatten(lstm, rng)));
    }
    comp("prepend_cls", [](V in) { return prepend_cls(in[0], in[1]); }, {uniform({2, 3, 4}, rng), uniform({4}, rng)});
    comp("add_positional", [](V in) { return add_positional(in[0], true); }, {uniform({2, 3, 4}, rng)});

    const std::vector<int> labels = {1, 4, 7, 3};
    const ClassWeights weights = {1.2, 0.8, 1.0, 1.5, 0.7, 1.1, 0.9};
    comp("oll_loss", [labels, weights](V in) { return oll_loss(softmax(in[0], 1), labels, weights); },
         {uniform({4, kNumClasses}, rng, -2, 2)});
    comp("ce_loss", [labels, weights](V in) { return weighted_ce_loss(softmax(in[0], 1), labels, weights); },
         {uniform({4, kNumClasses}, rng, -2, 2)});
    {
        const std::vector<double> ratings = {1.0, 2.5, 4.0, 2.0};
        // Predictions sit at least 0.1 away from their targets.
        auto preds = away_from_zero({4}, rng);
        std::vector<double> shifted(preds.data().begin(), preds.data().end());
        for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += ratings[i];
        comp("l1_loss", [ratings, weights](V in) { return l1_loss(in[0], ratings, weights); },
             {T64::from({4}, shifted)});
    }
    comp("multitask_total",
         [](V in) {
             std::map<Component, T64> losses = {{Component::Nature, sum(mul(in[0], in[0]))},
                                                {Component::Questioning, sum(in[1])},
                                                {Component::Explanations, sum(tanh(in[2]))}};
             return multitask_total(losses, TaskWeights{{Component::Nature, 0.5}, {Component::Questioning, 2.0}});
         },
         {uniform({3}, rng), uniform({3}, rng), uniform({3}, rng)});

    if (inject_fault) {
        // x^2 with a backward that is 10% too large.
        prim("injected_fault",
             [](V in) {
                 const auto& x = in[0];
                 std::vector<double> v(x.data().begin(), x.data().end());
                 for (auto& e : v) e *= e;
                 return make_op<double>("faulty_square", x.shape(), std::move(v), {x}, [](TensorNode<double>& self) {
                     auto& g = self.inputs[0]->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.2 * self.inputs[0]->value[i] * self.grad[i];
                 });
             },
             {uniform({3, 4}, rng)});
    }
    return cases;
}

std::vector<GradCheckRow> run_gradcheck(const std::vector<GradCheckCase>& cases, double tol) {
    std::vector<GradCheckRow> rows;
    for (const auto& c : cases) rows.push_back({c.name, c.kind, grad_check(c.fn, c.inputs, tol)});
    return rows;
}

}  // namespace dfm
