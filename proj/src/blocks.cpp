#include "dfm/blocks.hpp"

#include <cmath>

namespace dfm {

namespace {

// Large enough that exp() underflows to exactly zero after max-subtraction,
// small enough to stay finite in float.
constexpr double kMaskedScore = -1e30;

template <typename T>
BasicTensor<T> xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<T> w(fan_in * fan_out);
    for (auto& v : w) v = static_cast<T>(u(rng));
    return BasicTensor<T>::from({fan_in, fan_out}, std::move(w), true);
}

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t heads) {
    const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
    auto t = permute(reshape(x, {b, l, heads, d / heads}), {0, 2, 1, 3});
    return reshape(t, {b * heads, l, d / heads});
}

template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t heads) {
    const std::size_t l = x.dim(1), dh = x.dim(2);
    auto t = permute(reshape(x, {batch, heads, l, dh}), {0, 2, 1, 3});
    return reshape(t, {batch, l, heads * dh});
}

}  // namespace

SequenceMask SequenceMask::all_valid(std::size_t batch, std::size_t length) {
    return SequenceMask{batch, length, std::vector<std::uint8_t>(batch * length, 1)};
}

std::size_t SequenceMask::valid_count(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < length; ++i) n += is_valid(b, i) ? 1 : 0;
    return n;
}

SequenceMask SequenceMask::with_leading() const {
    SequenceMask m{batch, length + 1, {}};
    m.valid.reserve(batch * (length + 1));
    for (std::size_t b = 0; b < batch; ++b) {
        m.valid.push_back(1);
        for (std::size_t i = 0; i < length; ++i) m.valid.push_back(valid[b * length + i]);
    }
    return m;
}

// ---- construction ------------------------------------------------------------

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, Rng& rng) {
    return Linear<T>{xavier<T>(in, out, rng), BasicTensor<T>::zeros({out}, true)};
}

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t dim) {
    return {BasicTensor<T>::full({dim}, T(1), true), BasicTensor<T>::zeros({dim}, true)};
}

template <typename T>
AttentionParams<T> make_attention(std::size_t model_dim, std::size_t context_dim, std::size_t num_heads, Rng& rng) {
    if (num_heads == 0 || model_dim % num_heads != 0) {
        throw UsageError("model width " + std::to_string(model_dim) + " is not divisible by " +
                         std::to_string(num_heads) + " heads");
    }
    AttentionParams<T> p;
    p.num_heads = num_heads;
    p.model_dim = model_dim;
    p.context_dim = context_dim;
    p.query = make_linear<T>(model_dim, model_dim, rng);
    p.key = make_linear<T>(context_dim, model_dim, rng);
    p.value = make_linear<T>(context_dim, model_dim, rng);
    p.output = make_linear<T>(model_dim, model_dim, rng);
    return p;
}

template <typename T>
EncoderBlockParams<T> make_encoder_block(std::size_t model_dim, std::size_t context_dim, std::size_t num_heads,
                                         std::size_t ffn_dim, double dropout_rate, Rng& rng) {
    EncoderBlockParams<T> p;
    p.attention = make_attention<T>(model_dim, context_dim, num_heads, rng);
    p.attention_norm = make_layer_norm<T>(model_dim);
    p.ffn_norm = make_layer_norm<T>(model_dim);
    p.ffn_in = make_linear<T>(model_dim, ffn_dim, rng);
    p.ffn_out = make_linear<T>(ffn_dim, model_dim, rng);
    p.dropout_rate = dropout_rate;
    return p;
}

template <typename T>
HeadParams<T> make_head(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    return HeadParams<T>{make_linear<T>(in, hidden, rng), make_linear<T>(hidden, hidden, rng),
                         make_linear<T>(hidden, out, rng)};
}

template <typename T>
BiLstmParams<T> make_bilstm(std::size_t input_size, std::size_t hidden_size, std::size_t num_layers, Rng& rng) {
    BiLstmParams<T> p;
    p.input_size = input_size;
    p.hidden_size = hidden_size;
    for (std::size_t layer = 0; layer < num_layers; ++layer) {
        const std::size_t in = layer == 0 ? input_size : 2 * hidden_size;
        std::array<LstmCell<T>, 2> cells;
        for (auto& cell : cells) {
            cell.input_weight = xavier<T>(in, 4 * hidden_size, rng);
            cell.recurrent_weight = xavier<T>(hidden_size, 4 * hidden_size, rng);
            cell.bias = BasicTensor<T>::zeros({4 * hidden_size}, true);
        }
        p.layers.push_back(std::move(cells));
    }
    return p;
}

template <typename T>
BasicTensor<T> make_cls(std::size_t dim, Rng& rng) {
    std::normal_distribution<double> n(0.0, 0.02);
    std::vector<T> v(dim);
    for (auto& x : v) x = static_cast<T>(n(rng));
    return BasicTensor<T>::from({dim}, std::move(v), true);
}

template <typename T>
void append_params(const std::string& prefix, const Linear<T>& p, NamedParams<T>& out) {
    out.emplace_back(prefix + ".weight", p.weight);
    out.emplace_back(prefix + ".bias", p.bias);
}

template <typename T>
void append_params(const std::string& prefix, const LayerNormParams<T>& p, NamedParams<T>& out) {
    out.emplace_back(prefix + ".gamma", p.gamma);
    out.emplace_back(prefix + ".beta", p.beta);
}

template <typename T>
void append_params(const std::string& prefix, const AttentionParams<T>& p, NamedParams<T>& out) {
    append_params(prefix + ".query", p.query, out);
    append_params(prefix + ".key", p.key, out);
    append_params(prefix + ".value", p.value, out);
    append_params(prefix + ".output", p.output, out);
}

template <typename T>
void append_params(const std::string& prefix, const EncoderBlockParams<T>& p, NamedParams<T>& out) {
    append_params(prefix + ".attn", p.attention, out);
    append_params(prefix + ".attn_norm", p.attention_norm, out);
    append_params(prefix + ".ffn_norm", p.ffn_norm, out);
    append_params(prefix + ".ffn_in", p.ffn_in, out);
    append_params(prefix + ".ffn_out", p.ffn_out, out);
}

template <typename T>
void append_params(const std::string& prefix, const HeadParams<T>& p, NamedParams<T>& out) {
    append_params(prefix + ".fc1", p.fc1, out);
    append_params(prefix + ".fc2", p.fc2, out);
    append_params(prefix + ".fc3", p.fc3, out);
}

template <typename T>
void append_params(const std::string& prefix, const BiLstmParams<T>& p, NamedParams<T>& out) {
    static constexpr const char* kDir[2] = {"fwd", "rev"};
    for (std::size_t layer = 0; layer < p.layers.size(); ++layer) {
        for (int d = 0; d < 2; ++d) {
            const auto& cell = p.layers[layer][d];
            const std::string base = prefix + ".l" + std::to_string(layer) + "." + kDir[d];
            out.emplace_back(base + ".w_ih", cell.input_weight);
            out.emplace_back(base + ".w_hh", cell.recurrent_weight);
            out.emplace_back(base + ".bias", cell.bias);
        }
    }
}

// ---- forward -------------------------------------------------------------------

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const Linear<T>& layer) {
    if (x.rank() == 0 || x.shape().back() != layer.in_dim()) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(layer.weight.shape()));
    }
    if (x.rank() == 2) return add(matmul(x, layer.weight), layer.bias);
    const std::size_t rows = x.numel() / layer.in_dim();
    auto y = add(matmul(reshape(x, {rows, layer.in_dim()}), layer.weight), layer.bias);
    Shape out = x.shape();
    out.back() = layer.out_dim();
    return reshape(y, std::move(out));
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Rng* rng) {
    if (rng == nullptr || rate <= 0.0) return x;
    std::bernoulli_distribution keep(1.0 - rate);
    const T factor = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = keep(*rng) ? factor : T(0);
    return mul(x, BasicTensor<T>::from(x.shape(), std::move(mask)));
}

template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& queries, const BasicTensor<T>& context,
                                    const SequenceMask& context_mask, const AttentionParams<T>& params,
                                    AttentionTrace<T>* trace) {
    if (queries.rank() != 3 || context.rank() != 3 || queries.dim(0) != context.dim(0)) {
        throw ShapeError("attention: expected [B,Lq,D] queries and [B,Lk,C] context, got " +
                         shape_str(queries.shape()) + " and " + shape_str(context.shape()));
    }
    if (queries.dim(2) != params.model_dim || context.dim(2) != params.context_dim) {
        throw ShapeError("attention: widths " + shape_str(queries.shape()) + " / " + shape_str(context.shape()) +
                         " do not match parameters (model " + std::to_string(params.model_dim) + ", context " +
                         std::to_string(params.context_dim) + ")");
    }
    const std::size_t batch = queries.dim(0);
    const std::size_t lq = queries.dim(1);
    const std::size_t lk = context.dim(1);
    if (context_mask.batch != batch || context_mask.length != lk) {
        throw ShapeError("attention: context mask does not match context shape " + shape_str(context.shape()));
    }
    for (std::size_t b = 0; b < batch; ++b) {
        if (context_mask.valid_count(b) == 0) {
            throw UsageError("attention: batch row " + std::to_string(b) + " has no valid context position");
        }
    }
    const std::size_t heads = params.num_heads;
    const std::size_t head_dim = params.model_dim / heads;

    auto q = split_heads(linear(queries, params.query), heads);
    auto k = split_heads(linear(context, params.key), heads);
    auto v = split_heads(linear(context, params.value), heads);

    auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim))));
    std::vector<std::uint8_t> fill(batch * heads * lq * lk, 0);
    bool any_masked = false;
    for (std::size_t bh = 0; bh < batch * heads; ++bh) {
        const std::size_t b = bh / heads;
        for (std::size_t j = 0; j < lk; ++j) {
            if (context_mask.is_valid(b, j)) continue;
            any_masked = true;
            for (std::size_t i = 0; i < lq; ++i) fill[(bh * lq + i) * lk + j] = 1;
        }
    }
    if (any_masked) scores = masked_fill(scores, std::span<const std::uint8_t>(fill), static_cast<T>(kMaskedScore));
    auto weights = softmax(scores, 2);
    if (trace) trace->weights = weights;
    auto mixed = merge_heads(matmul(weights, v), batch, heads);
    return linear(mixed, params.output);
}

template <typename T>
BasicTensor<T> encoder_block(const BasicTensor<T>& x, const BasicTensor<T>* context, const SequenceMask& key_mask,
                             const EncoderBlockParams<T>& params, Rng* dropout_rng) {
    auto normed = layer_norm(x, params.attention_norm.gamma, params.attention_norm.beta);
    auto attended = multi_head_attention(normed, context ? *context : normed, key_mask, params.attention);
    auto y = add(x, dropout(attended, params.dropout_rate, dropout_rng));
    auto h = layer_norm(y, params.ffn_norm.gamma, params.ffn_norm.beta);
    auto f = linear(relu(linear(h, params.ffn_in)), params.ffn_out);
    return add(y, dropout(f, params.dropout_rate, dropout_rng));
}

template <typename T>
BasicTensor<T> mlp_head(const BasicTensor<T>& x, const HeadParams<T>& params, HeadMode mode) {
    auto h = relu(linear(x, params.fc1));
    h = relu(linear(h, params.fc2));
    auto out = linear(h, params.fc3);
    return mode == HeadMode::Classify ? softmax(out, out.rank() - 1) : out;
}

template <typename T>
BasicTensor<T> bilstm_encode(const BasicTensor<T>& seq, const BiLstmParams<T>& params) {
    if (seq.rank() != 2 || seq.dim(1) != params.input_size) {
        throw ShapeError("bilstm: expected [L," + std::to_string(params.input_size) + "] input, got " +
                         shape_str(seq.shape()));
    }
    const std::size_t steps = seq.dim(0);
    if (steps == 0) throw UsageError("bilstm: empty sequence");
    const std::size_t h = params.hidden_size;

    BasicTensor<T> input = seq;
    BasicTensor<T> last_forward;
    BasicTensor<T> first_reverse;
    for (const auto& layer : params.layers) {
        std::array<std::vector<BasicTensor<T>>, 2> states;
        for (int dir = 0; dir < 2; ++dir) {
            const auto& cell = layer[dir];
            auto pre = add(matmul(input, cell.input_weight), cell.bias);
            auto hidden = BasicTensor<T>::zeros({1, h});
            auto memory = BasicTensor<T>::zeros({1, h});
            states[dir].resize(steps);
            for (std::size_t s = 0; s < steps; ++s) {
                const std::size_t t = dir == 0 ? s : steps - 1 - s;
                auto gates = add(slice(pre, 0, t, t + 1), matmul(hidden, cell.recurrent_weight));
                auto in_gate = sigmoid(slice(gates, 1, 0, h));
                auto forget_gate = sigmoid(slice(gates, 1, h, 2 * h));
                auto candidate = tanh(slice(gates, 1, 2 * h, 3 * h));
                auto out_gate = sigmoid(slice(gates, 1, 3 * h, 4 * h));
                memory = add(mul(forget_gate, memory), mul(in_gate, candidate));
                hidden = mul(out_gate, tanh(memory));
                states[dir][t] = hidden;
            }
        }
        last_forward = states[0][steps - 1];
        first_reverse = states[1][0];
        input = concat<T>({concat(states[0], 0), concat(states[1], 0)}, 1);
    }
    return reshape(concat<T>({last_forward, first_reverse}, 1), {2 * h});
}

template <typename T>
BasicTensor<T> prepend_cls(const BasicTensor<T>& seq, const BasicTensor<T>& cls) {
    if (seq.rank() < 2 || seq.rank() > 3 || cls.rank() != 1 || seq.shape().back() != cls.dim(0)) {
        throw ShapeError("prepend_cls: sequence " + shape_str(seq.shape()) + " and cls " + shape_str(cls.shape()) +
                         " have incompatible widths");
    }
    const std::size_t d = cls.dim(0);
    const std::size_t length_axis = seq.rank() - 2;
    if (seq.dim(length_axis) == 0) throw ShapeError("prepend_cls: empty sequence");
    if (seq.rank() == 2) return concat<T>({reshape(cls, {1, d}), seq}, 0);
    auto row = reshape(cls, {1, 1, d});
    auto rows = seq.dim(0) == 1 ? row : concat(std::vector<BasicTensor<T>>(seq.dim(0), row), 0);
    return concat<T>({rows, seq}, 1);
}

std::vector<double> sinusoidal_table(std::size_t length, std::size_t dim) {
    std::vector<double> table(length * dim);
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double exponent = static_cast<double>(i - i % 2) / static_cast<double>(dim);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
            table[pos * dim + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    }
    return table;
}

template <typename T>
BasicTensor<T> add_positional(const BasicTensor<T>& seq, bool enabled) {
    if (!enabled) return seq;
    if (seq.rank() < 2) throw ShapeError("add_positional needs [.., L, d], got " + shape_str(seq.shape()));
    const std::size_t length = seq.dim(seq.rank() - 2);
    const std::size_t dim = seq.dim(seq.rank() - 1);
    const auto table = sinusoidal_table(length, dim);
    return add(seq, BasicTensor<T>::from({length, dim}, std::vector<T>(table.begin(), table.end())));
}

#define DFM_INSTANTIATE(T)                                                                                      \
    template Linear<T> make_linear(std::size_t, std::size_t, Rng&);                                              \
    template LayerNormParams<T> make_layer_norm(std::size_t);                                                    \
    template AttentionParams<T> make_attention(std::size_t, std::size_t, std::size_t, Rng&);                     \
    template EncoderBlockParams<T> make_encoder_block(std::size_t, std::size_t, std::size_t, std::size_t, double, \
                                                      Rng&);                                                     \
    template HeadParams<T> make_head(std::size_t, std::size_t, std::size_t, Rng&);                               \
    template BiLstmParams<T> make_bilstm(std::size_t, std::size_t, std::size_t, Rng&);                           \
    template BasicTensor<T> make_cls(std::size_t, Rng&);                                                         \
    template void append_params(const std::string&, const Linear<T>&, NamedParams<T>&);                         \
    template void append_params(const std::string&, const LayerNormParams<T>&, NamedParams<T>&);                \
    template void append_params(const std::string&, const AttentionParams<T>&, NamedParams<T>&);                \
    template void append_params(const std::string&, const EncoderBlockParams<T>&, NamedParams<T>&);             \
    template void append_params(const std::string&, const HeadParams<T>&, NamedParams<T>&);                     \
    template void append_params(const std::string&, const BiLstmParams<T>&, NamedParams<T>&);                   \
    template BasicTensor<T> linear(const BasicTensor<T>&, const Linear<T>&);                                     \
    template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng*);                                        \
    template BasicTensor<T> multi_head_attention(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                                 const SequenceMask&, const AttentionParams<T>&,                 \
                                                 AttentionTrace<T>*);                                            \
    template BasicTensor<T> encoder_block(const BasicTensor<T>&, const BasicTensor<T>*, const SequenceMask&,     \
                                          const EncoderBlockParams<T>&, Rng*);                                   \
    template BasicTensor<T> mlp_head(const BasicTensor<T>&, const HeadParams<T>&, HeadMode);                     \
    template BasicTensor<T> bilstm_encode(const BasicTensor<T>&, const BiLstmParams<T>&);                        \
    template BasicTensor<T> prepend_cls(const BasicTensor<T>&, const BasicTensor<T>&);                           \
    template BasicTensor<T> add_positional(const BasicTensor<T>&, bool);

DFM_INSTANTIATE(float)
DFM_INSTANTIATE(double)

#undef DFM_INSTANTIATE

}  // namespace dfm
