#pragma once

// Neural building blocks shared by the fusion model and its baselines.
// Sequences are batched as [batch, length, width] with a per-position
// validity mask; padded positions never act as attention keys.

#include "dfm/tensor.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace dfm {

using Rng = std::mt19937_64;

template <typename T>
using NamedParams = std::vector<std::pair<std::string, BasicTensor<T>>>;

struct SequenceMask {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::uint8_t> valid;  // batch * length, 1 = real position

    static SequenceMask all_valid(std::size_t batch, std::size_t length);
    bool is_valid(std::size_t b, std::size_t i) const { return valid[b * length + i] != 0; }
    std::size_t valid_count(std::size_t b) const;
    // Mask with one extra leading valid position per row (for a CLS token).
    SequenceMask with_leading() const;
};

template <typename T>
struct Linear {
    BasicTensor<T> weight;  // [in, out]
    BasicTensor<T> bias;    // [out]

    std::size_t in_dim() const { return weight.dim(0); }
    std::size_t out_dim() const { return weight.dim(1); }
};

template <typename T>
struct LayerNormParams {
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
};

template <typename T>
struct AttentionParams {
    std::size_t num_heads = 12;
    std::size_t model_dim = 768;
    std::size_t context_dim = 768;
    Linear<T> query;   // model_dim -> model_dim
    Linear<T> key;     // context_dim -> model_dim
    Linear<T> value;   // context_dim -> model_dim
    Linear<T> output;  // model_dim -> model_dim
};

template <typename T>
struct EncoderBlockParams {
    AttentionParams<T> attention;
    LayerNormParams<T> attention_norm;
    LayerNormParams<T> ffn_norm;
    Linear<T> ffn_in;   // model_dim -> 2 * model_dim
    Linear<T> ffn_out;  // 2 * model_dim -> model_dim
    double dropout_rate = 0.1;
};

enum class HeadMode { Classify, Regress };

template <typename T>
struct HeadParams {
    Linear<T> fc1;
    Linear<T> fc2;
    Linear<T> fc3;
};

template <typename T>
struct LstmCell {
    BasicTensor<T> input_weight;      // [in, 4h], gate order i, f, g, o
    BasicTensor<T> recurrent_weight;  // [h, 4h]
    BasicTensor<T> bias;              // [4h]
};

template <typename T>
struct BiLstmParams {
    std::size_t input_size = 0;
    std::size_t hidden_size = 0;
    std::vector<std::array<LstmCell<T>, 2>> layers;  // [layer][forward, reverse]
};

// ---- construction (Xavier-uniform weights, zero biases) ----------------------

template <typename T> Linear<T> make_linear(std::size_t in, std::size_t out, Rng& rng);
template <typename T> LayerNormParams<T> make_layer_norm(std::size_t dim);
template <typename T>
AttentionParams<T> make_attention(std::size_t model_dim, std::size_t context_dim, std::size_t num_heads, Rng& rng);
template <typename T>
EncoderBlockParams<T> make_encoder_block(std::size_t model_dim, std::size_t context_dim, std::size_t num_heads,
                                         std::size_t ffn_dim, double dropout_rate, Rng& rng);
template <typename T>
HeadParams<T> make_head(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);
template <typename T>
BiLstmParams<T> make_bilstm(std::size_t input_size, std::size_t hidden_size, std::size_t num_layers, Rng& rng);
// Normal(0, 0.02) embedding vector.
template <typename T> BasicTensor<T> make_cls(std::size_t dim, Rng& rng);

template <typename T> void append_params(const std::string& prefix, const Linear<T>& p, NamedParams<T>& out);
template <typename T> void append_params(const std::string& prefix, const LayerNormParams<T>& p, NamedParams<T>& out);
template <typename T> void append_params(const std::string& prefix, const AttentionParams<T>& p, NamedParams<T>& out);
template <typename T> void append_params(const std::string& prefix, const EncoderBlockParams<T>& p, NamedParams<T>& out);
template <typename T> void append_params(const std::string& prefix, const HeadParams<T>& p, NamedParams<T>& out);
template <typename T> void append_params(const std::string& prefix, const BiLstmParams<T>& p, NamedParams<T>& out);

// ---- forward ---------------------------------------------------------------

// x [..., in] -> [..., out]
template <typename T> BasicTensor<T> linear(const BasicTensor<T>& x, const Linear<T>& layer);

// Inverted dropout.  A null rng means inference: identity.
template <typename T> BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Rng* rng);

// Attention probabilities [batch * heads, Lq, Lk] when requested.
template <typename T>
struct AttentionTrace {
    BasicTensor<T> weights;
};

// queries [B, Lq, model_dim], context [B, Lk, context_dim] -> [B, Lq, model_dim].
// Throws UsageError when some batch row has no valid context position.
template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& queries, const BasicTensor<T>& context,
                                    const SequenceMask& context_mask, const AttentionParams<T>& params,
                                    AttentionTrace<T>* trace = nullptr);

// Pre-norm transformer block.  Self-attention when `context` is null
// (`key_mask` then describes x), cross-attention otherwise.
template <typename T>
BasicTensor<T> encoder_block(const BasicTensor<T>& x, const BasicTensor<T>* context, const SequenceMask& key_mask,
                             const EncoderBlockParams<T>& params, Rng* dropout_rng);

// x [B, in] -> probabilities [B, K] (Classify) or scores [B, 1] (Regress).
template <typename T>
BasicTensor<T> mlp_head(const BasicTensor<T>& x, const HeadParams<T>& params, HeadMode mode);

// seq [L, d] -> [2h]: last-layer forward state after step L-1 joined with
// the reverse state after step 0.
template <typename T>
BasicTensor<T> bilstm_encode(const BasicTensor<T>& seq, const BiLstmParams<T>& params);

// [L, d] -> [L+1, d] or [B, L, d] -> [B, L+1, d] with cls as row 0.
template <typename T>
BasicTensor<T> prepend_cls(const BasicTensor<T>& seq, const BasicTensor<T>& cls);

// Standard sinusoidal table, base 10000: [length, dim].
std::vector<double> sinusoidal_table(std::size_t length, std::size_t dim);

// Adds the sinusoidal table along the position axis (second to last).
template <typename T>
BasicTensor<T> add_positional(const BasicTensor<T>& seq, bool enabled = true);

}  // namespace dfm
