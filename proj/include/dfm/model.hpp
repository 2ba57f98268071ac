#pragma once

// Text-centred multimodal fusion model, its unimodal variants and the BiLSTM
// baseline, plus the binary checkpoint format.

#include "dfm/blocks.hpp"
#include "dfm/data.hpp"
#include "dfm/objective.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dfm {

struct ModalitySet {
    bool text = true;
    bool audio = true;
    bool video = false;

    bool has(Modality m) const;
    std::size_t size() const { return std::size_t(text) + std::size_t(audio) + std::size_t(video); }
    std::vector<Modality> list() const;
    std::string str() const;                        // "T", "T+A", "T+A+V"
    static ModalitySet parse(std::string_view s);   // accepts letters joined by '+'
    bool operator==(const ModalitySet&) const = default;
};

enum class EncoderKind { Attention, Lstm };
enum class TaskMode { Multi, Single };
enum class LossKind { Oll, Ce, L1 };

std::string_view encoder_key(EncoderKind e);  // "attention", "lstm"
EncoderKind parse_encoder(std::string_view s);
std::string_view task_mode_key(TaskMode t);   // "multi", "single"
TaskMode parse_task_mode(std::string_view s);
std::string_view loss_key(LossKind l);        // "oll", "ce", "l1"
LossKind parse_loss(std::string_view s);

struct ModelConfig {
    ModalitySet modalities;
    EncoderKind encoder = EncoderKind::Attention;
    int num_fusion_modules = 1;
    TaskMode task_mode = TaskMode::Multi;
    Component task_component = Component::Nature;  // used in single-task mode
    LossKind loss = LossKind::Oll;
    bool positional = true;
    double dropout = 0.1;
    std::uint64_t seed = 0;

    FeatureDims dims;
    std::size_t num_heads = 12;
    std::size_t head_hidden = 512;
    std::size_t lstm_layers = 2;

    void validate() const;  // throws UsageError
    std::vector<Component> tasks() const;
    HeadMode head_mode() const { return loss == LossKind::L1 ? HeadMode::Regress : HeadMode::Classify; }
    // Width of the stream the fusion blocks operate on.
    std::size_t model_dim() const;
    std::size_t pooled_dim() const;
};

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

struct FusionModule {
    std::optional<EncoderBlockParams<float>> cross_audio;
    std::optional<EncoderBlockParams<float>> cross_video;
    EncoderBlockParams<float> self_attn;
};

// Per task: [B, 7] probabilities, or [B, 1] scores in regression mode.
struct ModelOutput {
    std::map<Component, Tensor> outputs;
    Tensor pooled;  // [B, pooled_dim]
};

class FusionModel {
public:
    static FusionModel build(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    NamedParams<float> parameters() const;
    std::size_t parameter_count() const;

    // `training` enables dropout, drawn from the model's own generator.
    ModelOutput forward(std::span<const SegmentFeatures* const> batch, bool training);
    ModelOutput forward(const SegmentFeatures& segment, bool training = false);

    // Copies of all parameter values, in parameters() order.
    std::vector<std::vector<float>> snapshot() const;
    void restore(const std::vector<std::vector<float>>& values);

    void save(const std::filesystem::path& path) const;
    static FusionModel load(const std::filesystem::path& path);

    std::size_t num_cross_blocks(Modality m) const;
    std::size_t num_self_blocks() const { return modules_.size(); }
    std::size_t num_heads() const { return heads_.size(); }

private:
    ModelOutput forward_attention(std::span<const SegmentFeatures* const> batch, bool training);
    ModelOutput forward_lstm(std::span<const SegmentFeatures* const> batch);
    ModelOutput apply_heads(const Tensor& pooled) const;

    ModelConfig config_;
    std::map<Modality, Tensor> cls_;
    std::optional<Linear<float>> input_projection_;  // non-text unimodal stream -> model_dim
    std::vector<FusionModule> modules_;
    std::map<Modality, BiLstmParams<float>> lstms_;
    std::map<Component, HeadParams<float>> heads_;
    Rng dropout_rng_;
};

// Padded [B, Lmax, d] batch of one modality with its validity mask.  Throws
// DataError naming the segment and modality on an empty sequence.
std::pair<Tensor, SequenceMask> pad_batch(std::span<const SegmentFeatures* const> batch, Modality m);

// Checkpoint bytes: "DFM1", u32 config length, config JSON, u32 tensor count,
// then per tensor u32 name length, name, u32 rank, u32 dims, float32 values.
std::vector<std::uint8_t> encode_checkpoint(const FusionModel& model);
FusionModel decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace dfm
