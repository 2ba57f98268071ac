#include "dfm/model.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dfm {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kCheckpointMagic[4] = {'D', 'F', 'M', '1'};

Tensor features_tensor(const FeatureMatrix& m) { return Tensor::from({m.rows, m.cols}, m.values); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string text(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void floats(std::span<float> out, const char* what) {
        need(out.size() * 4, what);
        for (auto& f : out) {
            std::uint32_t v = 0;
            for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
            f = std::bit_cast<float>(v);
            pos_ += 4;
        }
    }
    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated in ") + what, pos_);
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

// ---- config ------------------------------------------------------------------

bool ModalitySet::has(Modality m) const {
    switch (m) {
        case Modality::Text: return text;
        case Modality::Audio: return audio;
        case Modality::Video: return video;
    }
    return false;
}

std::vector<Modality> ModalitySet::list() const {
    std::vector<Modality> out;
    for (Modality m : kModalities)
        if (has(m)) out.push_back(m);
    return out;
}

std::string ModalitySet::str() const {
    std::string s;
    for (Modality m : list()) {
        if (!s.empty()) s += '+';
        s += modality_letter(m);
    }
    return s;
}

ModalitySet ModalitySet::parse(std::string_view s) {
    ModalitySet out{false, false, false};
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto next = std::min(s.find('+', pos), s.size());
        const auto tok = s.substr(pos, next - pos);
        if (tok == "T" || tok == "t" || tok == "text") out.text = true;
        else if (tok == "A" || tok == "a" || tok == "audio") out.audio = true;
        else if (tok == "V" || tok == "v" || tok == "video") out.video = true;
        else throw UsageError("unknown modality '" + std::string(tok) + "' in '" + std::string(s) + "'");
        pos = next + 1;
    }
    return out;
}

std::string_view encoder_key(EncoderKind e) { return e == EncoderKind::Attention ? "attention" : "lstm"; }

EncoderKind parse_encoder(std::string_view s) {
    if (s == "attention") return EncoderKind::Attention;
    if (s == "lstm") return EncoderKind::Lstm;
    throw UsageError("unknown encoder '" + std::string(s) + "'");
}

std::string_view task_mode_key(TaskMode t) { return t == TaskMode::Multi ? "multi" : "single"; }

TaskMode parse_task_mode(std::string_view s) {
    if (s == "multi") return TaskMode::Multi;
    if (s == "single") return TaskMode::Single;
    throw UsageError("unknown task mode '" + std::string(s) + "'");
}

std::string_view loss_key(LossKind l) {
    switch (l) {
        case LossKind::Oll: return "oll";
        case LossKind::Ce: return "ce";
        case LossKind::L1: return "l1";
    }
    return "?";
}

LossKind parse_loss(std::string_view s) {
    if (s == "oll" || s == "OLL") return LossKind::Oll;
    if (s == "ce" || s == "CE") return LossKind::Ce;
    if (s == "l1" || s == "L1") return LossKind::L1;
    throw UsageError("unknown loss '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
    if (modalities.size() == 0) throw UsageError("model needs at least one modality");
    if (encoder == EncoderKind::Attention && modalities.size() > 1 && !modalities.text) {
        throw UsageError("multimodal attention fusion is text-centred and needs T");
    }
    if (num_fusion_modules < 1 || num_fusion_modules > 5) {
        throw UsageError("number of fusion modules must be in 1..5, got " + std::to_string(num_fusion_modules));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must be in [0, 1)");
    if (num_heads == 0 || model_dim() % num_heads != 0) {
        throw UsageError("model width " + std::to_string(model_dim()) + " is not divisible by " +
                         std::to_string(num_heads) + " heads");
    }
    if (head_hidden == 0 || lstm_layers == 0) throw UsageError("head and LSTM sizes must be positive");
    if (dims.text == 0 || dims.audio == 0 || dims.video == 0) throw UsageError("feature widths must be positive");
}

std::vector<Component> ModelConfig::tasks() const {
    if (task_mode == TaskMode::Single) return {task_component};
    return {kComponents.begin(), kComponents.end()};
}

std::size_t ModelConfig::model_dim() const { return dims.text; }

std::size_t ModelConfig::pooled_dim() const {
    if (encoder == EncoderKind::Attention) return model_dim();
    std::size_t width = 0;
    for (Modality m : modalities.list()) width += 2 * dims.get(m);
    return width;
}

std::string model_config_to_json(const ModelConfig& c) {
    ordered_json j;
    j["modalities"] = c.modalities.str();
    j["encoder"] = encoder_key(c.encoder);
    j["num_fusion_modules"] = c.num_fusion_modules;
    j["task_mode"] = task_mode_key(c.task_mode);
    j["task_component"] = component_key(c.task_component);
    j["loss"] = loss_key(c.loss);
    j["positional"] = c.positional;
    j["dropout"] = c.dropout;
    j["seed"] = c.seed;
    j["dims"] = {{"text", c.dims.text}, {"audio", c.dims.audio}, {"video", c.dims.video}};
    j["num_heads"] = c.num_heads;
    j["head_hidden"] = c.head_hidden;
    j["lstm_layers"] = c.lstm_layers;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    try {
        const auto j = ordered_json::parse(text);
        ModelConfig c;
        c.modalities = ModalitySet::parse(j.at("modalities").get<std::string>());
        c.encoder = parse_encoder(j.at("encoder").get<std::string>());
        c.num_fusion_modules = j.at("num_fusion_modules").get<int>();
        c.task_mode = parse_task_mode(j.at("task_mode").get<std::string>());
        c.task_component = parse_component(j.at("task_component").get<std::string>());
        c.loss = parse_loss(j.at("loss").get<std::string>());
        c.positional = j.at("positional").get<bool>();
        c.dropout = j.at("dropout").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.dims.text = j.at("dims").at("text").get<std::size_t>();
        c.dims.audio = j.at("dims").at("audio").get<std::size_t>();
        c.dims.video = j.at("dims").at("video").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.head_hidden = j.at("head_hidden").get<std::size_t>();
        c.lstm_layers = j.at("lstm_layers").get<std::size_t>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model config: ") + e.what(), 0);
    }
}

// ---- construction --------------------------------------------------------------

FusionModel FusionModel::build(const ModelConfig& config) {
    config.validate();
    FusionModel model;
    model.config_ = config;
    Rng rng(config.seed);
    const std::size_t d = config.model_dim();
    const auto mods = config.modalities.list();

    if (config.encoder == EncoderKind::Attention) {
        for (Modality m : mods) model.cls_[m] = make_cls<float>(config.dims.get(m), rng);
        if (!config.modalities.text && config.dims.get(mods.front()) != d) {
            model.input_projection_ = make_linear<float>(config.dims.get(mods.front()), d, rng);
        }
        const bool fused = config.modalities.text;
        for (int i = 0; i < config.num_fusion_modules; ++i) {
            FusionModule fm;
            if (fused && config.modalities.audio) {
                fm.cross_audio = make_encoder_block<float>(d, config.dims.audio, config.num_heads, 2 * d,
                                                           config.dropout, rng);
            }
            if (fused && config.modalities.video) {
                fm.cross_video = make_encoder_block<float>(d, config.dims.video, config.num_heads, 2 * d,
                                                           config.dropout, rng);
            }
            fm.self_attn = make_encoder_block<float>(d, d, config.num_heads, 2 * d, config.dropout, rng);
            model.modules_.push_back(std::move(fm));
        }
    } else {
        for (Modality m : mods) {
            model.lstms_[m] = make_bilstm<float>(config.dims.get(m), config.dims.get(m), config.lstm_layers, rng);
        }
    }
    const std::size_t out = config.head_mode() == HeadMode::Classify ? kNumClasses : 1;
    for (Component c : config.tasks()) {
        model.heads_[c] = make_head<float>(config.pooled_dim(), config.head_hidden, out, rng);
    }
    model.dropout_rng_.seed(config.seed ^ 0x9e3779b97f4a7c15ULL);
    return model;
}

NamedParams<float> FusionModel::parameters() const {
    NamedParams<float> out;
    for (const auto& [m, cls] : cls_) out.emplace_back("cls." + std::string(modality_key(m)), cls);
    if (input_projection_) append_params("input_projection", *input_projection_, out);
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        const std::string p = "fusion" + std::to_string(i);
        if (modules_[i].cross_audio) append_params(p + ".cross_audio", *modules_[i].cross_audio, out);
        if (modules_[i].cross_video) append_params(p + ".cross_video", *modules_[i].cross_video, out);
        append_params(p + ".self", modules_[i].self_attn, out);
    }
    for (const auto& [m, lstm] : lstms_) append_params("lstm." + std::string(modality_key(m)), lstm, out);
    for (const auto& [c, head] : heads_) append_params("head." + std::string(component_key(c)), head, out);
    return out;
}

std::size_t FusionModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
}

std::size_t FusionModel::num_cross_blocks(Modality m) const {
    std::size_t n = 0;
    for (const auto& fm : modules_) {
        if (m == Modality::Audio && fm.cross_audio) ++n;
        if (m == Modality::Video && fm.cross_video) ++n;
    }
    return n;
}

// ---- forward ---------------------------------------------------------------------

std::pair<Tensor, SequenceMask> pad_batch(std::span<const SegmentFeatures* const> batch, Modality m) {
    if (batch.empty()) throw UsageError("empty batch");
    std::size_t length = 0;
    const std::size_t width = batch.front()->get(m).cols;
    for (const auto* seg : batch) {
        const auto& fm = seg->get(m);
        if (fm.rows == 0) {
            throw DataError("segment " + seg->segment_id + " has an empty " + std::string(modality_key(m)) +
                            " sequence");
        }
        if (fm.cols != width) throw ShapeError("inconsistent " + std::string(modality_key(m)) + " widths in batch");
        length = std::max(length, fm.rows);
    }
    const std::size_t b = batch.size();
    std::vector<float> values(b * length * width, 0.0f);
    SequenceMask mask{b, length, std::vector<std::uint8_t>(b * length, 0)};
    for (std::size_t i = 0; i < b; ++i) {
        const auto& fm = batch[i]->get(m);
        std::copy(fm.values.begin(), fm.values.end(), values.begin() + static_cast<std::ptrdiff_t>(i * length * width));
        std::fill_n(mask.valid.begin() + static_cast<std::ptrdiff_t>(i * length), fm.rows, std::uint8_t{1});
    }
    return {Tensor::from({b, length, width}, std::move(values)), std::move(mask)};
}

ModelOutput FusionModel::apply_heads(const Tensor& pooled) const {
    ModelOutput out;
    out.pooled = pooled;
    for (const auto& [c, head] : heads_) out.outputs[c] = mlp_head(pooled, head, config_.head_mode());
    return out;
}

ModelOutput FusionModel::forward_attention(std::span<const SegmentFeatures* const> batch, bool training) {
    Rng* rng = training ? &dropout_rng_ : nullptr;
    const auto mods = config_.modalities.list();
    const std::size_t b = batch.size();

    std::map<Modality, std::pair<Tensor, SequenceMask>> streams;
    for (Modality m : mods) {
        auto [seq, mask] = pad_batch(batch, m);
        if (seq.dim(2) != config_.dims.get(m)) {
            throw ShapeError(std::string(modality_key(m)) + " features are " + std::to_string(seq.dim(2)) +
                             " wide, model expects " + std::to_string(config_.dims.get(m)));
        }
        streams[m] = {prepend_cls(add_positional(seq, config_.positional), cls_.at(m)), mask.with_leading()};
    }

    const Modality primary = config_.modalities.text ? Modality::Text : mods.front();
    Tensor x = streams.at(primary).first;
    const SequenceMask& x_mask = streams.at(primary).second;
    if (input_projection_) x = linear(x, *input_projection_);

    for (const auto& fm : modules_) {
        if (fm.cross_audio) {
            const auto& [ctx, mask] = streams.at(Modality::Audio);
            x = encoder_block(x, &ctx, mask, *fm.cross_audio, rng);
        }
        if (fm.cross_video) {
            const auto& [ctx, mask] = streams.at(Modality::Video);
            x = encoder_block(x, &ctx, mask, *fm.cross_video, rng);
        }
        x = encoder_block<float>(x, nullptr, x_mask, fm.self_attn, rng);
    }
    auto pooled = reshape(slice(x, 1, 0, 1), {b, config_.model_dim()});
    return apply_heads(pooled);
}

ModelOutput FusionModel::forward_lstm(std::span<const SegmentFeatures* const> batch) {
    std::vector<Tensor> rows;
    rows.reserve(batch.size());
    for (const auto* seg : batch) {
        std::vector<Tensor> parts;
        for (const auto& [m, lstm] : lstms_) {
            const auto& fm = seg->get(m);
            if (fm.rows == 0) {
                throw DataError("segment " + seg->segment_id + " has an empty " + std::string(modality_key(m)) +
                                " sequence");
            }
            parts.push_back(bilstm_encode(features_tensor(fm), lstm));
        }
        auto joined = parts.size() == 1 ? parts.front() : concat(parts, 0);
        rows.push_back(reshape(joined, {1, joined.numel()}));
    }
    auto pooled = rows.size() == 1 ? rows.front() : concat(rows, 0);
    return apply_heads(pooled);
}

ModelOutput FusionModel::forward(std::span<const SegmentFeatures* const> batch, bool training) {
    if (batch.empty()) throw UsageError("forward: empty batch");
    if (config_.encoder == EncoderKind::Lstm) return forward_lstm(batch);
    return forward_attention(batch, training);
}

ModelOutput FusionModel::forward(const SegmentFeatures& segment, bool training) {
    const SegmentFeatures* one[] = {&segment};
    return forward(std::span<const SegmentFeatures* const>(one), training);
}

std::vector<std::vector<float>> FusionModel::snapshot() const {
    std::vector<std::vector<float>> out;
    for (const auto& [name, t] : parameters()) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

void FusionModel::restore(const std::vector<std::vector<float>>& values) {
    auto params = parameters();
    if (values.size() != params.size()) throw UsageError("snapshot does not match the model's parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].second.mutable_data();
        if (dst.size() != values[i].size()) throw UsageError("snapshot size mismatch for " + params[i].first);
        std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
}

// ---- checkpoints -------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const FusionModel& model) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    const auto cfg = model_config_to_json(model.config());
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out.insert(out.end(), cfg.begin(), cfg.end());
    const auto params = model.parameters();
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

FusionModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader in(bytes);
    if (in.text(4, "magic") != std::string(kCheckpointMagic, 4)) throw FormatError("not a DFM1 checkpoint", 0);
    const auto cfg_len = in.u32("config length");
    auto model = FusionModel::build(model_config_from_json(in.text(cfg_len, "config")));
    auto params = model.parameters();
    const std::size_t count_at = in.pos();
    if (in.u32("tensor count") != params.size()) {
        throw FormatError("checkpoint tensor count does not match its config", count_at);
    }
    for (auto& [name, t] : params) {
        const std::size_t at = in.pos();
        const auto stored = in.text(in.u32("name length"), "name");
        if (stored != name) throw FormatError("expected tensor " + name + ", found " + stored, at);
        Shape shape(in.u32("rank"));
        for (auto& d : shape) d = in.u32("dims");
        if (shape != t.shape()) {
            throw FormatError("tensor " + name + " has shape " + shape_str(shape) + ", expected " +
                              shape_str(t.shape()), at);
        }
        in.floats(t.mutable_data(), "values");
    }
    if (!in.done()) throw FormatError("trailing bytes after checkpoint", in.pos());
    return model;
}

void FusionModel::save(const std::filesystem::path& path) const {
    const auto bytes = encode_checkpoint(*this);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
}

FusionModel FusionModel::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.reason, e.offset);
    }
}

}  // namespace dfm
