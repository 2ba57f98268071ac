#pragma once

// Segment features, the dataset manifest, preprocessing rules and the
// synthetic dataset generator.

#include "dfm/objective.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dfm {

enum class Modality { Text, Audio, Video };

inline constexpr std::array<Modality, 3> kModalities = {Modality::Text, Modality::Audio, Modality::Video};

std::string_view modality_key(Modality m);  // "text", "audio", "video"
char modality_letter(Modality m);           // 'T', 'A', 'V'

// Row-major float matrix of per-step embeddings.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> values;

    FeatureMatrix() = default;
    FeatureMatrix(std::size_t rows, std::size_t cols) : rows(rows), cols(cols), values(rows * cols, 0.0f) {}

    bool empty() const { return rows == 0; }
    std::span<float> row(std::size_t i) { return {values.data() + i * cols, cols}; }
    std::span<const float> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
    float& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    bool operator==(const FeatureMatrix&) const = default;
};

struct SegmentFeatures {
    std::string segment_id;
    std::string teacher_id;
    std::string lesson_id;
    FeatureMatrix text;   // utterances x 768
    FeatureMatrix audio;  // 10 s chunks x 1024
    FeatureMatrix video;  // 10 s windows x 768
    double duration_s = 0.0;

    const FeatureMatrix& get(Modality m) const;
    FeatureMatrix& get(Modality m);
};

struct FeatureDims {
    std::size_t text = 768;
    std::size_t audio = 1024;
    std::size_t video = 768;

    std::size_t get(Modality m) const;
    bool operator==(const FeatureDims&) const = default;
};

// ---- feature files ---------------------------------------------------------
//
// "DFX1", then text, audio and video blocks, each u32 rows, u32 cols and
// rows*cols little-endian IEEE-754 floats.  An absent modality has rows = 0.

std::vector<std::uint8_t> encode_features(const SegmentFeatures& features);
// Identifiers are not stored in the file and come back empty.  When `expected`
// is given, every nonempty block must have the expected width.
SegmentFeatures decode_features(std::span<const std::uint8_t> bytes, const FeatureDims* expected = nullptr);
void write_feature_file(const std::filesystem::path& path, const SegmentFeatures& features);
SegmentFeatures read_feature_file(const std::filesystem::path& path, const FeatureDims* expected = nullptr);

// ---- manifest ---------------------------------------------------------------

struct SegmentRecord {
    std::string segment_id;
    std::string teacher_id;
    std::string lesson_id;
    std::string features;  // relative to the dataset root
    std::map<Component, double> labels;
    double duration_s = 0.0;
};

struct RaterRecord {
    std::string segment_id;
    std::string rater_id;
    Component component = Component::Nature;
    int score = 0;  // 1..4
};

struct StudentRecord {
    std::string student_id;
    std::string teacher_id;
    double test_score = 0.0;
    double interest = 0.0;
    double self_efficacy = 0.0;
};

struct DatasetManifest {
    FeatureDims dims;
    std::vector<SegmentRecord> segments;
    std::vector<RaterRecord> rater_records;
    std::vector<StudentRecord> student_records;

    // Throws DataError on duplicate ids, off-scale labels, or rater records
    // that are not exactly two distinct raters whose mean is the label.
    void validate() const;
    const SegmentRecord& segment(const std::string& id) const;
    std::vector<std::string> teachers() const;  // sorted, unique
};

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Manifest plus loaded features; features[i] belongs to manifest.segments[i].
struct Dataset {
    std::filesystem::path root;
    DatasetManifest manifest;
    std::vector<SegmentFeatures> features;

    static Dataset load(const std::filesystem::path& manifest_path);
    std::size_t size() const { return features.size(); }
    double label(std::size_t i, Component c) const { return manifest.segments[i].labels.at(c); }
    const std::string& teacher(std::size_t i) const { return manifest.segments[i].teacher_id; }
    // Indices of segments whose teacher is in `teachers`, in manifest order.
    std::vector<std::size_t> select_teachers(const std::vector<std::string>& teachers) const;
};

// ---- preprocessing rules ------------------------------------------------------

inline constexpr double kSegmentSeconds = 960.0;
inline constexpr double kMinTailSeconds = 480.0;

// 16-minute windows; a final remainder shorter than 8 minutes joins the
// previous window.
std::vector<std::pair<double, double>> segment_boundaries(double lesson_duration_s);

// Mean word embedding per utterance.  Spans are half-open [begin, end) word
// ranges that must tile 0..W in order.
FeatureMatrix aggregate_words_to_utterances(const FeatureMatrix& words,
                                            const std::vector<std::pair<std::size_t, std::size_t>>& spans);

// Means over non-overlapping windows of window_s seconds; a partial final
// window is kept.
FeatureMatrix aggregate_to_chunks(const FeatureMatrix& frames, double rate_hz, double window_s = 10.0);

// Mean of the two raters' integer scores for one segment and component.
double average_rater_scores(const std::vector<RaterRecord>& records, const std::string& segment_id,
                            Component component);

// ---- synthetic data ----------------------------------------------------------

struct SynthConfig {
    std::size_t n_teachers = 30;
    std::size_t segments_per_teacher = 4;
    std::size_t segments_per_lesson = 2;
    std::size_t text_len_min = 4;
    std::size_t text_len_max = 8;
    std::size_t chunk_len_min = 4;
    std::size_t chunk_len_max = 8;
    // [modality][component] in [0, 1]
    std::array<std::array<double, 3>, 3> signal{{{1, 1, 1}, {1, 1, 1}, {1, 1, 1}}};
    double rho = 0.3;            // latent correlation across components
    double noise_sd = 0.1;       // per-coordinate embedding noise
    double rater_sd = 0.4;       // synthetic rater noise
    std::size_t n_raters = 6;
    std::size_t students_per_teacher = 0;
    double outcome_noise_sd = 0.1;
    FeatureDims dims;
    std::uint64_t seed = 0;

    void validate() const;
};

// Writes features/<segment>.dfx and manifest.json under `root` and returns
// the loaded dataset.  Deterministic in cfg.
Dataset generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& root);

}  // namespace dfm
