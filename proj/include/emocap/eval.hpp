#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "emocap/encoders.hpp"
#include "emocap/synth_data.hpp"

namespace emocap {

inline const std::string kClassPlaceholder = "{CLASS}";
inline const std::string kDefaultPromptTemplate = "a photo of a face with an expression of {CLASS}.";
inline constexpr std::size_t kDefaultVideoFrames = 16;

struct ClassPromptSet {
    std::vector<std::string> class_names;
    std::string prompt_template = kDefaultPromptTemplate;
    DenseArray embeddings; // C×D, unit rows
};

/// Fills the template once per class and encodes the prompts.
/// Throws ConfigInvalid for fewer than two classes or a template without
/// exactly one placeholder.
ClassPromptSet build_prompts(const std::vector<std::string>& class_names, const TextEncoderParams& params,
                             std::size_t vocab_size = kDefaultVocabSize,
                             const std::string& prompt_template = kDefaultPromptTemplate);

/// Argmax with ties resolved to the lowest index.
std::size_t argmax_lowest(std::span<const double> scores);

std::vector<double> zero_shot_scores(std::span<const double> image_embedding, const DenseArray& class_embeddings);
std::size_t zero_shot_classify(std::span<const double> image_embedding, const ClassPromptSet& prompts);
std::size_t zero_shot_classify(std::span<const double> image_embedding, const DenseArray& class_embeddings);

/// Mean of the frame embeddings, re-normalized, then classified. Throws EmptyVideo.
std::size_t video_zero_shot(const DenseArray& frame_embeddings, const DenseArray& class_embeddings);
std::size_t video_zero_shot(const DenseArray& frame_embeddings, const ClassPromptSet& prompts);

/// Evenly spaced subset of at most `frames` indices from a clip.
std::vector<std::size_t> sample_clip_frames(const std::vector<std::size_t>& clip, std::size_t frames);

struct MetricsReport {
    double uar = 0.0;
    double war = 0.0;
    std::vector<double> per_class_recall;     // 0 for classes without support
    std::vector<bool> class_present;          // false: excluded from UAR
    std::vector<std::size_t> support;
    std::vector<std::vector<std::size_t>> confusion; // [true][predicted]
    std::size_t count = 0;
    std::map<std::string, std::map<std::size_t, double>> recall_at; // direction -> K -> recall
};

/// `classes` = 0 infers the class count from the largest index seen.
MetricsReport compute_uar_war(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels,
                              std::size_t classes = 0);

inline const std::string kImageToText = "image_to_text";
inline const std::string kTextToImage = "text_to_image";

/// recall@K in both directions over the full gallery; ties rank the lower index first.
std::map<std::string, std::map<std::size_t, double>> retrieval_eval(const DenseArray& image_embeddings,
                                                                    const DenseArray& text_embeddings,
                                                                    const std::vector<std::size_t>& ks);

/// 0-based rank of the paired candidate for every query (rows of `queries`).
std::vector<std::size_t> pair_ranks(const DenseArray& queries, const DenseArray& candidates);

struct ProbeConfig {
    double learning_rate = 0.5;
    double l2 = 1e-4;
    double tolerance = 1e-5;
    std::size_t max_iterations = 10000;
};

struct ProbeModel {
    DenseArray weights; // D×C
    DenseArray bias;    // 1×C
    std::size_t iterations = 0;
    double gradient_norm = 0.0;
};

/// Multinomial logistic regression by full-batch gradient descent.
ProbeModel fit_logistic_regression(const DenseArray& features, const std::vector<std::size_t>& labels,
                                   std::size_t classes, const ProbeConfig& config = {});
std::vector<std::size_t> predict_logistic(const ProbeModel& model, const DenseArray& features);

/// Few-shot probe: `shots` seeded examples per class from the training pool.
/// Throws InsufficientShots when a class has fewer than `shots` examples.
MetricsReport linear_probe(const DenseArray& train_embeddings, const std::vector<std::size_t>& train_labels,
                           const DenseArray& test_embeddings, const std::vector<std::size_t>& test_labels,
                           std::size_t shots, std::uint64_t seed, const ProbeConfig& config = {});

// Dataset-level helpers over a trained model.
DenseArray embed_images(const ModelParams& params, const Dataset& dataset);
DenseArray embed_captions(const ModelParams& params, const Dataset& dataset, GlobalTextPolicy policy,
                          std::size_t vocab_size);

/// One prediction per record, or per frame-group clip when `video` is set.
MetricsReport zero_shot_eval(const DenseArray& image_embeddings, const Dataset& dataset,
                             const ClassPromptSet& prompts, bool video = false,
                             std::size_t frames = kDefaultVideoFrames);

/// Mean pairwise cosine among distinct same-label rows.
double within_class_cosine(const DenseArray& embeddings, const std::vector<std::size_t>& labels);

nlohmann::ordered_json report_to_json(const MetricsReport& report);

} // namespace emocap
