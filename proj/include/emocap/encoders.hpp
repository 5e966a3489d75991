#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emocap/caption.hpp"
#include "emocap/numerics.hpp"

namespace emocap {

struct ModelDims {
    std::size_t patches = 4;       // P
    std::size_t raw_features = 16; // F
    std::size_t embed = 32;        // D
    std::size_t vocab = kDefaultVocabSize; // V
    std::size_t token_width = 32;  // E
};

struct ImageEncoderParams {
    DenseArray patch_projection;  // F×D
    DenseArray global_projection; // F×D
};

struct TextEncoderParams {
    DenseArray embedding_table;   // V×E
    DenseArray output_projection; // E×D
};

struct CrossAttentionParams {
    DenseArray w_query; // D×D
    DenseArray w_key;   // D×D
    DenseArray w_value; // D×D
};

struct ModelParams {
    ImageEncoderParams image;
    TextEncoderParams text;
    CrossAttentionParams attention;
    DenseArray temperature_logit; // 1×1, tau = clamp(exp(logit))

    /// Stable (name, array) listing used by the optimizer and checkpoints.
    std::vector<std::pair<std::string, DenseArray*>> named();
    std::vector<std::pair<std::string, const DenseArray*>> named() const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization from one seed.
/// Fan-in is F for image projections, V for the embedding table, E for the
/// text output projection and D for attention.
ModelParams init_model(const ModelDims& dims, std::uint64_t seed, double tau_init = 0.07);

// Leaf names for parameters inside graphs.
namespace leaf {
inline const std::string kPatchProjection = "image.patch_projection";
inline const std::string kGlobalProjection = "image.global_projection";
inline const std::string kEmbeddingTable = "text.embedding_table";
inline const std::string kOutputProjection = "text.output_projection";
inline const std::string kQuery = "attention.w_query";
inline const std::string kKey = "attention.w_key";
inline const std::string kValue = "attention.w_value";
inline const std::string kTemperatureLogit = "temperature.logit";
} // namespace leaf

struct ParamNodes {
    NodeId patch_projection, global_projection;
    NodeId embedding_table, output_projection;
    NodeId w_query, w_key, w_value;
    NodeId temperature_logit;
};

ParamNodes add_param_leaves(ValueGraph& graph);
void bind_params(Bindings& bindings, const ModelParams& params);

inline constexpr double kTauFloor = 0.01;
inline constexpr double kTauCeiling = 1.0;

/// tau = exp(logit) clamped to [0.01, 1.0].
double clamp_temperature(double tau_logit);
NodeId temperature_node(ValueGraph& graph, NodeId tau_logit);

/// stacked raw patches (count*P × F) -> unit-norm global rows (count × D):
/// l2norm(mean_patches(raw) · global_projection).
NodeId image_global_node(ValueGraph& graph, NodeId raw_stack, std::size_t count, std::size_t patches,
                         NodeId global_projection);
/// stacked raw patches -> patch embeddings (count*P × D), not normalized.
NodeId image_patch_node(ValueGraph& graph, NodeId raw_stack, NodeId patch_projection);
/// One unit-norm row per sequence: l2norm(mean(embedding rows) · output_projection).
/// Empty sequences (masked slots) yield zero rows.
NodeId text_node(ValueGraph& graph, std::span<const TokenSequence> sequences, NodeId embedding_table,
                 NodeId output_projection);
/// Per-sample single-head attention: row (i, j) attends over the P patches of
/// sample i only. text_local is (N*M × D), patches is (N*P × D).
NodeId cross_attention_node(ValueGraph& graph, NodeId text_local, NodeId patches, std::size_t n, std::size_t m,
                            std::size_t p, std::size_t d, NodeId w_query, NodeId w_key, NodeId w_value);

struct ImageEncoding {
    DenseArray global;  // 1×D
    DenseArray patches; // P×D
};

ImageEncoding encode_image(const DenseArray& raw_patches, const ImageEncoderParams& params);
DenseArray encode_text(const TokenSequence& tokens, const TextEncoderParams& params);
DenseArray cross_attention_pool(const DenseArray& text_local, const DenseArray& patches,
                                const CrossAttentionParams& params);
/// Attention weights (M×P) of the pooling above.
DenseArray cross_attention_weights(const DenseArray& text_local, const DenseArray& patches,
                                   const CrossAttentionParams& params);

/// Batched helpers for evaluation over many samples.
DenseArray encode_images(std::span<const DenseArray> raw_patches, const ImageEncoderParams& params);
DenseArray encode_texts(std::span<const TokenSequence> sequences, const TextEncoderParams& params);

} // namespace emocap
