#pragma once

#include <cstddef>
#include <vector>

#include "emocap/numerics.hpp"

namespace emocap {

/// Per-batch representation bundle. Local arrays are stacked sample-major:
/// row i*M + j holds slot j of sample i.
struct EmbeddingBatch {
    std::size_t n = 0; // samples
    std::size_t m = 0; // local slots per sample
    DenseArray image_global; // N×D
    DenseArray text_global;  // N×D
    DenseArray text_local;   // N*M × D
    DenseArray pooled_image; // N*M × D
    /// Realized local slots per sample (each ≤ m). Empty means all m.
    std::vector<std::size_t> local_counts;
    double tau = 0.07;
};

void validate_batch(const EmbeddingBatch& batch);

/// Graph handles for a batch; rows are re-normalized inside every loss.
struct BatchNodes {
    std::size_t n = 0;
    std::size_t m = 0;
    NodeId image_global, text_global, text_local, pooled_image;
    NodeId tau;
    std::vector<std::size_t> local_counts;
};

// Leaf names used when a batch is fed into a graph as plain inputs.
namespace leaf {
inline const std::string kBatchImageGlobal = "batch.image_global";
inline const std::string kBatchTextGlobal = "batch.text_global";
inline const std::string kBatchTextLocal = "batch.text_local";
inline const std::string kBatchPooledImage = "batch.pooled_image";
inline const std::string kBatchTau = "batch.tau";
} // namespace leaf

BatchNodes add_batch_leaves(ValueGraph& graph, const EmbeddingBatch& batch);
void bind_batch(Bindings& bindings, const EmbeddingBatch& batch);

/// Realized (i, j) slot mask, N*M entries.
std::vector<bool> realized_slots(std::size_t n, std::size_t m, const std::vector<std::size_t>& local_counts);
std::size_t realized_count(std::size_t n, std::size_t m, const std::vector<std::size_t>& local_counts);

/// Which candidates share a softmax denominator in the local losses.
enum class LocalGrouping { WithinSample, AcrossSamplesSameSlot };

/// Similarity logits for the local losses, (N*M × N*M), row = pooled image
/// (i, j), column = text (n, m), divided by tau, with disallowed pairs pushed
/// to a large negative constant.
NodeId local_logits(ValueGraph& graph, const BatchNodes& nodes, LocalGrouping grouping);
NodeId global_logits(ValueGraph& graph, const BatchNodes& nodes);

NodeId global_contrastive_loss(ValueGraph& graph, const BatchNodes& nodes);
NodeId intra_sample_local_loss(ValueGraph& graph, const BatchNodes& nodes);
NodeId inter_sample_local_loss(ValueGraph& graph, const BatchNodes& nodes);

double global_contrastive_loss(const EmbeddingBatch& batch);
double intra_sample_local_loss(const EmbeddingBatch& batch);
double inter_sample_local_loss(const EmbeddingBatch& batch);

} // namespace emocap
