#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "emocap/losses.hpp"
#include "emocap/numerics.hpp"

namespace emocap {

/// Mined positives for one anchor, ascending by index. The anchor itself is
/// always a member with weight exactly 1.
struct PositiveSet {
    std::vector<std::size_t> members;
    std::vector<double> weights;
};

struct PositiveSets {
    std::vector<PositiveSet> anchors;
    double sigma = 0.8;
    std::size_t top_k = 5;

    double mean_size() const;
};

struct CmgpmConfig {
    double sigma = 0.8;
    std::size_t top_k = 5;
    /// Divide each anchor's weights by their sum. Off by default.
    bool normalize_weights = false;
};

void validate_mining(double sigma, std::size_t top_k);

/// For anchor i, keeps p with cos(row_i, row_p) > sigma that are also among
/// the top_k most similar rows (self counts as similarity 1 and ranks first;
/// remaining ties go to the lower index). Rows must be unit norm.
PositiveSets mine_positive_sets(const DenseArray& guidance, double sigma, std::size_t top_k);

/// Dense weight matrix: W[i][p] = lambda for p in the set of anchor i, else 0.
DenseArray weight_matrix(const PositiveSets& sets, bool normalize = false);

/// All weights needed for the CMGPM losses of one batch. For each pair of
/// anchor and candidate modality, positives are mined among the candidates
/// using similarity inside the candidate modality, guided by the anchor's own
/// pair in that modality.
struct MinedWeights {
    // N×N. Row i: image anchor over text candidates, mined on text_global.
    DenseArray global_text_guided;
    // N×N. Row i: text anchor over image candidates, mined on image_global.
    DenseArray global_image_guided;
    // N*M × N*M. Row (i,j): text anchor over pooled candidates (p,j), mined on pooled_image at slot j.
    DenseArray local_image_guided;
    // N*M × N*M. Row (i,j): pooled anchor over text candidates (p,j), mined on text_local at slot j.
    DenseArray local_text_guided;

    PositiveSets text_sets;  // global, text-guided
    PositiveSets image_sets; // global, image-guided
    double mean_global_set_size = 1.0;
    double mean_local_set_size = 1.0;
};

MinedWeights mine_batch(const EmbeddingBatch& values, const CmgpmConfig& config);

namespace leaf {
inline const std::string kGlobalTextGuided = "cmgpm.global.text_guided";
inline const std::string kGlobalImageGuided = "cmgpm.global.image_guided";
inline const std::string kLocalImageGuided = "cmgpm.local.image_guided";
inline const std::string kLocalTextGuided = "cmgpm.local.text_guided";
} // namespace leaf

void bind_weights(Bindings& bindings, const MinedWeights& weights);
void bind_weights(Evaluation& evaluation, const MinedWeights& weights);

/// Weighted multi-positive global loss over full-batch denominators.
NodeId global_loss_with_cmgpm(ValueGraph& graph, const BatchNodes& nodes, NodeId text_guided, NodeId image_guided);
/// Inter-sample local loss with mined positives per slot.
NodeId inter_local_loss_with_cmgpm(ValueGraph& graph, const BatchNodes& nodes, NodeId local_image_guided,
                                   NodeId local_text_guided);

double global_loss_with_cmgpm(const EmbeddingBatch& batch, const CmgpmConfig& config);
double global_loss_with_cmgpm(const EmbeddingBatch& batch, double sigma, std::size_t top_k);
double inter_local_loss_with_cmgpm(const EmbeddingBatch& batch, const CmgpmConfig& config);
double inter_local_loss_with_cmgpm(const EmbeddingBatch& batch, double sigma, std::size_t top_k);

struct ScheduleConfig {
    double alpha = 1.0;
    std::size_t activation_epoch = 0; // t
};

inline bool cmgpm_active(std::size_t epoch, const ScheduleConfig& schedule) {
    return epoch >= schedule.activation_epoch;
}

inline double combine_overall(double global, double intra, double inter, double alpha) {
    return global + alpha * (intra + inter);
}

struct LossTerms {
    NodeId total, global, intra, inter;
    bool cmgpm_active = false;
};

/// L_g + alpha (L_intra + L_inter) before activation, with the primed global
/// and inter terms afterwards. When active the graph reads the four weight
/// leaves above, which must be bound before the losses are evaluated.
LossTerms build_overall_loss(ValueGraph& graph, const BatchNodes& nodes, double alpha, bool active);

struct LossValues {
    double total = 0.0, global = 0.0, intra = 0.0, inter = 0.0;
    bool cmgpm_active = false;
};

LossValues overall_loss(const EmbeddingBatch& batch, std::size_t epoch, const ScheduleConfig& schedule,
                        const CmgpmConfig& config);

/// Fraction of non-self mined positives whose label matches the anchor's.
/// Returns 1 when no non-self positives were mined; `pairs` receives the count.
double positive_label_purity(const PositiveSets& sets, const std::vector<int>& labels, std::size_t* pairs = nullptr);

} // namespace emocap
