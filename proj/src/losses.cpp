#include "emocap/losses.hpp"

#include <algorithm>

namespace emocap {

namespace {

constexpr double kMaskedLogit = -1e30;

void check_rows(const DenseArray& a, std::size_t rows, std::size_t cols, const char* what) {
    if (a.rows() != rows || a.cols() != cols)
        throw Error(ErrorKind::ShapeMismatch, std::string(what) + " has shape " + shape_string(a.shape()));
}

std::vector<std::pair<std::size_t, std::size_t>> diagonal(const std::vector<bool>& keep) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t r = 0; r < keep.size(); ++r)
        if (keep[r]) out.emplace_back(r, r);
    return out;
}

double eval_loss(const EmbeddingBatch& batch, NodeId (*build)(ValueGraph&, const BatchNodes&)) {
    validate_batch(batch);
    ValueGraph g(batch.image_global.precision());
    auto nodes = add_batch_leaves(g, batch);
    auto loss = build(g, nodes);
    Bindings b;
    bind_batch(b, batch);
    return evaluate(g, b, loss)[0];
}

} // namespace

void validate_batch(const EmbeddingBatch& batch) {
    if (batch.n == 0) throw Error(ErrorKind::ShapeMismatch, "batch must hold at least one sample");
    const auto d = batch.image_global.cols();
    check_rows(batch.image_global, batch.n, d, "image_global");
    check_rows(batch.text_global, batch.n, d, "text_global");
    if (batch.m > 0) {
        check_rows(batch.text_local, batch.n * batch.m, d, "text_local");
        check_rows(batch.pooled_image, batch.n * batch.m, d, "pooled_image");
    }
    if (!batch.local_counts.empty()) {
        if (batch.local_counts.size() != batch.n)
            throw Error(ErrorKind::ShapeMismatch, "local_counts must have one entry per sample");
        for (auto c : batch.local_counts)
            if (c > batch.m) throw Error(ErrorKind::ShapeMismatch, "local count exceeds slot count");
    }
    if (!(batch.tau > 0.0)) throw Error(ErrorKind::ConfigInvalid, "temperature must be positive");
}

BatchNodes add_batch_leaves(ValueGraph& graph, const EmbeddingBatch& batch) {
    BatchNodes nodes;
    nodes.n = batch.n;
    nodes.m = batch.m;
    nodes.image_global = graph.input(leaf::kBatchImageGlobal);
    nodes.text_global = graph.input(leaf::kBatchTextGlobal);
    nodes.text_local = graph.input(leaf::kBatchTextLocal);
    nodes.pooled_image = graph.input(leaf::kBatchPooledImage);
    nodes.tau = graph.input(leaf::kBatchTau);
    nodes.local_counts = batch.local_counts;
    return nodes;
}

void bind_batch(Bindings& bindings, const EmbeddingBatch& batch) {
    bindings[leaf::kBatchImageGlobal] = batch.image_global;
    bindings[leaf::kBatchTextGlobal] = batch.text_global;
    if (batch.m > 0) {
        bindings[leaf::kBatchTextLocal] = batch.text_local;
        bindings[leaf::kBatchPooledImage] = batch.pooled_image;
    }
    bindings[leaf::kBatchTau] = DenseArray::scalar(batch.tau);
}

std::vector<bool> realized_slots(std::size_t n, std::size_t m, const std::vector<std::size_t>& local_counts) {
    std::vector<bool> keep(n * m, true);
    if (local_counts.empty()) return keep;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) keep[i * m + j] = j < local_counts[i];
    return keep;
}

std::size_t realized_count(std::size_t n, std::size_t m, const std::vector<std::size_t>& local_counts) {
    const auto keep = realized_slots(n, m, local_counts);
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
}

NodeId global_logits(ValueGraph& graph, const BatchNodes& nodes) {
    auto gi = graph.l2_normalize_rows(nodes.image_global);
    auto gt = graph.l2_normalize_rows(nodes.text_global);
    return graph.div_scalar(graph.matmul(gi, graph.transpose(gt)), nodes.tau);
}

NodeId local_logits(ValueGraph& graph, const BatchNodes& nodes, LocalGrouping grouping) {
    const auto n = nodes.n, m = nodes.m, nm = n * m;
    const auto keep = realized_slots(n, m, nodes.local_counts);
    auto rh = graph.l2_normalize_rows(nodes.pooled_image);
    auto rt = graph.l2_normalize_rows(nodes.text_local);
    auto logits = graph.div_scalar(graph.matmul(rh, graph.transpose(rt)), nodes.tau);

    DenseArray mask({nm, nm}, 0.0);
    bool any_masked = false;
    for (std::size_t a = 0; a < nm; ++a) {
        for (std::size_t b = 0; b < nm; ++b) {
            const bool related = grouping == LocalGrouping::WithinSample ? (a / m == b / m) : (a % m == b % m);
            if (!(related && keep[a] && keep[b])) {
                mask.at(a, b) = kMaskedLogit;
                any_masked = true;
            }
        }
    }
    if (!any_masked) return logits;
    return graph.add(logits, graph.constant(std::move(mask)));
}

NodeId global_contrastive_loss(ValueGraph& graph, const BatchNodes& nodes) {
    auto logits = global_logits(graph, nodes);
    const std::vector<bool> all(nodes.n, true);
    auto image_anchored = graph.pick(graph.row_log_softmax(logits), diagonal(all));
    auto text_anchored = graph.pick(graph.row_log_softmax(graph.transpose(logits)), diagonal(all));
    auto total = graph.add(graph.sum(image_anchored), graph.sum(text_anchored));
    return graph.scale(total, -1.0 / static_cast<double>(nodes.n));
}

namespace {

// Both local losses share this shape; only the candidate grouping differs.
// Rows of `logits` are pooled-image anchors, rows of its transpose are text anchors.
NodeId local_loss(ValueGraph& graph, const BatchNodes& nodes, LocalGrouping grouping) {
    if (nodes.m == 0) throw Error(ErrorKind::ShapeMismatch, "local losses need at least one slot");
    const auto keep = realized_slots(nodes.n, nodes.m, nodes.local_counts);
    const auto realized = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
    if (realized == 0) throw Error(ErrorKind::ShapeMismatch, "batch has no realized local slots");
    auto logits = local_logits(graph, nodes, grouping);
    auto image_anchored = graph.pick(graph.row_log_softmax(logits), diagonal(keep));
    auto text_anchored = graph.pick(graph.row_log_softmax(graph.transpose(logits)), diagonal(keep));
    auto total = graph.add(graph.sum(image_anchored), graph.sum(text_anchored));
    return graph.scale(total, -1.0 / static_cast<double>(realized));
}

} // namespace

NodeId intra_sample_local_loss(ValueGraph& graph, const BatchNodes& nodes) {
    return local_loss(graph, nodes, LocalGrouping::WithinSample);
}

NodeId inter_sample_local_loss(ValueGraph& graph, const BatchNodes& nodes) {
    return local_loss(graph, nodes, LocalGrouping::AcrossSamplesSameSlot);
}

double global_contrastive_loss(const EmbeddingBatch& batch) {
    return eval_loss(batch, static_cast<NodeId (*)(ValueGraph&, const BatchNodes&)>(&global_contrastive_loss));
}

double intra_sample_local_loss(const EmbeddingBatch& batch) {
    return eval_loss(batch, static_cast<NodeId (*)(ValueGraph&, const BatchNodes&)>(&intra_sample_local_loss));
}

double inter_sample_local_loss(const EmbeddingBatch& batch) {
    return eval_loss(batch, static_cast<NodeId (*)(ValueGraph&, const BatchNodes&)>(&inter_sample_local_loss));
}

} // namespace emocap
