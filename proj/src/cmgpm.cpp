#include "emocap/cmgpm.hpp"

#include <algorithm>
#include <numeric>

namespace emocap {

double PositiveSets::mean_size() const {
    if (anchors.empty()) return 0.0;
    double total = 0.0;
    for (const auto& a : anchors) total += static_cast<double>(a.members.size());
    return total / static_cast<double>(anchors.size());
}

void validate_mining(double sigma, std::size_t top_k) {
    if (!(sigma > 0.0 && sigma < 1.0)) throw Error(ErrorKind::InvalidThreshold, "sigma must lie in (0, 1)");
    if (top_k < 1) throw Error(ErrorKind::InvalidK, "top_k must be at least 1");
}

PositiveSets mine_positive_sets(const DenseArray& guidance, double sigma, std::size_t top_k) {
    validate_mining(sigma, top_k);
    const auto n = guidance.rows();
    PositiveSets out;
    out.sigma = sigma;
    out.top_k = top_k;
    out.anchors.resize(n);

    std::vector<double> sims(n);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < n; ++p) sims[p] = p == i ? 1.0 : dot(guidance.row(i), guidance.row(p));
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (a == i || b == i) return a == i && b != i;
            if (sims[a] != sims[b]) return sims[a] > sims[b];
            return a < b;
        });
        std::vector<std::size_t> chosen;
        for (std::size_t r = 0; r < std::min(top_k, n); ++r)
            if (sims[order[r]] > sigma) chosen.push_back(order[r]);
        std::sort(chosen.begin(), chosen.end());

        auto& set = out.anchors[i];
        for (auto p : chosen) {
            set.members.push_back(p);
            set.weights.push_back(p == i ? 1.0 : std::min(sims[p], 1.0));
        }
    }
    return out;
}

DenseArray weight_matrix(const PositiveSets& sets, bool normalize) {
    const auto n = sets.anchors.size();
    DenseArray w({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& a = sets.anchors[i];
        double total = 0.0;
        for (double v : a.weights) total += v;
        for (std::size_t k = 0; k < a.members.size(); ++k)
            w.at(i, a.members[k]) = normalize ? a.weights[k] / total : a.weights[k];
    }
    return w;
}

namespace {

// Scatter per-slot mining results into an (N*M)^2 matrix.
DenseArray local_weights(const DenseArray& normalized, std::size_t n, std::size_t m, const std::vector<bool>& keep,
                         const CmgpmConfig& config, double& size_sum, std::size_t& anchors) {
    DenseArray w({n * m, n * m}, 0.0);
    const auto d = normalized.cols();
    for (std::size_t j = 0; j < m; ++j) {
        std::vector<std::size_t> samples;
        for (std::size_t i = 0; i < n; ++i)
            if (keep[i * m + j]) samples.push_back(i);
        if (samples.empty()) continue;
        DenseArray rows({samples.size(), d});
        for (std::size_t k = 0; k < samples.size(); ++k) {
            auto src = normalized.row(samples[k] * m + j);
            std::copy(src.begin(), src.end(), rows.row(k).begin());
        }
        const auto slot_w = weight_matrix(mine_positive_sets(rows, config.sigma, config.top_k),
                                          config.normalize_weights);
        for (std::size_t a = 0; a < samples.size(); ++a) {
            double members = 0.0;
            for (std::size_t b = 0; b < samples.size(); ++b) {
                const double v = slot_w.at(a, b);
                if (v == 0.0) continue;
                w.at(samples[a] * m + j, samples[b] * m + j) = v;
                members += 1.0;
            }
            size_sum += members;
            ++anchors;
        }
    }
    return w;
}

} // namespace

MinedWeights mine_batch(const EmbeddingBatch& values, const CmgpmConfig& config) {
    validate_batch(values);
    validate_mining(config.sigma, config.top_k);
    MinedWeights out;
    out.text_sets = mine_positive_sets(l2_normalize_rows(values.text_global), config.sigma, config.top_k);
    out.image_sets = mine_positive_sets(l2_normalize_rows(values.image_global), config.sigma, config.top_k);
    out.global_text_guided = weight_matrix(out.text_sets, config.normalize_weights);
    out.global_image_guided = weight_matrix(out.image_sets, config.normalize_weights);
    out.mean_global_set_size = 0.5 * (out.text_sets.mean_size() + out.image_sets.mean_size());

    if (values.m > 0) {
        const auto keep = realized_slots(values.n, values.m, values.local_counts);
        double size_sum = 0.0;
        std::size_t anchors = 0;
        out.local_image_guided = local_weights(l2_normalize_rows(values.pooled_image), values.n, values.m, keep,
                                               config, size_sum, anchors);
        out.local_text_guided = local_weights(l2_normalize_rows(values.text_local), values.n, values.m, keep,
                                              config, size_sum, anchors);
        out.mean_local_set_size = anchors ? size_sum / static_cast<double>(anchors) : 1.0;
    }
    return out;
}

void bind_weights(Bindings& bindings, const MinedWeights& weights) {
    bindings[leaf::kGlobalTextGuided] = weights.global_text_guided;
    bindings[leaf::kGlobalImageGuided] = weights.global_image_guided;
    if (!weights.local_image_guided.empty()) {
        bindings[leaf::kLocalImageGuided] = weights.local_image_guided;
        bindings[leaf::kLocalTextGuided] = weights.local_text_guided;
    }
}

void bind_weights(Evaluation& evaluation, const MinedWeights& weights) {
    evaluation.bind(leaf::kGlobalTextGuided, weights.global_text_guided);
    evaluation.bind(leaf::kGlobalImageGuided, weights.global_image_guided);
    if (!weights.local_image_guided.empty()) {
        evaluation.bind(leaf::kLocalImageGuided, weights.local_image_guided);
        evaluation.bind(leaf::kLocalTextGuided, weights.local_text_guided);
    }
}

NodeId global_loss_with_cmgpm(ValueGraph& graph, const BatchNodes& nodes, NodeId text_guided, NodeId image_guided) {
    auto logits = global_logits(graph, nodes);
    auto image_anchored = graph.sum(graph.mul(graph.row_log_softmax(logits), text_guided));
    auto text_anchored = graph.sum(graph.mul(graph.row_log_softmax(graph.transpose(logits)), image_guided));
    return graph.scale(graph.add(image_anchored, text_anchored), -1.0 / static_cast<double>(nodes.n));
}

NodeId inter_local_loss_with_cmgpm(ValueGraph& graph, const BatchNodes& nodes, NodeId local_image_guided,
                                   NodeId local_text_guided) {
    const auto realized = realized_count(nodes.n, nodes.m, nodes.local_counts);
    if (realized == 0) throw Error(ErrorKind::ShapeMismatch, "batch has no realized local slots");
    auto logits = local_logits(graph, nodes, LocalGrouping::AcrossSamplesSameSlot);
    auto text_anchored = graph.sum(graph.mul(graph.row_log_softmax(graph.transpose(logits)), local_image_guided));
    auto image_anchored = graph.sum(graph.mul(graph.row_log_softmax(logits), local_text_guided));
    return graph.scale(graph.add(text_anchored, image_anchored), -1.0 / static_cast<double>(realized));
}

LossTerms build_overall_loss(ValueGraph& graph, const BatchNodes& nodes, double alpha, bool active) {
    if (alpha < 0.0) throw Error(ErrorKind::ConfigInvalid, "alpha must be non-negative");
    LossTerms terms;
    terms.cmgpm_active = active;
    if (active) {
        terms.global = global_loss_with_cmgpm(graph, nodes, graph.input(leaf::kGlobalTextGuided),
                                              graph.input(leaf::kGlobalImageGuided));
        terms.inter = inter_local_loss_with_cmgpm(graph, nodes, graph.input(leaf::kLocalImageGuided),
                                                  graph.input(leaf::kLocalTextGuided));
    } else {
        terms.global = global_contrastive_loss(graph, nodes);
        terms.inter = inter_sample_local_loss(graph, nodes);
    }
    terms.intra = intra_sample_local_loss(graph, nodes);
    terms.total = graph.add(terms.global, graph.scale(graph.add(terms.intra, terms.inter), alpha));
    return terms;
}

double global_loss_with_cmgpm(const EmbeddingBatch& batch, const CmgpmConfig& config) {
    validate_batch(batch);
    const auto weights = mine_batch(batch, config);
    ValueGraph g(batch.image_global.precision());
    auto nodes = add_batch_leaves(g, batch);
    auto loss = global_loss_with_cmgpm(g, nodes, g.input(leaf::kGlobalTextGuided), g.input(leaf::kGlobalImageGuided));
    Bindings b;
    bind_batch(b, batch);
    bind_weights(b, weights);
    return evaluate(g, b, loss)[0];
}

double global_loss_with_cmgpm(const EmbeddingBatch& batch, double sigma, std::size_t top_k) {
    return global_loss_with_cmgpm(batch, CmgpmConfig{sigma, top_k, false});
}

double inter_local_loss_with_cmgpm(const EmbeddingBatch& batch, const CmgpmConfig& config) {
    validate_batch(batch);
    const auto weights = mine_batch(batch, config);
    ValueGraph g(batch.image_global.precision());
    auto nodes = add_batch_leaves(g, batch);
    auto loss = inter_local_loss_with_cmgpm(g, nodes, g.input(leaf::kLocalImageGuided),
                                            g.input(leaf::kLocalTextGuided));
    Bindings b;
    bind_batch(b, batch);
    bind_weights(b, weights);
    return evaluate(g, b, loss)[0];
}

double inter_local_loss_with_cmgpm(const EmbeddingBatch& batch, double sigma, std::size_t top_k) {
    return inter_local_loss_with_cmgpm(batch, CmgpmConfig{sigma, top_k, false});
}

LossValues overall_loss(const EmbeddingBatch& batch, std::size_t epoch, const ScheduleConfig& schedule,
                        const CmgpmConfig& config) {
    validate_batch(batch);
    const bool active = cmgpm_active(epoch, schedule);
    ValueGraph g(batch.image_global.precision());
    auto nodes = add_batch_leaves(g, batch);
    auto terms = build_overall_loss(g, nodes, schedule.alpha, active);
    Bindings b;
    bind_batch(b, batch);
    if (active) bind_weights(b, mine_batch(batch, config));
    Evaluation ev(g, std::move(b));
    return LossValues{ev.value(terms.total)[0], ev.value(terms.global)[0], ev.value(terms.intra)[0],
                      ev.value(terms.inter)[0], active};
}

double positive_label_purity(const PositiveSets& sets, const std::vector<int>& labels, std::size_t* pairs) {
    if (labels.size() != sets.anchors.size())
        throw Error(ErrorKind::LengthMismatch, "one label per anchor required");
    std::size_t total = 0, same = 0;
    for (std::size_t i = 0; i < sets.anchors.size(); ++i) {
        for (auto p : sets.anchors[i].members) {
            if (p == i) continue;
            ++total;
            if (labels[p] == labels[i]) ++same;
        }
    }
    if (pairs) *pairs = total;
    return total ? static_cast<double>(same) / static_cast<double>(total) : 1.0;
}

} // namespace emocap
