#include "emocap/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "emocap/random.hpp"

namespace emocap {

namespace {

DenseArray uniform_matrix(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    DenseArray out({rows, cols});
    for (auto& v : out.data()) v = rng.uniform(-bound, bound);
    return out;
}

constexpr double kMaskedLogit = -1e30;

void require_shape(const DenseArray& a, std::size_t rows, std::size_t cols, const char* what) {
    if (a.rows() != rows || a.cols() != cols)
        throw Error(ErrorKind::ShapeMismatch, std::string(what) + " has shape " + shape_string(a.shape()) +
                                                  ", expected [" + std::to_string(rows) + "," +
                                                  std::to_string(cols) + "]");
}

} // namespace

std::vector<std::pair<std::string, DenseArray*>> ModelParams::named() {
    return {{leaf::kPatchProjection, &image.patch_projection},
            {leaf::kGlobalProjection, &image.global_projection},
            {leaf::kEmbeddingTable, &text.embedding_table},
            {leaf::kOutputProjection, &text.output_projection},
            {leaf::kQuery, &attention.w_query},
            {leaf::kKey, &attention.w_key},
            {leaf::kValue, &attention.w_value},
            {leaf::kTemperatureLogit, &temperature_logit}};
}

std::vector<std::pair<std::string, const DenseArray*>> ModelParams::named() const {
    std::vector<std::pair<std::string, const DenseArray*>> out;
    for (auto& [name, ptr] : const_cast<ModelParams*>(this)->named()) out.emplace_back(name, ptr);
    return out;
}

ModelParams init_model(const ModelDims& dims, std::uint64_t seed, double tau_init) {
    if (dims.patches == 0 || dims.raw_features == 0 || dims.embed == 0 || dims.vocab == 0 || dims.token_width == 0)
        throw Error(ErrorKind::ConfigInvalid, "model dimensions must be positive");
    if (!(tau_init >= kTauFloor && tau_init <= kTauCeiling))
        throw Error(ErrorKind::ConfigInvalid, "tau_init must lie in [0.01, 1]");
    Rng rng(derive_seed(seed, 0x1417));
    const auto f = dims.raw_features, d = dims.embed, v = dims.vocab, e = dims.token_width;
    ModelParams p;
    p.image.patch_projection = uniform_matrix(f, d, f, rng);
    p.image.global_projection = uniform_matrix(f, d, f, rng);
    p.text.embedding_table = uniform_matrix(v, e, v, rng);
    p.text.output_projection = uniform_matrix(e, d, e, rng);
    p.attention.w_query = uniform_matrix(d, d, d, rng);
    p.attention.w_key = uniform_matrix(d, d, d, rng);
    p.attention.w_value = uniform_matrix(d, d, d, rng);
    p.temperature_logit = DenseArray::scalar(std::log(tau_init));
    return p;
}

ParamNodes add_param_leaves(ValueGraph& graph) {
    return ParamNodes{graph.input(leaf::kPatchProjection), graph.input(leaf::kGlobalProjection),
                      graph.input(leaf::kEmbeddingTable),  graph.input(leaf::kOutputProjection),
                      graph.input(leaf::kQuery),           graph.input(leaf::kKey),
                      graph.input(leaf::kValue),           graph.input(leaf::kTemperatureLogit)};
}

void bind_params(Bindings& bindings, const ModelParams& params) {
    for (const auto& [name, array] : params.named()) bindings[name] = *array;
}

double clamp_temperature(double tau_logit) { return std::clamp(std::exp(tau_logit), kTauFloor, kTauCeiling); }

NodeId temperature_node(ValueGraph& graph, NodeId tau_logit) {
    return graph.clamped_exp(tau_logit, kTauFloor, kTauCeiling);
}

NodeId image_global_node(ValueGraph& graph, NodeId raw_stack, std::size_t count, std::size_t patches,
                         NodeId global_projection) {
    auto mean = graph.segment_mean(raw_stack, std::vector<std::size_t>(count, patches));
    return graph.l2_normalize_rows(graph.matmul(mean, global_projection));
}

NodeId image_patch_node(ValueGraph& graph, NodeId raw_stack, NodeId patch_projection) {
    return graph.matmul(raw_stack, patch_projection);
}

NodeId text_node(ValueGraph& graph, std::span<const TokenSequence> sequences, NodeId embedding_table,
                 NodeId output_projection) {
    std::vector<std::size_t> ids, lengths;
    for (const auto& seq : sequences) {
        ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
        lengths.push_back(seq.ids.size());
    }
    if (ids.empty()) throw Error(ErrorKind::EmptySequence, "no tokens in any sequence");
    auto rows = graph.gather_rows(embedding_table, std::move(ids));
    auto mean = graph.segment_mean(rows, std::move(lengths));
    return graph.l2_normalize_rows(graph.matmul(mean, output_projection));
}

NodeId cross_attention_node(ValueGraph& graph, NodeId text_local, NodeId patches, std::size_t n, std::size_t m,
                            std::size_t p, std::size_t d, NodeId w_query, NodeId w_key, NodeId w_value) {
    auto q = graph.matmul(text_local, w_query);
    auto k = graph.matmul(patches, w_key);
    auto v = graph.matmul(patches, w_value);
    auto scores = graph.scale(graph.matmul(q, graph.transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
    if (n > 1) {
        DenseArray mask({n * m, n * p}, kMaskedLogit);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t c = 0; c < p; ++c) mask.at(i * m + j, i * p + c) = 0.0;
        scores = graph.add(scores, graph.constant(std::move(mask)));
    }
    return graph.matmul(graph.row_softmax(scores), v);
}

ImageEncoding encode_image(const DenseArray& raw_patches, const ImageEncoderParams& params) {
    const auto f = params.patch_projection.rows();
    if (raw_patches.cols() != f || raw_patches.rows() == 0)
        throw Error(ErrorKind::ShapeMismatch, "raw patches " + shape_string(raw_patches.shape()) +
                                                  " do not match feature width " + std::to_string(f));
    ValueGraph g;
    auto raw = g.input("raw");
    auto gi = image_global_node(g, raw, 1, raw_patches.rows(), g.input(leaf::kGlobalProjection));
    auto ri = image_patch_node(g, raw, g.input(leaf::kPatchProjection));
    Evaluation ev(g, {{"raw", raw_patches},
                      {leaf::kGlobalProjection, params.global_projection},
                      {leaf::kPatchProjection, params.patch_projection}});
    return ImageEncoding{ev.value(gi), ev.value(ri)};
}

DenseArray encode_images(std::span<const DenseArray> raw_patches, const ImageEncoderParams& params) {
    if (raw_patches.empty()) throw Error(ErrorKind::ShapeMismatch, "no images to encode");
    const auto p = raw_patches[0].rows();
    for (const auto& r : raw_patches) require_shape(r, p, params.global_projection.rows(), "raw patches");
    ValueGraph g;
    auto gi = image_global_node(g, g.input("raw"), raw_patches.size(), p, g.input(leaf::kGlobalProjection));
    return evaluate(g, {{"raw", vstack(raw_patches)}, {leaf::kGlobalProjection, params.global_projection}}, gi);
}

DenseArray encode_text(const TokenSequence& tokens, const TextEncoderParams& params) {
    if (tokens.ids.empty()) throw Error(ErrorKind::EmptySequence, "empty token sequence");
    return encode_texts(std::span<const TokenSequence>(&tokens, 1), params);
}

DenseArray encode_texts(std::span<const TokenSequence> sequences, const TextEncoderParams& params) {
    for (const auto& s : sequences) {
        if (s.ids.empty()) throw Error(ErrorKind::EmptySequence, "empty token sequence");
        for (auto id : s.ids)
            if (id >= params.embedding_table.rows())
                throw Error(ErrorKind::ShapeMismatch, "token id outside the embedding table");
    }
    ValueGraph g;
    auto t = text_node(g, sequences, g.input(leaf::kEmbeddingTable), g.input(leaf::kOutputProjection));
    return evaluate(g, {{leaf::kEmbeddingTable, params.embedding_table},
                        {leaf::kOutputProjection, params.output_projection}},
                    t);
}

namespace {

struct AttentionGraph {
    ValueGraph graph;
    NodeId weights{}, pooled{};
};

Bindings attention_bindings(const DenseArray& text_local, const DenseArray& patches,
                            const CrossAttentionParams& params) {
    const auto d = params.w_query.rows();
    require_shape(params.w_query, d, d, "w_query");
    require_shape(params.w_key, d, d, "w_key");
    require_shape(params.w_value, d, d, "w_value");
    if (text_local.cols() != d || patches.cols() != d || text_local.rows() == 0 || patches.rows() == 0)
        throw Error(ErrorKind::ShapeMismatch, "attention inputs must be (M×D) and (P×D)");
    return {{"text", text_local}, {"patches", patches}, {leaf::kQuery, params.w_query},
            {leaf::kKey, params.w_key},  {leaf::kValue, params.w_value}};
}

} // namespace

DenseArray cross_attention_pool(const DenseArray& text_local, const DenseArray& patches,
                                const CrossAttentionParams& params) {
    auto b = attention_bindings(text_local, patches, params);
    ValueGraph g;
    auto out = cross_attention_node(g, g.input("text"), g.input("patches"), 1, text_local.rows(), patches.rows(),
                                    params.w_query.rows(), g.input(leaf::kQuery), g.input(leaf::kKey),
                                    g.input(leaf::kValue));
    return evaluate(g, b, out);
}

DenseArray cross_attention_weights(const DenseArray& text_local, const DenseArray& patches,
                                   const CrossAttentionParams& params) {
    auto b = attention_bindings(text_local, patches, params);
    const double d = static_cast<double>(params.w_query.rows());
    ValueGraph g;
    auto q = g.matmul(g.input("text"), g.input(leaf::kQuery));
    auto k = g.matmul(g.input("patches"), g.input(leaf::kKey));
    auto w = g.row_softmax(g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(d)));
    return evaluate(g, b, w);
}

} // namespace emocap
