#include "emocap/gradcheck.hpp"

#include <algorithm>

#include "emocap/cmgpm.hpp"
#include "emocap/losses.hpp"
#include "emocap/random.hpp"

namespace emocap {

namespace {

constexpr std::size_t kDim = 8;

EmbeddingBatch clustered(std::size_t n, std::size_t m, Rng& rng) {
    const std::size_t clusters = 2;
    DenseArray centers({clusters, kDim});
    for (auto& v : centers.data()) v = rng.normal();
    centers = l2_normalize_rows(centers);
    auto around = [&](std::size_t rows, std::size_t stride) {
        DenseArray out({rows, kDim});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < kDim; ++k)
                out.at(r, k) = centers.at((r / stride) % clusters, k) + 0.2 * rng.normal();
        return out;
    };
    EmbeddingBatch b;
    b.n = n;
    b.m = m;
    b.image_global = around(n, 1);
    b.text_global = around(n, 1);
    b.text_local = around(n * m, m);
    b.pooled_image = around(n * m, m);
    b.tau = 0.2 + 0.3 * rng.uniform();
    if (m > 1) {
        b.local_counts.assign(n, m);
        b.local_counts[n - 1] = 1;
    }
    return b;
}

} // namespace

double GradcheckSuite::worst() const {
    double w = 0.0;
    for (const auto& c : cases) w = std::max(w, c.max_relative_error);
    return w;
}

GradcheckSuite run_gradcheck_suite(std::uint64_t seed, double analytic_sign) {
    const std::vector<std::string> wrt{leaf::kBatchImageGlobal, leaf::kBatchTextGlobal, leaf::kBatchTextLocal,
                                       leaf::kBatchPooledImage, leaf::kBatchTau};
    const CmgpmConfig mining{0.5, 3, false};
    GradcheckSuite suite;
    suite.seed = seed;
    for (const auto& name : kGradcheckLosses) suite.worst_by_loss[name] = 0.0;

    for (std::size_t n : {2, 4, 6}) {
        for (std::size_t m : {1, 3}) {
            Rng rng(derive_seed(seed, n * 16 + m));
            auto batch = clustered(n, m, rng);
            Bindings bind;
            bind_batch(bind, batch);
            bind_weights(bind, mine_batch(batch, mining));

            for (const auto& name : kGradcheckLosses) {
                ValueGraph g;
                auto nodes = add_batch_leaves(g, batch);
                NodeId out;
                if (name == "global") out = global_contrastive_loss(g, nodes);
                else if (name == "intra") out = intra_sample_local_loss(g, nodes);
                else if (name == "inter") out = inter_sample_local_loss(g, nodes);
                else if (name == "global_cmgpm") out = build_overall_loss(g, nodes, 1.0, true).global;
                else if (name == "inter_cmgpm") out = build_overall_loss(g, nodes, 1.0, true).inter;
                else out = build_overall_loss(g, nodes, 1.0, true).total;
                g.set_output(out);
                const double err = check_gradients(g, bind, wrt, 1e-3, analytic_sign).worst();
                suite.cases.push_back({name, n, m, err});
                suite.worst_by_loss[name] = std::max(suite.worst_by_loss[name], err);
            }
        }
    }
    return suite;
}

} // namespace emocap
