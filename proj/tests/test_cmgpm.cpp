#include <doctest.h>

#include <cmath>
#include <numbers>

#include "emocap/cmgpm.hpp"
#include "loss_oracles.hpp"
#include "test_support.hpp"

using namespace emocap;
using emocap::testing::clustered_batch;
using emocap::testing::random_batch;

namespace {

EmbeddingBatch duplicated_pair(std::size_t m) {
    EmbeddingBatch b;
    b.n = 2;
    b.m = m;
    b.image_global = DenseArray::matrix(2, 3, {0.6, 0.8, 0, 0.6, 0.8, 0});
    b.text_global = DenseArray::matrix(2, 3, {0, 0.6, 0.8, 0, 0.6, 0.8});
    DenseArray local({2 * m, 3});
    DenseArray pooled({2 * m, 3});
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < 2; ++i) {
            local.at(i * m + j, j % 3) = 2.0;
            pooled.at(i * m + j, (j + 1) % 3) = 1.0;
        }
    b.text_local = local;
    b.pooled_image = pooled;
    b.tau = 1.0;
    return b;
}

bool subset(const PositiveSet& a, const PositiveSet& b) {
    for (auto x : a.members)
        if (std::find(b.members.begin(), b.members.end(), x) == b.members.end()) return false;
    return true;
}

} // namespace

TEST_CASE("mining: threshold then top-K on a hand-built anchor") {
    // Anchor 0 has similarities [1.0, 0.9, 0.2, 0.1] to rows 0..3.
    auto row = [](double c, std::size_t axis) {
        std::vector<double> r(4, 0.0);
        r[0] = c;
        r[axis] = std::sqrt(1.0 - c * c);
        return r;
    };
    std::vector<double> data;
    for (auto& r : {std::vector<double>{1, 0, 0, 0}, row(0.9, 1), row(0.2, 2), row(0.1, 3)})
        data.insert(data.end(), r.begin(), r.end());
    DenseArray g({4, 4}, data);
    auto sets = mine_positive_sets(g, 0.8, 2);
    REQUIRE(sets.anchors[0].members == std::vector<std::size_t>{0, 1});
    CHECK(sets.anchors[0].weights[0] == 1.0);
    CHECK(sets.anchors[0].weights[1] == doctest::Approx(0.9).epsilon(1e-12));

    std::vector<double> sims(4);
    for (std::size_t p = 0; p < 4; ++p) sims[p] = dot(g.row(0), g.row(p));
    auto brute = oracle::mine(sims, 0, 0.8, 2);
    CHECK(brute.members == sets.anchors[0].members);
}

TEST_CASE("mining: degenerate cases and errors") {
    Rng rng(4);
    auto g = emocap::testing::random_unit_rows(7, 5, rng);
    for (const auto& a : mine_positive_sets(g, 0.1, 1).anchors) CHECK(a.members.size() == 1);

    DenseArray spread = DenseArray::identity(4);
    spread.at(1, 0) = 0.9; // row 1 is not unit norm; normalize first
    spread = l2_normalize_rows(spread);
    auto sets = mine_positive_sets(spread, 0.95, 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(sets.anchors[i].members == std::vector<std::size_t>{i});

    auto kind_of = [&](double sigma, std::size_t k) {
        try {
            mine_positive_sets(g, sigma, k);
        } catch (const Error& e) {
            return e.kind();
        }
        return ErrorKind::IoError;
    };
    CHECK(kind_of(0.0, 2) == ErrorKind::InvalidThreshold);
    CHECK(kind_of(1.0, 2) == ErrorKind::InvalidThreshold);
    CHECK(kind_of(1.5, 2) == ErrorKind::InvalidThreshold);
    CHECK(kind_of(0.5, 0) == ErrorKind::InvalidK);
}

TEST_CASE("mining: self kept even when a duplicate has a lower index") {
    DenseArray g = DenseArray::matrix(3, 2, {1, 0, 1, 0, 0, 1});
    auto sets = mine_positive_sets(g, 0.5, 1);
    CHECK(sets.anchors[1].members == std::vector<std::size_t>{1});
    auto wide = mine_positive_sets(g, 0.5, 3);
    CHECK(wide.anchors[1].members == std::vector<std::size_t>{0, 1});
    CHECK(wide.anchors[1].weights == std::vector<double>{1.0, 1.0});
}

TEST_CASE("property: self-inclusion, weight range, agreement with brute force, monotone set size") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const std::size_t n = 3 + seed % 10;
        auto b = clustered_batch(n, 1, 6, 2 + seed % 3, 40 + seed, 0.2);
        const auto& g = b.text_global;
        const double sigma = 0.3 + 0.015 * static_cast<double>(seed);
        const std::size_t k = 1 + seed % 6;
        auto sets = mine_positive_sets(g, sigma, k);
        auto higher = mine_positive_sets(g, std::min(0.99, sigma + 0.1), k);
        auto fewer = mine_positive_sets(g, sigma, std::max<std::size_t>(1, k - 1));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& a = sets.anchors[i];
            CHECK(std::find(a.members.begin(), a.members.end(), i) != a.members.end());
            CHECK(a.members.size() <= k);
            for (std::size_t q = 0; q < a.members.size(); ++q) {
                if (a.members[q] == i) CHECK(a.weights[q] == 1.0);
                CHECK(a.weights[q] > sigma);
                CHECK(a.weights[q] <= 1.0);
            }
            std::vector<double> sims(n);
            for (std::size_t p = 0; p < n; ++p) sims[p] = dot(g.row(i), g.row(p));
            CHECK(oracle::mine(sims, i, sigma, k).members == a.members);
            CHECK(subset(higher.anchors[i], a));
            CHECK(subset(fewer.anchors[i], a));
        }
    }
}

TEST_CASE("CMGPM losses reduce to the base losses with K = 1 or sigma near 1") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto b = random_batch(2 + seed % 7, 1 + seed % 3, 8, 3000 + seed, 0.25);
        CHECK(std::abs(global_loss_with_cmgpm(b, 0.5, 1) - global_contrastive_loss(b)) < 1e-9);
        CHECK(std::abs(global_loss_with_cmgpm(b, 0.999, 5) - global_contrastive_loss(b)) < 1e-9);
        CHECK(std::abs(inter_local_loss_with_cmgpm(b, 0.5, 1) - inter_sample_local_loss(b)) < 1e-9);
        CHECK(std::abs(inter_local_loss_with_cmgpm(b, 0.999, 5) - inter_sample_local_loss(b)) < 1e-9);
    }
}

TEST_CASE("CMGPM closed forms") {
    SUBCASE("duplicated pair: every softmax uniform over two identical candidates") {
        auto b = duplicated_pair(1);
        CHECK(std::abs(global_loss_with_cmgpm(b, 0.5, 2) - 4.0 * std::log(2.0)) < 1e-12);
        CHECK(std::abs(inter_local_loss_with_cmgpm(b, 0.5, 2) - 4.0 * std::log(2.0)) < 1e-12);
        CHECK(std::abs(oracle::global_loss_cmgpm(b, 0.5, 2) - 4.0 * std::log(2.0)) < 1e-12);
    }
    SUBCASE("single sample is zero") {
        auto b = random_batch(1, 3, 6, 5);
        CHECK(global_loss_with_cmgpm(b, 0.5, 5) == 0.0);
        CHECK(inter_local_loss_with_cmgpm(b, 0.5, 5) == 0.0);
    }
}

TEST_CASE("CMGPM losses match the brute-force oracle on clustered batches") {
    Rng rng(12);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const std::size_t n = 2 + seed % 8, m = 1 + seed % 3;
        auto b = clustered_batch(n, m, 8, 2 + seed % 3, 700 + seed, 0.25, 0.2 + 0.02 * static_cast<double>(seed));
        if (seed % 3 == 0) {
            b.local_counts.resize(n);
            for (auto& c : b.local_counts) c = 1 + rng.below(m);
        }
        const double sigma = 0.5 + 0.01 * static_cast<double>(seed);
        const std::size_t k = 2 + seed % 4;
        const double g = global_loss_with_cmgpm(b, sigma, k);
        const double l = inter_local_loss_with_cmgpm(b, sigma, k);
        CHECK(g == doctest::Approx(oracle::global_loss_cmgpm(b, sigma, k)).epsilon(1e-11));
        CHECK(l == doctest::Approx(oracle::inter_loss_cmgpm(b, sigma, k)).epsilon(1e-11));
        CHECK(g >= 0.0);
        CHECK(l >= 0.0);
    }
}

TEST_CASE("normalized-weight variant divides each anchor's weights by their sum") {
    auto b = duplicated_pair(1);
    CmgpmConfig cfg{0.5, 2, true};
    // Each anchor: two positives weighted 1/2 each, each log(1/2).
    CHECK(std::abs(global_loss_with_cmgpm(b, cfg) - 2.0 * std::log(2.0)) < 1e-12);
    auto w = weight_matrix(mine_positive_sets(b.text_global, 0.5, 2), true);
    for (std::size_t r = 0; r < 2; ++r) CHECK(w.at(r, 0) + w.at(r, 1) == doctest::Approx(1.0));
}

TEST_CASE("overall loss follows the epoch-gated schedule") {
    auto b = clustered_batch(6, 3, 8, 2, 61, 0.2, 0.3);
    const CmgpmConfig mining{0.6, 3, false};

    SUBCASE("alpha = 0 before activation equals the global loss") {
        auto v = overall_loss(b, 0, ScheduleConfig{0.0, 5}, mining);
        CHECK(!v.cmgpm_active);
        CHECK(v.total == global_contrastive_loss(b));
    }
    SUBCASE("components combine as L_g + alpha (L_intra + L_inter)") {
        CHECK(combine_overall(1.0, 0.2, 0.4, 0.5) == doctest::Approx(1.3).epsilon(1e-15));
        auto v = overall_loss(b, 1, ScheduleConfig{0.7, 5}, mining);
        CHECK(v.global == doctest::Approx(global_contrastive_loss(b)).epsilon(1e-14));
        CHECK(v.intra == doctest::Approx(intra_sample_local_loss(b)).epsilon(1e-14));
        CHECK(v.inter == doctest::Approx(inter_sample_local_loss(b)).epsilon(1e-14));
        CHECK(v.total == doctest::Approx(combine_overall(v.global, v.intra, v.inter, 0.7)).epsilon(1e-14));
    }
    SUBCASE("after activation the primed terms are used") {
        auto v = overall_loss(b, 5, ScheduleConfig{0.7, 5}, mining);
        CHECK(v.cmgpm_active);
        CHECK(v.global == doctest::Approx(global_loss_with_cmgpm(b, mining)).epsilon(1e-14));
        CHECK(v.inter == doctest::Approx(inter_local_loss_with_cmgpm(b, mining)).epsilon(1e-14));
        CHECK(v.global > global_contrastive_loss(b)); // clustered batch has real positives
    }
    SUBCASE("with K = 1 activation changes nothing") {
        const CmgpmConfig k1{0.6, 1, false};
        auto before = overall_loss(b, 4, ScheduleConfig{0.7, 5}, k1);
        auto after = overall_loss(b, 5, ScheduleConfig{0.7, 5}, k1);
        CHECK(std::abs(before.total - after.total) < 1e-9);
    }
}

TEST_CASE("gradient checks for the CMGPM losses and the full overall loss") {
    const std::vector<std::string> wrt{leaf::kBatchImageGlobal, leaf::kBatchTextGlobal, leaf::kBatchTextLocal,
                                       leaf::kBatchPooledImage, leaf::kBatchTau};
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto b = clustered_batch(6, 1 + seed, 8 + 4 * seed, 2, 4000 + seed, 0.2, 0.3);
        const CmgpmConfig cfg{0.5, 3, false};
        const auto weights = mine_batch(b, cfg);
        CHECK(weights.mean_global_set_size > 1.0);

        ValueGraph g;
        auto nodes = add_batch_leaves(g, b);
        auto terms = build_overall_loss(g, nodes, 0.8, true);
        Bindings bind;
        bind_batch(bind, b);
        bind_weights(bind, weights);
        for (auto out : {terms.global, terms.inter, terms.total}) {
            g.set_output(out);
            CHECK(check_gradients(g, bind, wrt).worst() < 1e-6);
        }
    }
}

TEST_CASE("label purity of mined positives") {
    PositiveSets sets;
    sets.anchors = {{{0, 1}, {1, 0.9}}, {{0, 1, 2}, {0.9, 1, 0.85}}, {{2}, {1}}};
    std::size_t pairs = 0;
    CHECK(positive_label_purity(sets, {0, 0, 1}, &pairs) == doctest::Approx(2.0 / 3.0));
    CHECK(pairs == 3);
}
