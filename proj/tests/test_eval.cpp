#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "emocap/eval.hpp"
#include "test_support.hpp"

using namespace emocap;
using emocap::testing::random_unit_rows;

namespace {

std::vector<double> basis(std::size_t d, std::size_t k, double scale = 1.0) {
    std::vector<double> v(d, 0.0);
    v[k] = scale;
    return v;
}

DenseArray rows(std::initializer_list<std::vector<double>> list) {
    std::vector<double> data;
    std::size_t cols = 0;
    for (const auto& r : list) {
        data.insert(data.end(), r.begin(), r.end());
        cols = r.size();
    }
    return DenseArray({list.size(), cols}, std::move(data));
}

double brute_recall(const DenseArray& q, const DenseArray& c, std::size_t k) {
    // Independent ranking: sort candidate indices by (similarity desc, index asc).
    std::size_t hits = 0;
    for (std::size_t i = 0; i < q.rows(); ++i) {
        std::vector<std::size_t> order(c.rows());
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return dot(q.row(i), c.row(a)) > dot(q.row(i), c.row(b)); });
        auto pos = std::find(order.begin(), order.end(), i) - order.begin();
        if (static_cast<std::size_t>(pos) < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(q.rows());
}

} // namespace

TEST_CASE("zero-shot classification") {
    auto classes = DenseArray::identity(4);
    CHECK(zero_shot_classify(basis(4, 2), classes) == 2);
    SUBCASE("ties go to the lowest class") {
        auto tied = rows({{1, 0}, {0, 1}, {0, 1}, {1, 0}});
        CHECK(zero_shot_classify(std::vector<double>{1, 0}, tied) == 0);
        CHECK(zero_shot_classify(std::vector<double>{0, 1}, tied) == 1);
    }
    SUBCASE("property: invariant to positive scaling of similarities") {
        Rng rng(3);
        auto cls = random_unit_rows(6, 8, rng);
        for (int t = 0; t < 100; ++t) {
            auto img = random_unit_rows(1, 8, rng);
            auto scores = zero_shot_scores(img.row(0), cls);
            const auto base = argmax_lowest(scores);
            CHECK(zero_shot_classify(img.row(0), cls) == base);
            for (double inv_tau : {0.5, 1.0 / 0.07, 100.0}) {
                auto scaled = scores;
                for (auto& s : scaled) s *= inv_tau;
                CHECK(argmax_lowest(scaled) == base);
            }
        }
    }
}

TEST_CASE("class prompts") {
    auto params = init_model(ModelDims{2, 4, 8, 64, 6}, 3);
    auto set = build_prompts({"joy", "anger", "fear"}, params.text, 64);
    CHECK(set.embeddings.rows() == 3);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(norm(set.embeddings.row(c)) - 1.0) < 1e-9);
    auto direct = encode_text(tokenize("a photo of a face with an expression of anger.", 64), params.text);
    for (std::size_t k = 0; k < 8; ++k) CHECK(set.embeddings.at(1, k) == direct[k]);
    CHECK_THROWS_AS(build_prompts({"joy"}, params.text, 64), Error);
    CHECK_THROWS_AS(build_prompts({"joy", "fear"}, params.text, 64, "no placeholder"), Error);
    CHECK_THROWS_AS(build_prompts({"joy", "fear"}, params.text, 64, "{CLASS} or {CLASS}"), Error);
}

TEST_CASE("video pooling") {
    auto classes = DenseArray::identity(3);
    SUBCASE("identical frames match single-frame classification") {
        Rng rng(8);
        for (int t = 0; t < 20; ++t) {
            auto f = random_unit_rows(1, 3, rng);
            auto clip = vstack(std::vector<DenseArray>{f, f, f, f});
            CHECK(video_zero_shot(clip, classes) == zero_shot_classify(f.row(0), classes));
        }
    }
    SUBCASE("opposite frames cancel") {
        auto clip = rows({{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}});
        CHECK(video_zero_shot(clip, classes) == 1);
        auto permuted = rows({{0, 1, 0}, {-1, 0, 0}, {1, 0, 0}});
        CHECK(video_zero_shot(permuted, classes) == 1);
    }
    SUBCASE("empty clip") {
        try {
            video_zero_shot(DenseArray(), classes);
            FAIL("expected EmptyVideo");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::EmptyVideo);
        }
    }
    SUBCASE("frame subsampling") {
        std::vector<std::size_t> clip(40);
        for (std::size_t i = 0; i < 40; ++i) clip[i] = 100 + i;
        auto picked = sample_clip_frames(clip, 16);
        CHECK(picked.size() == 16);
        CHECK(picked.front() == 100);
        CHECK(std::is_sorted(picked.begin(), picked.end()));
        CHECK(sample_clip_frames({1, 2, 3}, 16) == std::vector<std::size_t>{1, 2, 3});
    }
}

TEST_CASE("UAR and WAR") {
    auto r = compute_uar_war({0, 1, 1}, {0, 0, 1});
    CHECK(r.uar == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(r.war == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(r.confusion == std::vector<std::vector<std::size_t>>{{1, 1}, {0, 1}});

    auto perfect = compute_uar_war({2, 0, 1}, {2, 0, 1});
    CHECK(perfect.uar == 1.0);
    CHECK(perfect.war == 1.0);

    SUBCASE("absent classes are excluded from UAR") {
        auto m = compute_uar_war({0, 2, 2}, {0, 0, 2}, 4);
        CHECK(m.class_present == std::vector<bool>{true, false, true, false});
        CHECK(m.uar == doctest::Approx(0.75));
        auto j = report_to_json(m);
        CHECK(j["per_class_recall"][1].is_null());
        CHECK(j["confusion"][0][2] == 1);
    }
    SUBCASE("length mismatch") {
        try {
            compute_uar_war({0, 1}, {0});
            FAIL("expected LengthMismatch");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::LengthMismatch);
        }
    }
    SUBCASE("property: balanced supports give UAR == WAR; confusion sums to count") {
        Rng rng(11);
        for (int t = 0; t < 50; ++t) {
            std::vector<std::size_t> labels, preds;
            for (std::size_t c = 0; c < 5; ++c)
                for (int k = 0; k < 7; ++k) {
                    labels.push_back(c);
                    preds.push_back(rng.below(5));
                }
            auto m = compute_uar_war(preds, labels, 5);
            CHECK(std::abs(m.uar - m.war) < 1e-12);
            std::size_t total = 0;
            for (std::size_t c = 0; c < 5; ++c) {
                std::size_t row = 0;
                for (auto x : m.confusion[c]) row += x;
                CHECK(row == m.support[c]);
                total += row;
            }
            CHECK(total == labels.size());
            CHECK(m.uar >= 0.0);
            CHECK(m.war <= 1.0);
        }
    }
}

TEST_CASE("retrieval recall@K") {
    SUBCASE("identity pairing") {
        auto e = DenseArray::identity(5);
        auto r = retrieval_eval(e, e, {1});
        CHECK(r[kImageToText][1] == 1.0);
        CHECK(r[kTextToImage][1] == 1.0);
    }
    SUBCASE("reversed pairs are never first but always within the gallery") {
        auto img = DenseArray::identity(4);
        auto txt = rows({{0, 0, 0, 1}, {0, 0, 1, 0}, {0, 1, 0, 0}, {1, 0, 0, 0}});
        auto r = retrieval_eval(img, txt, {1, 4});
        CHECK(r[kImageToText][1] == 0.0);
        CHECK(r[kImageToText][4] == 1.0);
    }
    SUBCASE("one swapped pair among four") {
        auto img = DenseArray::identity(4);
        auto txt = rows({{0, 1, 0, 0}, {1, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
        auto r = retrieval_eval(img, txt, {1, 2});
        CHECK(r[kImageToText][1] == 0.5);
        CHECK(r[kImageToText][2] == 1.0);
        CHECK(r[kTextToImage][1] == 0.5);
    }
    SUBCASE("ties rank the lower index first") {
        auto img = rows({{1, 0}, {1, 0}});
        auto r = retrieval_eval(img, img, {1});
        CHECK(r[kImageToText][1] == 0.5);
        CHECK(pair_ranks(img, img) == std::vector<std::size_t>{0, 1});
    }
    SUBCASE("property: matches brute-force ranking, monotone in K, 1 at K = N") {
        Rng rng(2);
        for (int t = 0; t < 20; ++t) {
            auto a = random_unit_rows(9, 4, rng), b = random_unit_rows(9, 4, rng);
            auto r = retrieval_eval(a, b, {1, 2, 3, 5, 9});
            double prev = 0.0;
            for (std::size_t k : {1, 2, 3, 5, 9}) {
                CHECK(r[kImageToText][k] == doctest::Approx(brute_recall(a, b, k)));
                CHECK(r[kTextToImage][k] == doctest::Approx(brute_recall(b, a, k)));
                CHECK(r[kImageToText][k] >= prev);
                prev = r[kImageToText][k];
            }
            CHECK(r[kImageToText][9] == 1.0);
        }
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(retrieval_eval(DenseArray::identity(3), DenseArray::identity(4), {1}), Error);
    }
}

TEST_CASE("linear probe") {
    // Two classes separated along the first axis by construction.
    Rng rng(5);
    DenseArray train({40, 3}), test({20, 3});
    std::vector<std::size_t> ytr, yte;
    auto fill = [&](DenseArray& x, std::vector<std::size_t>& y) {
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const std::size_t c = i % 2;
            x.at(i, 0) = (c ? 1.0 : -1.0) * (0.5 + rng.uniform());
            x.at(i, 1) = rng.uniform(-1, 1);
            x.at(i, 2) = rng.uniform(-1, 1);
            y.push_back(c);
        }
    };
    fill(train, ytr);
    fill(test, yte);
    auto r = linear_probe(train, ytr, test, yte, 4, 9);
    CHECK(r.war == 1.0);
    auto again = linear_probe(train, ytr, test, yte, 4, 9);
    CHECK(report_to_json(again).dump() == report_to_json(r).dump());
    try {
        linear_probe(train, ytr, test, yte, 21, 9);
        FAIL("expected InsufficientShots");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InsufficientShots);
    }

    SUBCASE("gradient descent reaches the stopping tolerance") {
        auto model = fit_logistic_regression(train, ytr, 2);
        CHECK((model.gradient_norm < 1e-5 || model.iterations == 10000));
        CHECK(model.iterations > 0);
        auto preds = predict_logistic(model, train);
        CHECK(compute_uar_war(preds, ytr).war == 1.0);
    }
}

TEST_CASE("dataset-level zero-shot: video mode with singleton groups equals image mode") {
    SynthSpec spec;
    spec.classes = 3;
    spec.per_class = 4;
    auto data = generate_dataset(spec);
    auto params = init_model(ModelDims{}, 2);
    auto prompts = build_prompts(synth_class_names(3), params.text);
    auto emb = embed_images(params, data);
    auto image = zero_shot_eval(emb, data, prompts, false);
    auto video = zero_shot_eval(emb, data, prompts, true);
    CHECK(report_to_json(image).dump() == report_to_json(video).dump());

    spec.frames_per_group = 2;
    auto grouped = generate_dataset(spec);
    auto clips = zero_shot_eval(embed_images(params, grouped), grouped, prompts, true);
    CHECK(clips.count == 6);
}

TEST_CASE("within-class cosine") {
    auto e = rows({{1, 0}, {1, 0}, {0, 1}, {0, 2}});
    CHECK(within_class_cosine(e, {0, 0, 1, 1}) == doctest::Approx(1.0));
    CHECK(within_class_cosine(e, {0, 1, 0, 1}) == doctest::Approx(0.0));
}
