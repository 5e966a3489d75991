#pragma once

// Direct transcriptions of the loss formulas with explicit sums over indices.
// They share no code with the graph implementation beyond DenseArray storage.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "emocap/losses.hpp"

namespace emocap::oracle {

inline double cos_sim(const DenseArray& a, std::size_t ra, const DenseArray& b, std::size_t rb) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t k = 0; k < a.cols(); ++k) {
        ab += a.at(ra, k) * b.at(rb, k);
        aa += a.at(ra, k) * a.at(ra, k);
        bb += b.at(rb, k) * b.at(rb, k);
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}

inline bool realized(const EmbeddingBatch& b, std::size_t i, std::size_t j) {
    return b.local_counts.empty() || j < b.local_counts[i];
}

inline double global_loss(const EmbeddingBatch& b) {
    const auto n = b.n;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double den1 = 0, den2 = 0;
        for (std::size_t k = 0; k < n; ++k) {
            den1 += std::exp(cos_sim(b.image_global, i, b.text_global, k) / b.tau);
            den2 += std::exp(cos_sim(b.text_global, i, b.image_global, k) / b.tau);
        }
        const double num = std::exp(cos_sim(b.image_global, i, b.text_global, i) / b.tau);
        total += std::log(num / den1) + std::log(num / den2);
    }
    return -total / static_cast<double>(n);
}

// image anchor (i,j) vs texts (i,m); text anchor (i,j) vs pooled (i,m)
inline double intra_loss(const EmbeddingBatch& b) {
    const auto n = b.n, m = b.m;
    double total = 0;
    std::size_t terms = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            if (!realized(b, i, j)) continue;
            const auto a = i * m + j;
            double den1 = 0, den2 = 0;
            for (std::size_t q = 0; q < m; ++q) {
                if (!realized(b, i, q)) continue;
                den1 += std::exp(cos_sim(b.pooled_image, a, b.text_local, i * m + q) / b.tau);
                den2 += std::exp(cos_sim(b.text_local, a, b.pooled_image, i * m + q) / b.tau);
            }
            const double num = std::exp(cos_sim(b.pooled_image, a, b.text_local, a) / b.tau);
            total += std::log(num / den1) + std::log(num / den2);
            ++terms;
        }
    return -total / static_cast<double>(terms);
}

// text (i,j) fixed with pooled (n,j) varying; pooled (i,j) fixed with text (n,j) varying
inline double inter_loss(const EmbeddingBatch& b) {
    const auto n = b.n, m = b.m;
    double total = 0;
    std::size_t terms = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            if (!realized(b, i, j)) continue;
            const auto a = i * m + j;
            double den1 = 0, den2 = 0;
            for (std::size_t s = 0; s < n; ++s) {
                if (!realized(b, s, j)) continue;
                den1 += std::exp(cos_sim(b.pooled_image, s * m + j, b.text_local, a) / b.tau);
                den2 += std::exp(cos_sim(b.text_local, s * m + j, b.pooled_image, a) / b.tau);
            }
            const double num = std::exp(cos_sim(b.pooled_image, a, b.text_local, a) / b.tau);
            total += std::log(num / den1) + std::log(num / den2);
            ++terms;
        }
    return -total / static_cast<double>(terms);
}

struct Mined {
    std::vector<std::size_t> members;
    std::vector<double> weights;
};

// Brute force: threshold, then rank every candidate by similarity and keep
// those inside the first K ranks (self pinned to rank 0, ties by lower index).
inline Mined mine(const std::vector<double>& sims_to_anchor, std::size_t anchor, double sigma, std::size_t k) {
    const auto n = sims_to_anchor.size();
    std::vector<std::size_t> rank_order;
    rank_order.push_back(anchor);
    std::vector<std::size_t> others;
    for (std::size_t p = 0; p < n; ++p)
        if (p != anchor) others.push_back(p);
    // selection sort is enough here
    while (!others.empty()) {
        std::size_t best = 0;
        for (std::size_t q = 1; q < others.size(); ++q) {
            const double a = sims_to_anchor[others[q]], c = sims_to_anchor[others[best]];
            if (a > c || (a == c && others[q] < others[best])) best = q;
        }
        rank_order.push_back(others[best]);
        others.erase(others.begin() + static_cast<long>(best));
    }
    Mined out;
    for (std::size_t p = 0; p < n; ++p) {
        const auto pos = std::find(rank_order.begin(), rank_order.end(), p) - rank_order.begin();
        const double s = p == anchor ? 1.0 : sims_to_anchor[p];
        if (s > sigma && static_cast<std::size_t>(pos) < k) {
            out.members.push_back(p);
            out.weights.push_back(p == anchor ? 1.0 : std::min(s, 1.0));
        }
    }
    return out;
}

inline double global_loss_cmgpm(const EmbeddingBatch& b, double sigma, std::size_t k) {
    const auto n = b.n;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> st(n), si(n);
        for (std::size_t p = 0; p < n; ++p) {
            st[p] = cos_sim(b.text_global, i, b.text_global, p);
            si[p] = cos_sim(b.image_global, i, b.image_global, p);
        }
        const auto pt = mine(st, i, sigma, k);
        const auto pi = mine(si, i, sigma, k);
        double den1 = 0, den2 = 0;
        for (std::size_t s = 0; s < n; ++s) {
            den1 += std::exp(cos_sim(b.image_global, i, b.text_global, s) / b.tau);
            den2 += std::exp(cos_sim(b.text_global, i, b.image_global, s) / b.tau);
        }
        for (std::size_t q = 0; q < pt.members.size(); ++q)
            total += pt.weights[q] *
                     std::log(std::exp(cos_sim(b.image_global, i, b.text_global, pt.members[q]) / b.tau) / den1);
        for (std::size_t q = 0; q < pi.members.size(); ++q)
            total += pi.weights[q] *
                     std::log(std::exp(cos_sim(b.text_global, i, b.image_global, pi.members[q]) / b.tau) / den2);
    }
    return -total / static_cast<double>(n);
}

// Text anchor (i,j): positives among pooled (p,j) mined on pooled similarity.
// Pooled anchor (i,j): positives among text (p,j) mined on text similarity.
inline double inter_loss_cmgpm(const EmbeddingBatch& b, double sigma, std::size_t k) {
    const auto n = b.n, m = b.m;
    double total = 0;
    std::size_t terms = 0;
    for (std::size_t j = 0; j < m; ++j) {
        std::vector<std::size_t> live;
        for (std::size_t i = 0; i < n; ++i)
            if (realized(b, i, j)) live.push_back(i);
        for (std::size_t ai = 0; ai < live.size(); ++ai) {
            const auto i = live[ai];
            const auto a = i * m + j;
            std::vector<double> sp(live.size()), stx(live.size());
            for (std::size_t q = 0; q < live.size(); ++q) {
                sp[q] = cos_sim(b.pooled_image, a, b.pooled_image, live[q] * m + j);
                stx[q] = cos_sim(b.text_local, a, b.text_local, live[q] * m + j);
            }
            const auto pos_img = mine(sp, ai, sigma, k);
            const auto pos_txt = mine(stx, ai, sigma, k);
            double den1 = 0, den2 = 0;
            for (auto s : live) {
                den1 += std::exp(cos_sim(b.pooled_image, s * m + j, b.text_local, a) / b.tau);
                den2 += std::exp(cos_sim(b.text_local, s * m + j, b.pooled_image, a) / b.tau);
            }
            for (std::size_t q = 0; q < pos_img.members.size(); ++q) {
                const auto p = live[pos_img.members[q]] * m + j;
                total += pos_img.weights[q] * std::log(std::exp(cos_sim(b.pooled_image, p, b.text_local, a) / b.tau) / den1);
            }
            for (std::size_t q = 0; q < pos_txt.members.size(); ++q) {
                const auto p = live[pos_txt.members[q]] * m + j;
                total += pos_txt.weights[q] * std::log(std::exp(cos_sim(b.text_local, p, b.pooled_image, a) / b.tau) / den2);
            }
            ++terms;
        }
    }
    return -total / static_cast<double>(terms);
}

} // namespace emocap::oracle
