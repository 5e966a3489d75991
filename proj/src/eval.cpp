#include "emocap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "emocap/error.hpp"
#include "emocap/random.hpp"

namespace emocap {

namespace {

std::size_t infer_classes(const std::vector<std::size_t>& labels) {
    std::size_t c = 0;
    for (auto l : labels) c = std::max(c, l + 1);
    return c;
}

} // namespace

ClassPromptSet build_prompts(const std::vector<std::string>& class_names, const TextEncoderParams& params,
                             std::size_t vocab_size, const std::string& prompt_template) {
    if (class_names.size() < 2) throw Error(ErrorKind::ConfigInvalid, "zero-shot needs at least two classes");
    const auto at = prompt_template.find(kClassPlaceholder);
    if (at == std::string::npos || prompt_template.find(kClassPlaceholder, at + 1) != std::string::npos)
        throw Error(ErrorKind::ConfigInvalid, "prompt template must contain exactly one " + kClassPlaceholder);
    ClassPromptSet set;
    set.class_names = class_names;
    set.prompt_template = prompt_template;
    std::vector<TokenSequence> seqs;
    for (const auto& name : class_names) {
        std::string prompt = prompt_template;
        prompt.replace(at, kClassPlaceholder.size(), name);
        seqs.push_back(tokenize(prompt, vocab_size));
    }
    set.embeddings = encode_texts(seqs, params);
    return set;
}

std::size_t argmax_lowest(std::span<const double> scores) {
    if (scores.empty()) throw Error(ErrorKind::ShapeMismatch, "argmax of an empty score list");
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c)
        if (scores[c] > scores[best]) best = c;
    return best;
}

std::vector<double> zero_shot_scores(std::span<const double> image_embedding, const DenseArray& class_embeddings) {
    if (class_embeddings.cols() != image_embedding.size())
        throw Error(ErrorKind::ShapeMismatch, "embedding width differs from class embeddings");
    std::vector<double> scores(class_embeddings.rows());
    for (std::size_t c = 0; c < scores.size(); ++c) scores[c] = dot(image_embedding, class_embeddings.row(c));
    return scores;
}

std::size_t zero_shot_classify(std::span<const double> image_embedding, const DenseArray& class_embeddings) {
    return argmax_lowest(zero_shot_scores(image_embedding, class_embeddings));
}

std::size_t zero_shot_classify(std::span<const double> image_embedding, const ClassPromptSet& prompts) {
    return zero_shot_classify(image_embedding, prompts.embeddings);
}

std::size_t video_zero_shot(const DenseArray& frames, const DenseArray& class_embeddings) {
    if (frames.rows() == 0 || frames.empty()) throw Error(ErrorKind::EmptyVideo, "video has no frames");
    DenseArray mean({1, frames.cols()});
    for (std::size_t r = 0; r < frames.rows(); ++r)
        for (std::size_t c = 0; c < frames.cols(); ++c) mean.at(0, c) += frames.at(r, c);
    for (auto& x : mean.storage()) x /= static_cast<double>(frames.rows());
    return zero_shot_classify(l2_normalize_rows(mean).row(0), class_embeddings);
}

std::size_t video_zero_shot(const DenseArray& frames, const ClassPromptSet& prompts) {
    return video_zero_shot(frames, prompts.embeddings);
}

std::vector<std::size_t> sample_clip_frames(const std::vector<std::size_t>& clip, std::size_t frames) {
    if (frames == 0 || clip.size() <= frames) return clip;
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < frames; ++k) out.push_back(clip[k * clip.size() / frames]);
    return out;
}

MetricsReport compute_uar_war(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels,
                              std::size_t classes) {
    if (predictions.size() != labels.size())
        throw Error(ErrorKind::LengthMismatch, std::to_string(predictions.size()) + " predictions for " +
                                                   std::to_string(labels.size()) + " labels");
    if (labels.empty()) throw Error(ErrorKind::LengthMismatch, "no predictions to score");
    if (classes == 0) classes = std::max(infer_classes(labels), infer_classes(predictions));
    MetricsReport r;
    r.count = labels.size();
    r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    r.support.assign(classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes || predictions[i] >= classes)
            throw Error(ErrorKind::ShapeMismatch, "class index outside [0, " + std::to_string(classes) + ")");
        ++r.confusion[labels[i]][predictions[i]];
        ++r.support[labels[i]];
        if (labels[i] == predictions[i]) ++correct;
    }
    r.per_class_recall.assign(classes, 0.0);
    r.class_present.assign(classes, false);
    double recall_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        if (r.support[c] == 0) continue;
        r.class_present[c] = true;
        r.per_class_recall[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(r.support[c]);
        recall_sum += r.per_class_recall[c];
        ++present;
    }
    r.uar = recall_sum / static_cast<double>(present);
    r.war = static_cast<double>(correct) / static_cast<double>(r.count);
    return r;
}

std::vector<std::size_t> pair_ranks(const DenseArray& queries, const DenseArray& candidates) {
    if (queries.rows() != candidates.rows() || queries.cols() != candidates.cols())
        throw Error(ErrorKind::ShapeMismatch, "retrieval needs paired galleries of equal shape, got " +
                                                  shape_string(queries.shape()) + " and " +
                                                  shape_string(candidates.shape()));
    const auto sims = matmul(queries, transpose(candidates));
    const std::size_t n = queries.rows();
    std::vector<std::size_t> ranks(n);
    for (std::size_t q = 0; q < n; ++q) {
        const double target = sims.at(q, q);
        std::size_t ahead = 0;
        for (std::size_t c = 0; c < n; ++c) {
            const double s = sims.at(q, c);
            if (s > target || (s == target && c < q)) ++ahead;
        }
        ranks[q] = ahead;
    }
    return ranks;
}

std::map<std::string, std::map<std::size_t, double>> retrieval_eval(const DenseArray& image_embeddings,
                                                                    const DenseArray& text_embeddings,
                                                                    const std::vector<std::size_t>& ks) {
    std::map<std::string, std::map<std::size_t, double>> out;
    const auto i2t = pair_ranks(image_embeddings, text_embeddings);
    const auto t2i = pair_ranks(text_embeddings, image_embeddings);
    for (auto k : ks) {
        auto recall = [k](const std::vector<std::size_t>& ranks) {
            const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r < k; });
            return static_cast<double>(hits) / static_cast<double>(ranks.size());
        };
        out[kImageToText][k] = recall(i2t);
        out[kTextToImage][k] = recall(t2i);
    }
    return out;
}

ProbeModel fit_logistic_regression(const DenseArray& x, const std::vector<std::size_t>& labels, std::size_t classes,
                                   const ProbeConfig& config) {
    const std::size_t n = x.rows(), d = x.cols();
    if (labels.size() != n) throw Error(ErrorKind::LengthMismatch, "one label per feature row required");
    ProbeModel model;
    model.weights = DenseArray({d, classes});
    model.bias = DenseArray({1, classes});
    std::vector<double> probs(classes), gw(d * classes), gb(classes);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double mx = -INFINITY;
            for (std::size_t c = 0; c < classes; ++c) {
                double z = model.bias[c];
                for (std::size_t k = 0; k < d; ++k) z += x.at(i, k) * model.weights.at(k, c);
                probs[c] = z;
                mx = std::max(mx, z);
            }
            double total = 0.0;
            for (auto& p : probs) total += (p = std::exp(p - mx));
            for (std::size_t c = 0; c < classes; ++c) {
                const double delta = (probs[c] / total - (labels[i] == c ? 1.0 : 0.0)) * inv_n;
                gb[c] += delta;
                for (std::size_t k = 0; k < d; ++k) gw[k * classes + c] += delta * x.at(i, k);
            }
        }
        double sq = 0.0;
        for (std::size_t k = 0; k < d * classes; ++k) {
            gw[k] += config.l2 * model.weights[k];
            sq += gw[k] * gw[k];
        }
        for (auto g : gb) sq += g * g;
        model.gradient_norm = std::sqrt(sq);
        model.iterations = it;
        if (model.gradient_norm < config.tolerance) break;
        for (std::size_t k = 0; k < d * classes; ++k) model.weights[k] -= config.learning_rate * gw[k];
        for (std::size_t c = 0; c < classes; ++c) model.bias[c] -= config.learning_rate * gb[c];
        model.iterations = it + 1;
    }
    return model;
}

std::vector<std::size_t> predict_logistic(const ProbeModel& model, const DenseArray& x) {
    const auto logits = matmul(x, model.weights);
    std::vector<std::size_t> out(x.rows());
    std::vector<double> row(model.bias.size());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = logits.at(i, c) + model.bias[c];
        out[i] = argmax_lowest(row);
    }
    return out;
}

MetricsReport linear_probe(const DenseArray& train_embeddings, const std::vector<std::size_t>& train_labels,
                           const DenseArray& test_embeddings, const std::vector<std::size_t>& test_labels,
                           std::size_t shots, std::uint64_t seed, const ProbeConfig& config) {
    if (shots < 1) throw Error(ErrorKind::InsufficientShots, "shots must be at least 1");
    if (train_labels.size() != train_embeddings.rows() || test_labels.size() != test_embeddings.rows())
        throw Error(ErrorKind::LengthMismatch, "one label per embedding row required");
    const std::size_t classes = std::max(infer_classes(train_labels), infer_classes(test_labels));
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < train_labels.size(); ++i) by_class[train_labels[i]].push_back(i);
    Rng rng(derive_seed(seed, fnv1a64("probe-shots")));
    std::vector<std::size_t> chosen;
    for (std::size_t c = 0; c < classes; ++c) {
        if (by_class[c].size() < shots)
            throw Error(ErrorKind::InsufficientShots, "class " + std::to_string(c) + " has " +
                                                          std::to_string(by_class[c].size()) + " examples, " +
                                                          std::to_string(shots) + " shots requested");
        for (auto k : rng.sample_without_replacement(by_class[c].size(), shots)) chosen.push_back(by_class[c][k]);
    }
    const std::size_t d = train_embeddings.cols();
    DenseArray x({chosen.size(), d});
    std::vector<std::size_t> y;
    for (std::size_t r = 0; r < chosen.size(); ++r) {
        std::copy_n(train_embeddings.row(chosen[r]).begin(), d, x.row(r).begin());
        y.push_back(train_labels[chosen[r]]);
    }
    const auto model = fit_logistic_regression(x, y, classes, config);
    return compute_uar_war(predict_logistic(model, test_embeddings), test_labels, classes);
}

DenseArray embed_images(const ModelParams& params, const Dataset& dataset) {
    std::vector<DenseArray> raws;
    raws.reserve(dataset.size());
    for (const auto& r : dataset) raws.push_back(r.raw_patches);
    return encode_images(raws, params.image);
}

DenseArray embed_captions(const ModelParams& params, const Dataset& dataset, GlobalTextPolicy policy,
                          std::size_t vocab_size) {
    std::vector<TokenSequence> seqs;
    seqs.reserve(dataset.size());
    for (const auto& r : dataset) seqs.push_back(tokenize(select_global_text(r.caption, policy), vocab_size));
    return encode_texts(seqs, params.text);
}

MetricsReport zero_shot_eval(const DenseArray& image_embeddings, const Dataset& dataset,
                             const ClassPromptSet& prompts, bool video, std::size_t frames) {
    if (image_embeddings.rows() != dataset.size())
        throw Error(ErrorKind::LengthMismatch, "one image embedding per record required");
    std::vector<std::size_t> preds, labels;
    if (!video) {
        for (std::size_t i = 0; i < dataset.size(); ++i) {
            preds.push_back(zero_shot_classify(image_embeddings.row(i), prompts));
            labels.push_back(dataset[i].label);
        }
    } else {
        for (const auto& clip : frame_groups(dataset)) {
            const auto picked = sample_clip_frames(clip, frames);
            DenseArray stack({picked.size(), image_embeddings.cols()});
            for (std::size_t k = 0; k < picked.size(); ++k)
                std::copy_n(image_embeddings.row(picked[k]).begin(), stack.cols(), stack.row(k).begin());
            preds.push_back(video_zero_shot(stack, prompts));
            labels.push_back(dataset[clip.front()].label);
        }
    }
    return compute_uar_war(preds, labels, prompts.class_names.size());
}

double within_class_cosine(const DenseArray& embeddings, const std::vector<std::size_t>& labels) {
    if (labels.size() != embeddings.rows()) throw Error(ErrorKind::LengthMismatch, "one label per row required");
    const auto unit = l2_normalize_rows(embeddings);
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < labels.size(); ++a)
        for (std::size_t b = a + 1; b < labels.size(); ++b)
            if (labels[a] == labels[b]) {
                sum += dot(unit.row(a), unit.row(b));
                ++pairs;
            }
    return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

nlohmann::ordered_json report_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["uar"] = r.uar;
    j["war"] = r.war;
    auto recalls = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < r.per_class_recall.size(); ++c)
        recalls.push_back(r.class_present[c] ? nlohmann::ordered_json(r.per_class_recall[c])
                                             : nlohmann::ordered_json(nullptr));
    j["per_class_recall"] = recalls;
    j["support"] = r.support;
    j["confusion"] = r.confusion;
    j["count"] = r.count;
    auto rec = nlohmann::ordered_json::object();
    for (const auto& [direction, by_k] : r.recall_at) {
        auto inner = nlohmann::ordered_json::object();
        for (const auto& [k, v] : by_k) inner[std::to_string(k)] = v;
        rec[direction] = inner;
    }
    j["recall_at"] = rec;
    return j;
}

} // namespace emocap
