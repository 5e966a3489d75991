#include "emocap/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "emocap/error.hpp"
#include "emocap/random.hpp"

namespace emocap {

namespace {

using nlohmann::json;

const std::vector<std::string> kEmotionNames = {"happiness", "sadness",  "anger",    "fear",
                                                "surprise",  "disgust",  "contempt", "neutrality"};

const std::vector<std::string> kRegions = {"brows", "eyes", "cheeks", "mouth", "jaw", "forehead", "nose", "chin"};

const std::vector<std::string> kShared = {"slightly", "clearly", "rather", "visibly", "gently", "markedly"};

// Fixed template words; listed so generated words never reuse their buckets.
const std::vector<std::string> kTemplate = {"a",    "photo", "of",   "face",  "with", "an",     "expression",
                                            "the",  "shows", "look", "looks", "and",  "overall", "is",
                                            "region"};

const std::vector<std::string> kSyllables = {"ka", "lo", "mi", "ve", "tu", "ra", "no", "si", "pe", "do",
                                             "zu", "fa", "ri", "mo", "ge", "ba", "ly", "xe", "wa", "qi"};

std::uint64_t tag(const char* text) { return fnv1a64(text); }

class WordMaker {
public:
    WordMaker(std::uint64_t seed, std::size_t vocab) : rng_(seed), vocab_(vocab) {}

    bool reserve(const std::string& word) {
        const auto bucket = fnv1a64(word) % vocab_;
        if (words_.count(word) || buckets_.count(bucket)) return false;
        words_.insert(word);
        buckets_.insert(bucket);
        return true;
    }

    std::string fresh() {
        for (int attempt = 0; attempt < 100000; ++attempt) {
            std::string w;
            const std::size_t syl = 2 + rng_.below(2);
            for (std::size_t s = 0; s < syl; ++s) w += kSyllables[rng_.below(kSyllables.size())];
            if (reserve(w)) return w;
        }
        throw Error(ErrorKind::SpecInvalid, "vocabulary too small for the requested word pools");
    }

private:
    Rng rng_;
    std::size_t vocab_;
    std::set<std::string> words_;
    std::set<std::uint64_t> buckets_;
};

std::string pick(const std::vector<std::string>& pool, Rng& rng) { return pool[rng.below(pool.size())]; }

// Random unit directions in raw-feature space, one per pool word.
std::vector<std::vector<double>> word_directions(std::size_t count, std::size_t features, Rng& rng) {
    std::vector<std::vector<double>> dirs(count, std::vector<double>(features));
    for (auto& d : dirs) {
        double sq = 0.0;
        for (auto& x : d) {
            x = rng.normal();
            sq += x * x;
        }
        for (auto& x : d) x /= std::sqrt(sq);
    }
    return dirs;
}

// Pool words ranked by how strongly `deviation` points along their direction.
std::vector<std::string> describe(const std::vector<std::string>& pool, const std::vector<std::vector<double>>& dirs,
                                  std::span<const double> deviation, std::size_t count) {
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t w = 0; w < pool.size(); ++w) scored.emplace_back(-dot(dirs[w], deviation), w);
    std::sort(scored.begin(), scored.end());
    std::vector<std::string> out;
    for (std::size_t k = 0; k < count; ++k) out.push_back(pool[scored[k % scored.size()].second]);
    return out;
}

struct Directions {
    std::vector<std::vector<std::vector<double>>> class_words;            // [c][w]
    std::vector<std::vector<std::vector<std::vector<double>>>> cue_words; // [c][q][w]
};

StructuredCaption compose_caption(const VocabularyPools& pools, const Directions& dirs, std::size_t c,
                                  const DenseArray& noise, const SynthSpec& spec, Rng& rng) {
    const std::size_t patches = noise.rows();
    std::vector<double> mean(noise.cols(), 0.0);
    for (std::size_t q = 0; q < patches; ++q)
        for (std::size_t f = 0; f < noise.cols(); ++f) mean[f] += noise.at(q, f) / static_cast<double>(patches);

    const auto cw = describe(pools.class_words[c], dirs.class_words[c], mean, 3);
    StructuredCaption cap;
    cap.global_sentence = "A " + pick(pools.shared_words, rng) + " " + cw[0] + " face, " + cw[1] + " and " + cw[2] + ".";
    const std::size_t span = spec.locals_max - spec.locals_min + 1;
    const std::size_t count = std::min(patches, spec.locals_min + rng.below(span));
    auto cues = rng.sample_without_replacement(patches, count);
    std::sort(cues.begin(), cues.end());
    for (auto q : cues) {
        const auto qw = describe(pools.cue_words[c][q], dirs.cue_words[c][q], noise.row(q), 2);
        cap.local_sentences.push_back("The " + pools.cue_regions[q] + ": " + qw[0] + ", " + qw[1] + ".");
    }
    cap.summary_sentence = "An expression of " + pools.class_names[c] + ": " + cw[0] + ", " + cw[1] + ", " + cw[2] + ".";
    return cap;
}

} // namespace

void validate_spec(const SynthSpec& s) {
    auto bad = [](const std::string& msg) { throw Error(ErrorKind::SpecInvalid, msg); };
    if (s.classes < 2) bad("classes must be at least 2");
    if (s.per_class < 1) bad("per_class must be at least 1");
    if (s.patches < 1 || s.features < 1) bad("patches and features must be at least 1");
    if (!(s.noise_sigma >= 0.0) || !std::isfinite(s.noise_sigma)) bad("noise_sigma must be finite and >= 0");
    if (s.locals_min < 1 || s.locals_max < s.locals_min) bad("locals range must satisfy 1 <= min <= max");
    if (s.locals_min > s.patches) bad("locals_min cannot exceed the number of patches (one cue per patch)");
    if (s.class_pool_words < 1 || s.cue_pool_words < 1) bad("word pools must be non-empty");
    if (s.vocab_size < 2) bad("vocab_size must be at least 2");
}

nlohmann::ordered_json spec_to_json(const SynthSpec& s) {
    nlohmann::ordered_json j;
    j["classes"] = s.classes;
    j["per_class"] = s.per_class;
    j["patches"] = s.patches;
    j["features"] = s.features;
    j["noise_sigma"] = s.noise_sigma;
    j["locals_min"] = s.locals_min;
    j["locals_max"] = s.locals_max;
    j["class_pool_words"] = s.class_pool_words;
    j["cue_pool_words"] = s.cue_pool_words;
    j["vocab_size"] = s.vocab_size;
    j["frames_per_group"] = s.frames_per_group;
    j["shuffled_pairs"] = s.shuffled_pairs;
    j["seed"] = s.seed;
    return j;
}

SynthSpec spec_from_json(const json& doc, SynthSpec s) {
    if (!doc.is_object()) throw Error(ErrorKind::ConfigInvalid, "data spec must be a JSON object");
    try {
        for (const auto& [key, v] : doc.items()) {
            if (key == "classes") s.classes = v.get<std::size_t>();
            else if (key == "per_class") s.per_class = v.get<std::size_t>();
            else if (key == "patches") s.patches = v.get<std::size_t>();
            else if (key == "features") s.features = v.get<std::size_t>();
            else if (key == "noise_sigma") s.noise_sigma = v.get<double>();
            else if (key == "locals_min") s.locals_min = v.get<std::size_t>();
            else if (key == "locals_max") s.locals_max = v.get<std::size_t>();
            else if (key == "class_pool_words") s.class_pool_words = v.get<std::size_t>();
            else if (key == "cue_pool_words") s.cue_pool_words = v.get<std::size_t>();
            else if (key == "vocab_size") s.vocab_size = v.get<std::size_t>();
            else if (key == "frames_per_group") s.frames_per_group = v.get<std::size_t>();
            else if (key == "shuffled_pairs") s.shuffled_pairs = v.get<bool>();
            else if (key == "seed") s.seed = v.get<std::uint64_t>();
            else throw Error(ErrorKind::ConfigInvalid, "unknown data spec key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::ConfigInvalid, std::string("bad data spec value: ") + e.what());
    }
    return s;
}

std::vector<std::string> synth_class_names(std::size_t classes) {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < classes; ++c)
        names.push_back(c < kEmotionNames.size() ? kEmotionNames[c] : "emotion" + std::to_string(c + 1));
    return names;
}

VocabularyPools build_pools(const SynthSpec& spec) {
    validate_spec(spec);
    VocabularyPools pools;
    WordMaker maker(derive_seed(spec.seed, tag("vocabulary")), spec.vocab_size);
    auto must_reserve = [&](const std::string& w) {
        if (!maker.reserve(w)) throw Error(ErrorKind::SpecInvalid, "vocabulary bucket collision on '" + w + "'");
    };
    for (const auto& w : kTemplate) must_reserve(w);
    pools.class_names = synth_class_names(spec.classes);
    for (const auto& w : pools.class_names) must_reserve(w);
    pools.shared_words = kShared;
    for (const auto& w : pools.shared_words) must_reserve(w);
    for (std::size_t q = 0; q < spec.patches; ++q) {
        pools.cue_regions.push_back(q < kRegions.size() ? kRegions[q] : "area" + std::to_string(q + 1));
        must_reserve(pools.cue_regions.back());
    }
    pools.class_words.resize(spec.classes);
    pools.cue_words.assign(spec.classes, std::vector<std::vector<std::string>>(spec.patches));
    for (std::size_t c = 0; c < spec.classes; ++c) {
        for (std::size_t k = 0; k < spec.class_pool_words; ++k) pools.class_words[c].push_back(maker.fresh());
        for (std::size_t q = 0; q < spec.patches; ++q)
            for (std::size_t k = 0; k < spec.cue_pool_words; ++k) pools.cue_words[c][q].push_back(maker.fresh());
    }
    return pools;
}

Dataset generate_dataset(const SynthSpec& spec) {
    const auto pools = build_pools(spec);
    const std::size_t p = spec.patches, f = spec.features;

    Rng proto_rng(derive_seed(spec.seed, tag("prototypes")));
    std::vector<DenseArray> prototypes;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        DenseArray proto({p, f});
        for (auto& x : proto.storage()) x = proto_rng.normal();
        prototypes.push_back(std::move(proto));
    }

    Rng dir_rng(derive_seed(spec.seed, tag("word-directions")));
    Directions dirs;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        dirs.class_words.push_back(word_directions(spec.class_pool_words, f, dir_rng));
        dirs.cue_words.emplace_back();
        for (std::size_t q = 0; q < p; ++q) dirs.cue_words[c].push_back(word_directions(spec.cue_pool_words, f, dir_rng));
    }

    Dataset records;
    records.reserve(spec.classes * spec.per_class);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        for (std::size_t k = 0; k < spec.per_class; ++k) {
            Rng rng(derive_seed(spec.seed, derive_seed(tag("record"), c * spec.per_class + k)));
            DatasetRecord r;
            r.id = "c" + std::to_string(c) + "-" + std::to_string(k);
            r.label = c;
            DenseArray noise({p, f});
            for (auto& x : noise.storage()) x = spec.noise_sigma * rng.normal();
            r.raw_patches = prototypes[c];
            for (std::size_t k2 = 0; k2 < noise.size(); ++k2) r.raw_patches[k2] += noise[k2];
            r.caption = compose_caption(pools, dirs, c, noise, spec, rng);
            if (spec.frames_per_group > 0)
                r.frame_group = "clip-c" + std::to_string(c) + "-" + std::to_string(k / spec.frames_per_group);
            records.push_back(std::move(r));
        }
    }

    if (spec.shuffled_pairs) {
        std::vector<std::size_t> perm(records.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        Rng rng(derive_seed(spec.seed, tag("shuffled-pairs")));
        rng.shuffle(perm);
        std::vector<StructuredCaption> captions;
        for (auto i : perm) captions.push_back(records[i].caption);
        for (std::size_t i = 0; i < records.size(); ++i) records[i].caption = std::move(captions[i]);
    }
    return records;
}

std::string record_to_json_line(const DatasetRecord& r) {
    json patches = json::array();
    for (std::size_t q = 0; q < r.raw_patches.rows(); ++q) {
        auto row = r.raw_patches.row(q);
        patches.push_back(std::vector<double>(row.begin(), row.end()));
    }
    json j = {{"id", r.id},
              {"label", r.label},
              {"patches", patches},
              {"caption",
               {{"global", r.caption.global_sentence},
                {"local", r.caption.local_sentences},
                {"summary", r.caption.summary_sentence}}}};
    if (r.frame_group) j["frame_group"] = *r.frame_group;
    return j.dump();
}

DatasetRecord record_from_json_line(const std::string& line, std::size_t line_number) {
    auto fail = [&](const std::string& msg) -> DatasetRecord {
        throw Error(ErrorKind::ParseError, msg, line_number);
    };
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        return fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) return fail("record must be a JSON object");
    DatasetRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        const auto label = j.at("label").get<long long>();
        if (label < 0) return fail("label must be non-negative");
        r.label = static_cast<std::size_t>(label);
        const auto& patches = j.at("patches");
        if (!patches.is_array() || patches.empty()) return fail("patches must be a non-empty array");
        const std::size_t p = patches.size();
        const std::size_t f = patches[0].size();
        if (f == 0) return fail("patch rows must be non-empty");
        r.raw_patches = DenseArray({p, f});
        for (std::size_t q = 0; q < p; ++q) {
            if (!patches[q].is_array() || patches[q].size() != f)
                throw Error(ErrorKind::InconsistentShape, "patch rows differ in length", line_number);
            for (std::size_t c = 0; c < f; ++c) r.raw_patches.at(q, c) = patches[q][c].get<double>();
        }
        if (!r.raw_patches.all_finite()) return fail("patches contain non-finite values");
        const auto& cap = j.at("caption");
        r.caption.global_sentence = cap.at("global").get<std::string>();
        r.caption.local_sentences = cap.at("local").get<std::vector<std::string>>();
        r.caption.summary_sentence = cap.at("summary").get<std::string>();
        if (j.contains("frame_group") && !j["frame_group"].is_null())
            r.frame_group = j["frame_group"].get<std::string>();
    } catch (const json::exception& e) {
        return fail(std::string("malformed record: ") + e.what());
    }
    try {
        validate_caption(r.caption);
    } catch (const Error& e) {
        return fail(std::string("malformed caption: ") + e.what());
    }
    return r;
}

void save_dataset(const std::filesystem::path& path, const Dataset& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
    for (const auto& r : records) out << record_to_json_line(r) << '\n';
    if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
    Dataset records;
    std::string line;
    std::size_t line_number = 0;
    Shape shape;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto r = record_from_json_line(line, line_number);
        if (records.empty())
            shape = r.raw_patches.shape();
        else if (r.raw_patches.shape() != shape)
            throw Error(ErrorKind::InconsistentShape,
                        "patches " + shape_string(r.raw_patches.shape()) + " but earlier records are " +
                            shape_string(shape),
                        line_number);
        records.push_back(std::move(r));
    }
    if (records.empty()) throw Error(ErrorKind::EmptyDataset, path.string() + " contains no records");
    return records;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& records, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw Error(ErrorKind::ConfigInvalid, "holdout fraction must be in [0, 1)");
    std::size_t classes = 0;
    for (const auto& r : records) classes = std::max(classes, r.label + 1);
    std::vector<std::vector<std::size_t>> by_class(classes);
    for (std::size_t i = 0; i < records.size(); ++i) by_class[records[i].label].push_back(i);
    std::vector<bool> held(records.size(), false);
    Rng rng(derive_seed(seed, tag("holdout")));
    for (auto& idx : by_class) {
        const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
        for (auto k : rng.sample_without_replacement(idx.size(), take)) held[idx[k]] = true;
    }
    std::pair<Dataset, Dataset> parts;
    for (std::size_t i = 0; i < records.size(); ++i) (held[i] ? parts.second : parts.first).push_back(records[i]);
    return parts;
}

std::vector<std::vector<std::size_t>> frame_groups(const Dataset& records) {
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& g = records[i].frame_group;
        if (g && !groups.empty() && records[groups.back().front()].frame_group == g)
            groups.back().push_back(i);
        else
            groups.push_back({i});
    }
    return groups;
}

std::vector<std::size_t> labels_of(const Dataset& records) {
    std::vector<std::size_t> labels;
    labels.reserve(records.size());
    for (const auto& r : records) labels.push_back(r.label);
    return labels;
}

} // namespace emocap
