#include "emocap/trainer.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "emocap/error.hpp"
#include "emocap/random.hpp"

namespace emocap {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

const std::string kRawPatches = "batch.raw_patches";

struct TokenizedRecord {
    TokenSequence global;
    std::vector<TokenSequence> locals;
};

std::vector<TokenizedRecord> tokenize_dataset(const Dataset& dataset, const TrainConfig& config) {
    std::vector<TokenizedRecord> out;
    out.reserve(dataset.size());
    for (const auto& r : dataset) {
        TokenizedRecord t;
        t.global = tokenize(select_global_text(r.caption, config.global_text), config.dims.vocab);
        for (const auto& s : r.caption.local_sentences) t.locals.push_back(tokenize(s, config.dims.vocab));
        out.push_back(std::move(t));
    }
    return out;
}

struct BatchPlan {
    std::vector<std::size_t> samples;
    std::vector<std::vector<std::size_t>> slots; // chosen local sentence indices per sample
};

struct StepResult {
    LossValues loss;
    double tau = 0.0;
    double mean_global_set_size = 1.0;
    double mean_local_set_size = 1.0;
    std::size_t positive_pairs = 0;
    std::size_t pure_pairs = 0;
    std::size_t local_pairs = 0;
    std::size_t local_pure_pairs = 0;
    Gradients grads;
};

std::vector<std::string> param_names(const ModelParams& params) {
    std::vector<std::string> names;
    for (const auto& [name, _] : params.named()) names.push_back(name);
    return names;
}

StepResult run_batch(const ModelParams& params, const Dataset& dataset, const std::vector<TokenizedRecord>& tokens,
                     const BatchPlan& plan, const TrainConfig& config, std::size_t epoch, bool want_grads) {
    const std::size_t n = plan.samples.size(), m = config.locals;
    const std::size_t p = config.dims.patches, f = config.dims.raw_features, d = config.dims.embed;

    DenseArray raw({n * p, f});
    std::vector<TokenSequence> globals, locals;
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = plan.samples[i];
        const auto& patches = dataset[s].raw_patches;
        std::copy(patches.storage().begin(), patches.storage().end(), raw.storage().begin() + i * p * f);
        globals.push_back(tokens[s].global);
        for (std::size_t j = 0; j < m; ++j)
            locals.push_back(j < plan.slots[i].size() ? tokens[s].locals[plan.slots[i][j]]
                                                      : TokenSequence{{}, config.dims.vocab});
        counts.push_back(plan.slots[i].size());
    }

    ValueGraph g(config.precision);
    const auto pn = add_param_leaves(g);
    const auto raw_node = g.input(kRawPatches);
    BatchNodes nodes;
    nodes.n = n;
    nodes.m = m;
    nodes.local_counts = counts;
    nodes.image_global = image_global_node(g, raw_node, n, p, pn.global_projection);
    const auto patch_emb = image_patch_node(g, raw_node, pn.patch_projection);
    nodes.text_global = text_node(g, globals, pn.embedding_table, pn.output_projection);
    nodes.text_local = text_node(g, locals, pn.embedding_table, pn.output_projection);
    nodes.pooled_image =
        cross_attention_node(g, nodes.text_local, patch_emb, n, m, p, d, pn.w_query, pn.w_key, pn.w_value);
    nodes.tau = temperature_node(g, pn.temperature_logit);

    const auto schedule = config.schedule();
    const bool active = cmgpm_active(epoch, schedule);
    const auto terms = build_overall_loss(g, nodes, schedule.alpha, active);

    Bindings bindings;
    bind_params(bindings, params);
    bindings[kRawPatches] = std::move(raw);
    Evaluation ev(g, std::move(bindings));

    EmbeddingBatch values;
    values.n = n;
    values.m = m;
    values.image_global = ev.value(nodes.image_global);
    values.text_global = ev.value(nodes.text_global);
    values.text_local = ev.value(nodes.text_local);
    values.pooled_image = ev.value(nodes.pooled_image);
    values.local_counts = counts;
    values.tau = ev.value(nodes.tau)[0];
    const auto weights = mine_batch(values, config.mining());
    if (active) bind_weights(ev, weights);

    StepResult out;
    out.loss = {ev.value(terms.total)[0], ev.value(terms.global)[0], ev.value(terms.intra)[0],
                ev.value(terms.inter)[0], active};
    out.tau = values.tau;
    out.mean_global_set_size = weights.mean_global_set_size;
    out.mean_local_set_size = weights.mean_local_set_size;
    std::vector<int> labels;
    for (auto s : plan.samples) labels.push_back(static_cast<int>(dataset[s].label));
    for (const auto* sets : {&weights.text_sets, &weights.image_sets}) {
        std::size_t pairs = 0;
        const double purity = positive_label_purity(*sets, labels, &pairs);
        out.positive_pairs += pairs;
        out.pure_pairs += static_cast<std::size_t>(std::llround(purity * static_cast<double>(pairs)));
    }
    for (const auto* w : {&weights.local_image_guided, &weights.local_text_guided})
        for (std::size_t r = 0; r < w->rows(); ++r)
            for (std::size_t c = 0; c < w->cols(); ++c)
                if (r / m != c / m && w->at(r, c) > 0.0) {
                    ++out.local_pairs;
                    out.local_pure_pairs += labels[r / m] == labels[c / m];
                }
    if (want_grads) out.grads = ev.backward(terms.total, param_names(params));
    return out;
}

void check_dataset(const Dataset& dataset, const TrainConfig& config) {
    if (dataset.empty()) throw Error(ErrorKind::EmptyDataset, "training dataset has no records");
    const Shape expect{config.dims.patches, config.dims.raw_features};
    for (const auto& r : dataset)
        if (r.raw_patches.shape() != expect)
            throw Error(ErrorKind::ConfigInvalid, "record " + r.id + " has patches " +
                                                      shape_string(r.raw_patches.shape()) + " but config expects " +
                                                      shape_string(expect));
    if (config.batch_size > dataset.size())
        throw Error(ErrorKind::ConfigInvalid, "batch_size " + std::to_string(config.batch_size) +
                                                  " exceeds dataset size " + std::to_string(dataset.size()));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

void put_string(std::string& out, const std::string& s) {
    put_u64(out, s.size());
    out += s;
}

void put_array(std::string& out, const std::string& name, const DenseArray& a) {
    put_string(out, name);
    put_u64(out, a.rank());
    for (auto e : a.shape()) put_u64(out, e);
    for (double x : a.data()) put_u64(out, std::bit_cast<std::uint64_t>(x));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        pos_ += 8;
        return v;
    }

    std::string string() {
        const auto len = u64();
        need(len);
        auto s = bytes_.substr(pos_, len);
        pos_ += len;
        return s;
    }

    std::pair<std::string, DenseArray> array() {
        auto name = string();
        const auto rank = u64();
        if (rank > 8) throw Error(ErrorKind::ParseError, "checkpoint array '" + name + "' has implausible rank");
        Shape shape;
        std::uint64_t count = 1;
        for (std::uint64_t r = 0; r < rank; ++r) {
            shape.push_back(u64());
            count *= shape.back();
        }
        need(count * 8);
        std::vector<double> data(count);
        for (auto& x : data) x = std::bit_cast<double>(u64());
        return {std::move(name), DenseArray(std::move(shape), std::move(data))};
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::uint64_t n) const {
        if (n > bytes_.size() - pos_) throw Error(ErrorKind::ParseError, "checkpoint truncated");
    }

    const std::string& bytes_;
    std::size_t pos_ = 0;
};

const std::string kMagic = "EMCP1";
const std::string kFirstMoment = "adam.m/";
const std::string kSecondMoment = "adam.v/";

} // namespace

void validate_config(const TrainConfig& c) {
    auto bad = [](const std::string& msg) { throw Error(ErrorKind::ConfigInvalid, msg); };
    if (c.batch_size < 1) bad("batch_size must be at least 1");
    if (c.locals < 1) bad("locals (M) must be at least 1");
    if (c.dims.patches < 1 || c.dims.raw_features < 1 || c.dims.embed < 1 || c.dims.vocab < 1 ||
        c.dims.token_width < 1)
        bad("all dimensions must be at least 1");
    if (!(c.alpha >= 0.0) || !std::isfinite(c.alpha)) bad("alpha must be finite and non-negative");
    if (!(c.sigma > 0.0 && c.sigma < 1.0)) bad("sigma must lie in (0, 1)");
    if (c.top_k < 1) bad("top_k must be at least 1");
    if (!(c.tau_init >= kTauFloor && c.tau_init <= kTauCeiling)) bad("tau_init must lie in [0.01, 1]");
    if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) bad("learning_rate must be finite and >= 0");
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) bad("betas must lie in [0, 1)");
    if (!(c.eps > 0.0)) bad("eps must be positive");
    if (c.epochs < 1) bad("epochs must be at least 1");
}

ordered_json config_to_json(const TrainConfig& c) {
    ordered_json j;
    j["batch_size"] = c.batch_size;
    j["locals"] = c.locals;
    j["patches"] = c.dims.patches;
    j["raw_features"] = c.dims.raw_features;
    j["embed"] = c.dims.embed;
    j["vocab"] = c.dims.vocab;
    j["token_width"] = c.dims.token_width;
    j["alpha"] = c.alpha;
    j["sigma"] = c.sigma;
    j["top_k"] = c.top_k;
    j["activation_epoch"] = c.effective_activation_epoch();
    j["normalize_weights"] = c.normalize_weights;
    j["tau_init"] = c.tau_init;
    j["learning_rate"] = c.learning_rate;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps"] = c.eps;
    j["epochs"] = c.epochs;
    j["seed"] = c.seed;
    j["precision"] = to_string(c.precision);
    j["global_text"] = to_string(c.global_text);
    return j;
}

TrainConfig config_from_json(const json& doc, TrainConfig c) {
    if (!doc.is_object()) throw Error(ErrorKind::ConfigInvalid, "training config must be a JSON object");
    try {
        for (const auto& [key, v] : doc.items()) {
            if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "locals") c.locals = v.get<std::size_t>();
            else if (key == "patches") c.dims.patches = v.get<std::size_t>();
            else if (key == "raw_features") c.dims.raw_features = v.get<std::size_t>();
            else if (key == "embed") c.dims.embed = v.get<std::size_t>();
            else if (key == "vocab") c.dims.vocab = v.get<std::size_t>();
            else if (key == "token_width") c.dims.token_width = v.get<std::size_t>();
            else if (key == "alpha") c.alpha = v.get<double>();
            else if (key == "sigma") c.sigma = v.get<double>();
            else if (key == "top_k") c.top_k = v.get<std::size_t>();
            else if (key == "activation_epoch") {
                if (v.is_null()) c.activation_epoch.reset();
                else c.activation_epoch = v.get<std::size_t>();
            } else if (key == "normalize_weights") c.normalize_weights = v.get<bool>();
            else if (key == "tau_init") c.tau_init = v.get<double>();
            else if (key == "learning_rate") c.learning_rate = v.get<double>();
            else if (key == "beta1") c.beta1 = v.get<double>();
            else if (key == "beta2") c.beta2 = v.get<double>();
            else if (key == "eps") c.eps = v.get<double>();
            else if (key == "epochs") c.epochs = v.get<std::size_t>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "precision") c.precision = parse_precision(v.get<std::string>());
            else if (key == "global_text") c.global_text = parse_global_text_policy(v.get<std::string>());
            else throw Error(ErrorKind::ConfigInvalid, "unknown training config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw Error(ErrorKind::ConfigInvalid, std::string("bad training config value: ") + e.what());
    }
    return c;
}

std::uint64_t config_hash(const TrainConfig& config) { return fnv1a64(config_to_json(config).dump()); }

AdamState init_adam(const ModelParams& params) {
    AdamState s;
    for (const auto& [name, array] : params.named()) {
        s.first[name] = DenseArray(array->shape());
        s.second[name] = DenseArray(array->shape());
    }
    return s;
}

void optimizer_step(ModelParams& params, const Gradients& grads, AdamState& moments, const TrainConfig& config) {
    ++moments.step;
    const double t = static_cast<double>(moments.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (auto& [name, param] : params.named()) {
        auto g = grads.find(name);
        auto m = moments.first.find(name);
        auto v = moments.second.find(name);
        if (g == grads.end() || m == moments.first.end() || v == moments.second.end())
            throw Error(ErrorKind::ShapeMismatch, "no gradient or moment for parameter " + name);
        if (g->second.shape() != param->shape() || m->second.shape() != param->shape() ||
            v->second.shape() != param->shape())
            throw Error(ErrorKind::ShapeMismatch, "gradient/moment shape mismatch for " + name);
        auto& pd = param->storage();
        const auto& gd = g->second.storage();
        auto& md = m->second.storage();
        auto& vd = v->second.storage();
        for (std::size_t i = 0; i < pd.size(); ++i) {
            md[i] = config.beta1 * md[i] + (1.0 - config.beta1) * gd[i];
            vd[i] = config.beta2 * vd[i] + (1.0 - config.beta2) * gd[i] * gd[i];
            const double mhat = md[i] / c1;
            const double vhat = vd[i] / c2;
            pd[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.eps);
        }
        if (config.precision == Precision::F32) param->set_precision(Precision::F32);
    }
}

bool operator==(const Checkpoint& a, const Checkpoint& b) {
    if (a.epoch != b.epoch || a.config_hash != b.config_hash || a.config_json != b.config_json ||
        !(a.optimizer == b.optimizer))
        return false;
    auto na = a.params.named();
    auto nb = b.params.named();
    for (std::size_t i = 0; i < na.size(); ++i)
        if (na[i].first != nb[i].first || !(*na[i].second == *nb[i].second)) return false;
    return true;
}

std::string serialize_checkpoint(const Checkpoint& cp) {
    std::string out = kMagic;
    put_u64(out, cp.config_hash);
    put_u64(out, cp.epoch);
    put_u64(out, cp.optimizer.step);
    put_string(out, cp.config_json);
    const auto named = cp.params.named();
    put_u64(out, named.size() + cp.optimizer.first.size() + cp.optimizer.second.size());
    for (const auto& [name, array] : named) put_array(out, name, *array);
    for (const auto& [name, array] : cp.optimizer.first) put_array(out, kFirstMoment + name, array);
    for (const auto& [name, array] : cp.optimizer.second) put_array(out, kSecondMoment + name, array);
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    if (bytes.compare(0, kMagic.size(), kMagic) != 0)
        throw Error(ErrorKind::ParseError, "not a checkpoint (missing EMCP1 magic)");
    const std::string body = bytes.substr(kMagic.size());
    Reader in(body);
    Checkpoint cp;
    cp.config_hash = in.u64();
    cp.epoch = in.u64();
    cp.optimizer.step = in.u64();
    cp.config_json = in.string();
    std::map<std::string, DenseArray> arrays;
    const auto count = in.u64();
    for (std::uint64_t k = 0; k < count; ++k) {
        auto [name, array] = in.array();
        if (name.rfind(kFirstMoment, 0) == 0)
            cp.optimizer.first[name.substr(kFirstMoment.size())] = std::move(array);
        else if (name.rfind(kSecondMoment, 0) == 0)
            cp.optimizer.second[name.substr(kSecondMoment.size())] = std::move(array);
        else
            arrays[name] = std::move(array);
    }
    if (!in.done()) throw Error(ErrorKind::ParseError, "trailing bytes after checkpoint arrays");
    for (auto& [name, slot] : cp.params.named()) {
        auto it = arrays.find(name);
        if (it == arrays.end()) throw Error(ErrorKind::ParseError, "checkpoint lacks parameter " + name);
        *slot = std::move(it->second);
    }
    return cp;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
    const auto bytes = serialize_checkpoint(checkpoint);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
    std::string bytes{std::istreambuf_iterator<char>(in), {}};
    return deserialize_checkpoint(bytes);
}

TrainConfig checkpoint_config(const Checkpoint& checkpoint) {
    json doc;
    try {
        doc = json::parse(checkpoint.config_json);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::ParseError, std::string("checkpoint config is not JSON: ") + e.what());
    }
    return config_from_json(doc);
}

std::string history_to_jsonl(const TrainHistory& history) {
    std::string out;
    ordered_json header;
    header["config"] = ordered_json::parse(history.config_json);
    out += header.dump() + "\n";
    for (const auto& e : history.epochs) {
        ordered_json j;
        j["epoch"] = e.epoch;
        j["batches"] = e.batches;
        j["total"] = e.total;
        j["global"] = e.global;
        j["intra"] = e.intra;
        j["inter"] = e.inter;
        j["tau"] = e.tau;
        j["tau_min"] = e.tau_min;
        j["tau_max"] = e.tau_max;
        j["cmgpm_active"] = e.cmgpm_active;
        j["mean_global_set_size"] = e.mean_global_set_size;
        j["mean_local_set_size"] = e.mean_local_set_size;
        j["positive_purity"] = e.positive_purity;
        j["positive_pairs"] = e.positive_pairs;
        j["local_positive_purity"] = e.local_positive_purity;
        j["local_positive_pairs"] = e.local_positive_pairs;
        out += j.dump() + "\n";
    }
    return out;
}

void save_history(const std::filesystem::path& path, const TrainHistory& history) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
    out << history_to_jsonl(history);
    if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

ModelParams initial_params(const TrainConfig& config) {
    auto params = init_model(config.dims, derive_seed(config.seed, fnv1a64("init")), config.tau_init);
    if (config.precision == Precision::F32)
        for (auto& [_, a] : params.named()) a->set_precision(Precision::F32);
    return params;
}

TrainResult train(const Dataset& dataset, const TrainConfig& config, const EpochCallback& on_epoch) {
    validate_config(config);
    check_dataset(dataset, config);
    const auto tokens = tokenize_dataset(dataset, config);

    TrainResult result;
    auto& cp = result.checkpoint;
    cp.params = initial_params(config);
    cp.optimizer = init_adam(cp.params);
    cp.config_json = config_to_json(config).dump();
    cp.config_hash = config_hash(config);
    result.history.config_json = cp.config_json;

    const std::size_t n = config.batch_size;
    const std::size_t batches = dataset.size() / n;
    const std::uint64_t epoch_base = derive_seed(config.seed, fnv1a64("epochs"));
    std::vector<std::size_t> order(dataset.size());

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng rng(derive_seed(epoch_base, epoch));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.batches = batches;
        rec.tau_min = kTauCeiling;
        rec.tau_max = kTauFloor;
        double gsize = 0.0, lsize = 0.0;
        std::size_t pure = 0, local_pure = 0;
        for (std::size_t b = 0; b < batches; ++b) {
            BatchPlan plan;
            plan.samples.assign(order.begin() + b * n, order.begin() + (b + 1) * n);
            for (auto s : plan.samples) plan.slots.push_back(sample_local_indices(dataset[s].caption, config.locals, rng));
            auto step = run_batch(cp.params, dataset, tokens, plan, config, epoch, true);

            bool finite = std::isfinite(step.loss.total);
            for (const auto& [_, g] : step.grads) finite = finite && g.all_finite();
            if (!finite)
                throw Error(ErrorKind::NumericalFailure, "non-finite loss or gradient at epoch " +
                                                             std::to_string(epoch) + ", batch " + std::to_string(b));
            optimizer_step(cp.params, step.grads, cp.optimizer, config);

            rec.total += step.loss.total;
            rec.global += step.loss.global;
            rec.intra += step.loss.intra;
            rec.inter += step.loss.inter;
            rec.cmgpm_active = step.loss.cmgpm_active;
            rec.tau_min = std::min(rec.tau_min, step.tau);
            rec.tau_max = std::max(rec.tau_max, step.tau);
            gsize += step.mean_global_set_size;
            lsize += step.mean_local_set_size;
            rec.positive_pairs += step.positive_pairs;
            pure += step.pure_pairs;
            rec.local_positive_pairs += step.local_pairs;
            local_pure += step.local_pure_pairs;
        }
        const double nb = static_cast<double>(batches);
        rec.total /= nb;
        rec.global /= nb;
        rec.intra /= nb;
        rec.inter /= nb;
        rec.mean_global_set_size = gsize / nb;
        rec.mean_local_set_size = lsize / nb;
        rec.positive_purity =
            rec.positive_pairs ? static_cast<double>(pure) / static_cast<double>(rec.positive_pairs) : 1.0;
        rec.local_positive_purity = rec.local_positive_pairs ? static_cast<double>(local_pure) /
                                                                   static_cast<double>(rec.local_positive_pairs)
                                                             : 1.0;
        rec.tau = clamp_temperature(cp.params.temperature_logit[0]);
        cp.epoch = epoch + 1;
        result.history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return result;
}

LossValues batch_loss(const ModelParams& params, const Dataset& dataset, const std::vector<std::size_t>& batch,
                      const TrainConfig& config, std::size_t epoch, std::uint64_t sample_seed) {
    validate_config(config);
    if (batch.empty()) throw Error(ErrorKind::EmptyDataset, "batch has no samples");
    const auto tokens = tokenize_dataset(dataset, config);
    Rng rng(sample_seed);
    BatchPlan plan;
    plan.samples = batch;
    for (auto s : batch) plan.slots.push_back(sample_local_indices(dataset.at(s).caption, config.locals, rng));
    return run_batch(params, dataset, tokens, plan, config, epoch, false).loss;
}

} // namespace emocap
