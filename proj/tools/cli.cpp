#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "emocap/error.hpp"
#include "emocap/eval.hpp"
#include "emocap/gradcheck.hpp"
#include "emocap/synth_data.hpp"
#include "emocap/trainer.hpp"

namespace emocap::cli {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr double kGradcheckLimit = 1e-5;
const std::vector<std::size_t> kRecallKs{1, 5, 10};

// Config problem that should be reported together with the command's usage.
struct UsageError : std::runtime_error {
    UsageError(const std::string& msg, const CLI::App* app) : std::runtime_error(msg), app(app) {}
    const CLI::App* app;
};

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::IoError:
        case ErrorKind::ParseError:
        case ErrorKind::InconsistentShape:
        case ErrorKind::EmptyDataset:
            return kIoError;
        case ErrorKind::NumericalFailure:
            return kNumericalError;
        default:
            return kConfigError;
    }
}

struct EvalOptions {
    bool video = false;
    std::size_t frames = kDefaultVideoFrames;
    std::vector<std::string> class_names;
    std::string prompt_template = kDefaultPromptTemplate;
    std::size_t shots = 4;
    std::optional<std::uint64_t> seed;
    double holdout = 0.5;
};

ordered_json eval_to_json(const EvalOptions& e) {
    ordered_json j;
    j["video"] = e.video;
    j["frames"] = e.frames;
    j["class_names"] = e.class_names;
    j["prompt_template"] = e.prompt_template;
    j["shots"] = e.shots;
    j["seed"] = e.seed ? ordered_json(*e.seed) : ordered_json(nullptr);
    j["holdout"] = e.holdout;
    return j;
}

EvalOptions eval_from_json(const json& doc) {
    EvalOptions e;
    if (!doc.is_object()) throw Error(ErrorKind::ConfigInvalid, "'eval' must be a JSON object");
    try {
        for (const auto& [key, v] : doc.items()) {
            if (key == "video") e.video = v.get<bool>();
            else if (key == "frames") e.frames = v.get<std::size_t>();
            else if (key == "class_names") e.class_names = v.get<std::vector<std::string>>();
            else if (key == "prompt_template") e.prompt_template = v.get<std::string>();
            else if (key == "shots") e.shots = v.get<std::size_t>();
            else if (key == "seed") e.seed = v.get<std::uint64_t>();
            else if (key == "holdout") e.holdout = v.get<double>();
            else throw Error(ErrorKind::ConfigInvalid, "unknown eval config key '" + key + "'");
        }
    } catch (const json::exception& ex) {
        throw Error(ErrorKind::ConfigInvalid, std::string("bad eval config value: ") + ex.what());
    }
    return e;
}

const std::set<std::string> kPathKeys{"dataset", "train_dataset", "output", "checkpoint", "history"};

/// Contents of --config. Every section is parsed here so bad values fail
/// before any command starts work.
struct RunFile {
    json data = json::object();
    json train = json::object();
    EvalOptions eval;
    std::map<std::string, std::string> paths;
};

RunFile load_run_file(const std::string& path) {
    RunFile f;
    if (path.empty()) return f;
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open config file '" + path + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::ConfigInvalid, "config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw Error(ErrorKind::ConfigInvalid, "config file must hold a JSON object");
    for (const auto& [key, v] : doc.items()) {
        if (key == "data") f.data = v;
        else if (key == "train") f.train = v;
        else if (key == "eval") f.eval = eval_from_json(v);
        else if (key == "paths") {
            if (!v.is_object()) throw Error(ErrorKind::ConfigInvalid, "'paths' must be a JSON object");
            for (const auto& [name, p] : v.items()) {
                if (!kPathKeys.count(name)) throw Error(ErrorKind::ConfigInvalid, "unknown path key '" + name + "'");
                if (!p.is_string()) throw Error(ErrorKind::ConfigInvalid, "path '" + name + "' must be a string");
                f.paths[name] = p.get<std::string>();
            }
        } else {
            throw Error(ErrorKind::ConfigInvalid, "unknown config key '" + key + "'");
        }
    }
    spec_from_json(f.data);
    config_from_json(f.train);
    return f;
}

template <class T>
void overlay(T& target, const std::optional<T>& flag) {
    if (flag) target = *flag;
}

std::string pick_path(const std::optional<std::string>& flag, const RunFile& file, const std::string& key) {
    if (flag) return *flag;
    auto it = file.paths.find(key);
    return it == file.paths.end() ? std::string() : it->second;
}

void apply_precision_env(TrainConfig& config) {
    if (const char* p = std::getenv("EMOCAP_PRECISION")) config.precision = parse_precision(p);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot write '" + path + "'");
    out << text;
    if (!out) throw Error(ErrorKind::IoError, "write failed for '" + path + "'");
}

std::vector<std::string> split_names(const std::string& text) {
    std::vector<std::string> names;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto comma = text.find(',', start);
        if (comma == std::string::npos) comma = text.size();
        names.push_back(text.substr(start, comma - start));
        start = comma + 1;
    }
    return names;
}

std::size_t class_count(const Dataset& data) {
    std::size_t c = 0;
    for (const auto& r : data) c = std::max(c, r.label + 1);
    return std::max<std::size_t>(c, 2);
}

void merge_metrics(ordered_json& report, const MetricsReport& metrics) {
    const auto j = report_to_json(metrics);
    for (const auto& [k, v] : j.items())
        if (k != "recall_at") report[k] = v;
}

// ---- gen-data ----

struct GenFlags {
    std::optional<std::string> config, output;
    std::optional<std::size_t> classes, per_class, patches, features, locals_min, locals_max, class_words, cue_words,
        vocab, frames_per_group;
    std::optional<double> noise;
    std::optional<std::uint64_t> seed;
    bool shuffled = false;
};

void add_gen(CLI::App& app, GenFlags& f, std::function<void()> action) {
    auto* c = app.add_subcommand("gen-data", "Write a synthetic emotion-caption corpus as JSON lines");
    c->add_option("--config", f.config, "Run config JSON file");
    c->add_option("-o,--output", f.output, "Dataset output path");
    c->add_option("--classes", f.classes, "Class count C");
    c->add_option("--per-class", f.per_class, "Records per class");
    c->add_option("--patches", f.patches, "Patch grid size P");
    c->add_option("--features", f.features, "Raw feature width F");
    c->add_option("--noise", f.noise, "Feature noise sigma");
    c->add_option("--locals-min", f.locals_min, "Fewest local sentences per caption");
    c->add_option("--locals-max", f.locals_max, "Most local sentences per caption");
    c->add_option("--class-words", f.class_words, "Words per class pool");
    c->add_option("--cue-words", f.cue_words, "Words per cue pool");
    c->add_option("--vocab", f.vocab, "Hash vocabulary size");
    c->add_option("--frames-per-group", f.frames_per_group, "Group consecutive records into clips of this size");
    c->add_flag("--shuffled-pairs", f.shuffled, "Break image-caption coupling (negative control)");
    c->add_option("--seed", f.seed, "Generator seed");
    c->callback(std::move(action));
}

int do_gen(const GenFlags& f, const CLI::App* cmd, std::ostream& out) {
    auto file = load_run_file(f.config.value_or(""));
    auto spec = spec_from_json(file.data);
    overlay(spec.classes, f.classes);
    overlay(spec.per_class, f.per_class);
    overlay(spec.patches, f.patches);
    overlay(spec.features, f.features);
    overlay(spec.noise_sigma, f.noise);
    overlay(spec.locals_min, f.locals_min);
    overlay(spec.locals_max, f.locals_max);
    overlay(spec.class_pool_words, f.class_words);
    overlay(spec.cue_pool_words, f.cue_words);
    overlay(spec.vocab_size, f.vocab);
    overlay(spec.frames_per_group, f.frames_per_group);
    if (f.shuffled) spec.shuffled_pairs = true;
    overlay(spec.seed, f.seed);
    if (!f.seed && !file.data.contains("seed")) throw UsageError("--seed is required", cmd);
    const auto output = pick_path(f.output, file, "output");
    if (output.empty()) throw UsageError("missing output path (-o)", cmd);
    validate_spec(spec);

    auto data = generate_dataset(spec);
    save_dataset(output, data);
    ordered_json echo;
    echo["command"] = "gen-data";
    echo["data"] = spec_to_json(spec);
    echo["paths"] = {{"output", output}};
    write_text(output + ".config.json", echo.dump(2) + "\n");

    ordered_json summary;
    summary["records"] = data.size();
    auto names = synth_class_names(spec.classes);
    ordered_json counts = ordered_json::object();
    for (std::size_t c = 0; c < spec.classes; ++c)
        counts[names[c]] = std::count_if(data.begin(), data.end(), [c](const auto& r) { return r.label == c; });
    summary["per_class"] = counts;
    summary["output"] = output;
    summary["data"] = spec_to_json(spec);
    out << summary.dump() << '\n';
    return kOk;
}

// ---- train ----

struct TrainFlags {
    std::optional<std::string> config, data, checkpoint, history, global_text;
    std::optional<std::size_t> epochs, batch_size, locals, top_k, cmgpm_epoch, embed, token_width, vocab;
    std::optional<double> alpha, sigma, lr, tau_init;
    std::optional<std::uint64_t> seed;
    bool normalize_weights = false;
    bool quiet = false;
};

void add_train(CLI::App& app, TrainFlags& f, std::function<void()> action) {
    auto* c = app.add_subcommand("train", "Train encoders with the scheduled contrastive objective");
    c->add_option("--config", f.config, "Run config JSON file");
    c->add_option("-d,--data", f.data, "Training dataset (JSON lines)");
    c->add_option("-o,--checkpoint", f.checkpoint, "Checkpoint output path");
    c->add_option("--history", f.history, "History output path (default: <checkpoint>.history.jsonl)");
    c->add_option("--epochs", f.epochs, "Epoch count");
    c->add_option("--batch-size", f.batch_size, "Batch size N");
    c->add_option("--locals", f.locals, "Local sentences sampled per caption (M)");
    c->add_option("--alpha", f.alpha, "Weight of the local losses");
    c->add_option("--sigma", f.sigma, "Mining similarity threshold");
    c->add_option("--topk", f.top_k, "Mining top-K");
    c->add_option("--cmgpm-epoch", f.cmgpm_epoch, "Epoch at which mined positives switch on (default epochs/2)");
    c->add_option("--lr", f.lr, "Learning rate");
    c->add_option("--tau-init", f.tau_init, "Initial temperature");
    c->add_option("--embed", f.embed, "Joint embedding width D");
    c->add_option("--token-width", f.token_width, "Token embedding width E");
    c->add_option("--vocab", f.vocab, "Hash vocabulary size V");
    c->add_option("--global-text", f.global_text, "Caption part used as the global text: summary or global");
    c->add_flag("--normalize-weights", f.normalize_weights, "Normalize mined weights per anchor");
    c->add_flag("-q,--quiet", f.quiet, "No per-epoch progress on stderr");
    c->add_option("--seed", f.seed, "Training seed");
    c->callback(std::move(action));
}

int do_train(const TrainFlags& f, const CLI::App* cmd, std::ostream& out, std::ostream& err) {
    auto file = load_run_file(f.config.value_or(""));
    auto cfg = config_from_json(file.train);
    overlay(cfg.epochs, f.epochs);
    overlay(cfg.batch_size, f.batch_size);
    overlay(cfg.locals, f.locals);
    overlay(cfg.alpha, f.alpha);
    overlay(cfg.sigma, f.sigma);
    overlay(cfg.top_k, f.top_k);
    if (f.cmgpm_epoch) cfg.activation_epoch = *f.cmgpm_epoch;
    overlay(cfg.learning_rate, f.lr);
    overlay(cfg.tau_init, f.tau_init);
    overlay(cfg.dims.embed, f.embed);
    overlay(cfg.dims.token_width, f.token_width);
    overlay(cfg.dims.vocab, f.vocab);
    if (f.global_text) cfg.global_text = parse_global_text_policy(*f.global_text);
    if (f.normalize_weights) cfg.normalize_weights = true;
    overlay(cfg.seed, f.seed);
    apply_precision_env(cfg);
    if (!f.seed && !file.train.contains("seed")) throw UsageError("--seed is required", cmd);
    const auto data_path = pick_path(f.data, file, "dataset");
    if (data_path.empty()) throw UsageError("missing dataset path (-d)", cmd);
    const auto checkpoint_path = pick_path(f.checkpoint, file, "checkpoint");
    if (checkpoint_path.empty()) throw UsageError("missing checkpoint path (-o)", cmd);
    auto history_path = pick_path(f.history, file, "history");
    if (history_path.empty()) history_path = checkpoint_path + ".history.jsonl";
    validate_config(cfg);

    auto data = load_dataset(data_path);
    const auto shape = data.front().raw_patches.shape();
    auto adopt = [&](std::size_t& dim, const char* key, std::size_t actual) {
        if (file.train.contains(key) && dim != actual)
            throw Error(ErrorKind::ConfigInvalid, std::string(key) + " in config does not match the dataset");
        dim = actual;
    };
    adopt(cfg.dims.patches, "patches", shape[0]);
    adopt(cfg.dims.raw_features, "raw_features", shape[1]);

    EpochCallback progress;
    if (!f.quiet)
        progress = [&err](const EpochRecord& e) {
            err << "epoch " << e.epoch << " total " << e.total << " tau " << e.tau
                << (e.cmgpm_active ? " cmgpm on" : "") << '\n';
        };
    auto result = train(data, cfg, progress);
    save_checkpoint(checkpoint_path, result.checkpoint);
    save_history(history_path, result.history);

    const auto& last = result.history.epochs.back();
    ordered_json summary;
    summary["epochs"] = result.history.epochs.size();
    summary["final"] = {{"total", last.total},
                        {"global", last.global},
                        {"intra", last.intra},
                        {"inter", last.inter},
                        {"tau", last.tau},
                        {"cmgpm_active", last.cmgpm_active}};
    summary["checkpoint"] = checkpoint_path;
    summary["history"] = history_path;
    summary["config"] = config_to_json(cfg);
    out << summary.dump() << '\n';
    return kOk;
}

// ---- eval ----

enum class EvalMode { ZeroShot, Retrieval, Probe };

struct EvalFlags {
    std::optional<std::string> config, checkpoint, data, train_data, output, class_names, prompt;
    std::optional<std::size_t> frames, shots;
    std::optional<double> holdout;
    std::optional<std::uint64_t> seed;
    bool video = false;
    EvalMode mode = EvalMode::ZeroShot;
};

void add_eval(CLI::App& app, EvalFlags& f, std::function<void()> action) {
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->require_subcommand(1);
    auto mode = [&](const char* name, const char* about, EvalMode m) {
        auto* c = eval->add_subcommand(name, about);
        c->add_option("--config", f.config, "Run config JSON file");
        c->add_option("-c,--checkpoint", f.checkpoint, "Checkpoint path");
        c->add_option("-d,--data", f.data, "Evaluation dataset (JSON lines)");
        c->add_option("-o,--output", f.output, "Also write the report to this file");
        c->add_option("--class-names", f.class_names, "Comma-separated class names, indexed by label");
        c->add_option("--prompt", f.prompt, "Prompt template with one {CLASS} placeholder");
        c->callback([&f, m, action] {
            f.mode = m;
            action();
        });
        return c;
    };
    auto* zs = mode("zero-shot", "Zero-shot classification with class prompts", EvalMode::ZeroShot);
    zs->add_flag("--video", f.video, "Classify frame_group clips instead of single records");
    zs->add_option("--frames", f.frames, "Frames sampled per clip");
    mode("retrieval", "Image-caption retrieval recall@{1,5,10}", EvalMode::Retrieval);
    auto* probe = mode("probe", "Few-shot linear probe on frozen image embeddings", EvalMode::Probe);
    probe->add_option("--shots", f.shots, "Training examples per class");
    probe->add_option("--seed", f.seed, "Shot sampling seed");
    probe->add_option("--train-data", f.train_data, "Pool to draw shots from (default: split of --data)");
    probe->add_option("--holdout", f.holdout, "Test fraction when splitting --data");
}

int do_eval(const EvalFlags& f, const CLI::App* cmd, std::ostream& out) {
    auto file = load_run_file(f.config.value_or(""));
    auto opts = file.eval;
    if (f.video) opts.video = true;
    overlay(opts.frames, f.frames);
    if (f.class_names) opts.class_names = split_names(*f.class_names);
    overlay(opts.prompt_template, f.prompt);
    overlay(opts.shots, f.shots);
    if (f.seed) opts.seed = f.seed;
    overlay(opts.holdout, f.holdout);
    if (f.mode == EvalMode::Probe) {
        if (!opts.seed) throw UsageError("--seed is required", cmd);
        if (opts.shots < 1) throw Error(ErrorKind::ConfigInvalid, "--shots must be at least 1");
        if (!(opts.holdout > 0.0 && opts.holdout < 1.0))
            throw Error(ErrorKind::ConfigInvalid, "--holdout must lie in (0, 1)");
    }
    if (opts.frames < 1) throw Error(ErrorKind::ConfigInvalid, "--frames must be at least 1");
    const auto checkpoint_path = pick_path(f.checkpoint, file, "checkpoint");
    if (checkpoint_path.empty()) throw UsageError("missing checkpoint path (-c)", cmd);
    const auto data_path = pick_path(f.data, file, "dataset");
    if (data_path.empty()) throw UsageError("missing dataset path (-d)", cmd);
    auto train_path = pick_path(f.train_data, file, "train_dataset");

    const auto checkpoint = load_checkpoint(checkpoint_path);
    const auto train_cfg = checkpoint_config(checkpoint);
    const auto& params = checkpoint.params;
    auto data = load_dataset(data_path);

    ordered_json report;
    if (f.mode == EvalMode::ZeroShot) {
        if (opts.class_names.empty()) opts.class_names = synth_class_names(class_count(data));
        if (opts.class_names.size() < class_count(data))
            throw Error(ErrorKind::ConfigInvalid, "fewer class names than labels in the dataset");
        auto prompts = build_prompts(opts.class_names, params.text, train_cfg.dims.vocab, opts.prompt_template);
        auto metrics = zero_shot_eval(embed_images(params, data), data, prompts, opts.video, opts.frames);
        report["mode"] = "zero-shot";
        merge_metrics(report, metrics);
    } else if (f.mode == EvalMode::Retrieval) {
        MetricsReport metrics;
        metrics.recall_at = retrieval_eval(embed_images(params, data),
                                           embed_captions(params, data, train_cfg.global_text, train_cfg.dims.vocab),
                                           kRecallKs);
        report["mode"] = "retrieval";
        report["count"] = data.size();
        report["recall_at"] = report_to_json(metrics)["recall_at"];
    } else {
        Dataset pool, test;
        if (train_path.empty()) {
            std::tie(pool, test) = split_holdout(data, opts.holdout, *opts.seed);
            train_path = data_path;
        } else {
            pool = load_dataset(train_path);
            test = data;
        }
        auto metrics = linear_probe(embed_images(params, pool), labels_of(pool), embed_images(params, test),
                                    labels_of(test), opts.shots, *opts.seed);
        report["mode"] = "probe";
        merge_metrics(report, metrics);
    }
    report["config"] = {{"train", config_to_json(train_cfg)},
                        {"eval", eval_to_json(opts)},
                        {"paths", {{"checkpoint", checkpoint_path}, {"dataset", data_path}}}};
    if (f.mode == EvalMode::Probe) report["config"]["paths"]["train_dataset"] = train_path;

    const auto text = report.dump();
    if (f.output) write_text(*f.output, text + "\n");
    out << text << '\n';
    return kOk;
}

// ---- gradcheck ----

struct GradFlags {
    std::uint64_t seed = 1;
    bool inject_fault = false;
};

void add_gradcheck(CLI::App& app, GradFlags& f, std::function<void()> action) {
    auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every loss graph");
    c->add_option("--seed", f.seed, "Seed for the random batches")->capture_default_str();
    c->add_flag("--inject-fault", f.inject_fault)->group("");
    c->callback(std::move(action));
}

int do_gradcheck(const GradFlags& f, std::ostream& out) {
    auto suite = run_gradcheck_suite(f.seed, f.inject_fault ? -1.0 : 1.0);
    ordered_json report;
    report["seed"] = suite.seed;
    report["limit"] = kGradcheckLimit;
    ordered_json losses = ordered_json::object();
    for (const auto& name : kGradcheckLosses) losses[name] = suite.worst_by_loss.at(name);
    report["max_relative_error"] = losses;
    ordered_json cases = ordered_json::array();
    for (const auto& c : suite.cases)
        cases.push_back({{"loss", c.loss}, {"n", c.n}, {"m", c.m}, {"max_relative_error", c.max_relative_error}});
    report["cases"] = cases;
    const bool ok = suite.worst() < kGradcheckLimit;
    report["pass"] = ok;
    out << report.dump() << '\n';
    return ok ? kOk : kCheckFailed;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Structured-caption contrastive training for facial emotion", "emocap"};
    app.require_subcommand(1);

    GenFlags gen;
    TrainFlags tr;
    EvalFlags ev;
    GradFlags gc;
    std::function<int()> command;
    add_gen(app, gen, [&] { command = [&] { return do_gen(gen, app.get_subcommand("gen-data"), out); }; });
    add_train(app, tr, [&] { command = [&] { return do_train(tr, app.get_subcommand("train"), out, err); }; });
    add_eval(app, ev, [&] {
        command = [&] {
            auto* eval = app.get_subcommand("eval");
            return do_eval(ev, eval->get_subcommands().front(), out);
        };
    });
    add_gradcheck(app, gc, [&] { command = [&] { return do_gradcheck(gc, out); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kConfigError;
    }
    try {
        return command();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n\n" << e.app->help();
        return kConfigError;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kConfigError;
    }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"emocap"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace emocap::cli
