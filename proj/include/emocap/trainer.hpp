#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "emocap/cmgpm.hpp"
#include "emocap/encoders.hpp"
#include "emocap/synth_data.hpp"

namespace emocap {

struct TrainConfig {
    std::size_t batch_size = 16; // N
    std::size_t locals = 3;      // M
    ModelDims dims;
    double alpha = 1.0;
    double sigma = 0.8;
    std::size_t top_k = 5;
    std::optional<std::size_t> activation_epoch; // t; unset means epochs / 2
    bool normalize_weights = false;
    double tau_init = 0.07;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t epochs = 200;
    std::uint64_t seed = 1;
    Precision precision = Precision::F64;
    GlobalTextPolicy global_text = GlobalTextPolicy::SummaryPart;

    std::size_t effective_activation_epoch() const { return activation_epoch.value_or(epochs / 2); }
    ScheduleConfig schedule() const { return {alpha, effective_activation_epoch()}; }
    CmgpmConfig mining() const { return {sigma, top_k, normalize_weights}; }
};

/// Throws ConfigInvalid naming the first offending field.
void validate_config(const TrainConfig& config);

nlohmann::ordered_json config_to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig config_from_json(const nlohmann::json& doc, TrainConfig base = {});
std::uint64_t config_hash(const TrainConfig& config);

struct AdamState {
    std::map<std::string, DenseArray> first;
    std::map<std::string, DenseArray> second;
    std::uint64_t step = 0;

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

AdamState init_adam(const ModelParams& params);

/// One bias-corrected adaptive-moment update of every named parameter.
void optimizer_step(ModelParams& params, const Gradients& grads, AdamState& moments, const TrainConfig& config);

struct Checkpoint {
    ModelParams params;
    AdamState optimizer;
    std::size_t epoch = 0; // completed epochs
    std::uint64_t config_hash = 0;
    std::string config_json;
};

bool operator==(const Checkpoint& a, const Checkpoint& b);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes);
/// Recovers the training configuration echoed into a checkpoint.
TrainConfig checkpoint_config(const Checkpoint& checkpoint);

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t batches = 0;
    double total = 0.0;
    double global = 0.0;
    double intra = 0.0;
    double inter = 0.0;
    double tau = 0.0;
    double tau_min = 0.0;
    double tau_max = 0.0;
    bool cmgpm_active = false;
    double mean_global_set_size = 1.0;
    double mean_local_set_size = 1.0;
    /// Share of mined non-self global positives with the anchor's label
    /// (diagnostic only; labels never enter the loss). 1 when none were mined.
    double positive_purity = 1.0;
    std::size_t positive_pairs = 0;
    /// Same for the per-slot local sets, counted over (anchor, candidate) slot pairs.
    double local_positive_purity = 1.0;
    std::size_t local_positive_pairs = 0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::string config_json;
};

std::string history_to_jsonl(const TrainHistory& history);
void save_history(const std::filesystem::path& path, const TrainHistory& history);

struct TrainResult {
    Checkpoint checkpoint;
    TrainHistory history;
};

/// Parameters a run with this config starts from.
ModelParams initial_params(const TrainConfig& config);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Errors: EmptyDataset, ConfigInvalid, NumericalFailure (non-finite loss or gradient).
TrainResult train(const Dataset& dataset, const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Loss components of one batch under the given parameters, local slots
/// drawn from `sample_seed`. Used for checkpoint verification and tests.
LossValues batch_loss(const ModelParams& params, const Dataset& dataset, const std::vector<std::size_t>& batch,
                      const TrainConfig& config, std::size_t epoch, std::uint64_t sample_seed);

} // namespace emocap
