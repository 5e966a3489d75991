#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emocap/caption.hpp"
#include "emocap/numerics.hpp"

namespace emocap {

struct SynthSpec {
    std::size_t classes = 8;       // C
    std::size_t per_class = 32;
    std::size_t patches = 4;       // P
    std::size_t features = 16;     // F
    double noise_sigma = 0.05;
    std::size_t locals_min = 3;
    std::size_t locals_max = 4;
    std::size_t class_pool_words = 8;
    std::size_t cue_pool_words = 4;
    std::size_t vocab_size = kDefaultVocabSize; // pools are chosen collision-free in this bucket space
    std::size_t frames_per_group = 0;           // 0: no frame groups
    bool shuffled_pairs = false;
    std::uint64_t seed = 1;
};

/// Throws SpecInvalid on out-of-range fields.
void validate_spec(const SynthSpec& spec);

nlohmann::ordered_json spec_to_json(const SynthSpec& spec);
/// Overlays the keys of `doc` on `base`; unknown keys raise ConfigInvalid.
SynthSpec spec_from_json(const nlohmann::json& doc, SynthSpec base = {});

struct DatasetRecord {
    std::string id;
    std::size_t label = 0;
    DenseArray raw_patches; // P×F
    StructuredCaption caption;
    std::optional<std::string> frame_group;

    friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

using Dataset = std::vector<DatasetRecord>;

/// Names the generator uses for class c; also the zero-shot class names.
std::vector<std::string> synth_class_names(std::size_t classes);

/// Word pools of one generated corpus. Class pools, cue pools and the shared
/// pool are pairwise disjoint and hash to distinct vocabulary buckets.
struct VocabularyPools {
    std::vector<std::string> class_names;
    std::vector<std::vector<std::string>> class_words;            // [c]
    std::vector<std::vector<std::vector<std::string>>> cue_words; // [c][q]
    std::vector<std::string> cue_regions;                          // [q], shared across classes
    std::vector<std::string> shared_words;
};

VocabularyPools build_pools(const SynthSpec& spec);
Dataset generate_dataset(const SynthSpec& spec);

void save_dataset(const std::filesystem::path& path, const Dataset& records);
/// Errors: IoError, ParseError(line), InconsistentShape(line).
Dataset load_dataset(const std::filesystem::path& path);

std::string record_to_json_line(const DatasetRecord& record);
DatasetRecord record_from_json_line(const std::string& line, std::size_t line_number);

/// Stratified split: in each class, a seeded `fraction` of records goes to the
/// second part. Record order inside each part follows the input order.
std::pair<Dataset, Dataset> split_holdout(const Dataset& records, double fraction, std::uint64_t seed);

/// Consecutive records sharing a frame_group form one clip; records without a
/// group are single-frame clips. Returns index lists in dataset order.
std::vector<std::vector<std::size_t>> frame_groups(const Dataset& records);

std::vector<std::size_t> labels_of(const Dataset& records);

} // namespace emocap
