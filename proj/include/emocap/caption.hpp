#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "emocap/random.hpp"

namespace emocap {

/// Three-part emotion caption: one global sentence, one sentence per local
/// facial cue, and an integrative summary.
struct StructuredCaption {
    std::string global_sentence;
    std::vector<std::string> local_sentences;
    std::string summary_sentence;

    friend bool operator==(const StructuredCaption&, const StructuredCaption&) = default;
};

/// Throws EmptySection if any part is blank or the local list is empty.
void validate_caption(const StructuredCaption& caption);

/// Parses the plain-text form:
///   Global: <sentence>
///   Local:
///   - <sentence>
///   Summary: <sentence>
StructuredCaption parse_structured_caption(std::string_view text);
std::string serialize_caption(const StructuredCaption& caption);

/// min(m, |locals|) distinct local sentence indices, in draw order.
std::vector<std::size_t> sample_local_indices(const StructuredCaption& caption, std::size_t m, Rng& rng);
std::vector<std::string> sample_local_sentences(const StructuredCaption& caption, std::size_t m, Rng& rng);

enum class GlobalTextPolicy { GlobalPart, SummaryPart };

const char* to_string(GlobalTextPolicy policy) noexcept;
GlobalTextPolicy parse_global_text_policy(const std::string& text);

const std::string& select_global_text(const StructuredCaption& caption,
                                      GlobalTextPolicy policy = GlobalTextPolicy::SummaryPart);

inline constexpr std::size_t kDefaultVocabSize = 4096;

struct TokenSequence {
    std::vector<std::size_t> ids;
    std::size_t vocab_size = kDefaultVocabSize;
};

std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// Lowercases, splits on whitespace and punctuation, and hashes each token
/// into `vocab_size` buckets with FNV-1a 64.
TokenSequence tokenize(std::string_view sentence, std::size_t vocab_size = kDefaultVocabSize);

} // namespace emocap
