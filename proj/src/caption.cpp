#include "emocap/caption.hpp"

#include <cctype>

#include "emocap/error.hpp"

namespace emocap {

namespace {

std::string_view trim(std::string_view s) {
    const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

} // namespace

void validate_caption(const StructuredCaption& caption) {
    if (trim(caption.global_sentence).empty()) throw Error(ErrorKind::EmptySection, "Global");
    if (caption.local_sentences.empty()) throw Error(ErrorKind::EmptySection, "Local");
    for (const auto& s : caption.local_sentences)
        if (trim(s).empty()) throw Error(ErrorKind::EmptySection, "Local");
    if (trim(caption.summary_sentence).empty()) throw Error(ErrorKind::EmptySection, "Summary");
}

StructuredCaption parse_structured_caption(std::string_view text) {
    enum class Section { None, Global, Local, Summary };
    StructuredCaption caption;
    bool seen_global = false, seen_local = false, seen_summary = false;
    Section current = Section::None;

    for (auto raw : split_lines(text)) {
        const auto line = trim(raw);
        if (line.empty()) continue;
        if (starts_with(line, "Global:")) {
            if (seen_global) throw Error(ErrorKind::ParseError, "duplicate Global section");
            seen_global = true;
            current = Section::Global;
            caption.global_sentence = std::string(trim(line.substr(7)));
        } else if (starts_with(line, "Local:")) {
            if (seen_local) throw Error(ErrorKind::ParseError, "duplicate Local section");
            if (!trim(line.substr(6)).empty()) throw Error(ErrorKind::ParseError, "text after 'Local:' header");
            seen_local = true;
            current = Section::Local;
        } else if (starts_with(line, "Summary:")) {
            if (seen_summary) throw Error(ErrorKind::ParseError, "duplicate Summary section");
            seen_summary = true;
            current = Section::Summary;
            caption.summary_sentence = std::string(trim(line.substr(8)));
        } else if (current == Section::Local && starts_with(line, "-")) {
            caption.local_sentences.emplace_back(trim(line.substr(1)));
        } else {
            throw Error(ErrorKind::ParseError, "unexpected line '" + std::string(line) + "'");
        }
    }

    if (!seen_global) throw Error(ErrorKind::MissingSection, "Global");
    if (!seen_local) throw Error(ErrorKind::MissingSection, "Local");
    if (!seen_summary) throw Error(ErrorKind::MissingSection, "Summary");
    validate_caption(caption);
    return caption;
}

std::string serialize_caption(const StructuredCaption& caption) {
    std::string out = "Global: " + caption.global_sentence + "\nLocal:\n";
    for (const auto& s : caption.local_sentences) out += "- " + s + "\n";
    out += "Summary: " + caption.summary_sentence;
    return out;
}

std::vector<std::size_t> sample_local_indices(const StructuredCaption& caption, std::size_t m, Rng& rng) {
    if (m == 0) throw Error(ErrorKind::ConfigInvalid, "local sample count must be at least 1");
    return rng.sample_without_replacement(caption.local_sentences.size(), m);
}

std::vector<std::string> sample_local_sentences(const StructuredCaption& caption, std::size_t m, Rng& rng) {
    std::vector<std::string> out;
    for (auto i : sample_local_indices(caption, m, rng)) out.push_back(caption.local_sentences[i]);
    return out;
}

const char* to_string(GlobalTextPolicy policy) noexcept {
    return policy == GlobalTextPolicy::GlobalPart ? "global" : "summary";
}

GlobalTextPolicy parse_global_text_policy(const std::string& text) {
    if (text == "global") return GlobalTextPolicy::GlobalPart;
    if (text == "summary") return GlobalTextPolicy::SummaryPart;
    throw Error(ErrorKind::ConfigInvalid, "global text policy must be 'global' or 'summary', got '" + text + "'");
}

const std::string& select_global_text(const StructuredCaption& caption, GlobalTextPolicy policy) {
    return policy == GlobalTextPolicy::GlobalPart ? caption.global_sentence : caption.summary_sentence;
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

TokenSequence tokenize(std::string_view sentence, std::size_t vocab_size) {
    if (vocab_size == 0) throw Error(ErrorKind::ConfigInvalid, "vocabulary size must be positive");
    TokenSequence seq;
    seq.vocab_size = vocab_size;
    std::string token;
    auto flush = [&] {
        if (token.empty()) return;
        seq.ids.push_back(static_cast<std::size_t>(fnv1a64(token) % vocab_size));
        token.clear();
    };
    for (char ch : sentence) {
        const auto c = static_cast<unsigned char>(ch);
        // Bytes >= 0x80 (UTF-8 continuation/lead bytes) stay inside tokens.
        if (c >= 0x80 || std::isalnum(c)) token.push_back(static_cast<char>(std::tolower(c)));
        else flush();
    }
    flush();
    if (seq.ids.empty()) throw Error(ErrorKind::EmptySentence, "no tokens in '" + std::string(sentence) + "'");
    return seq;
}

} // namespace emocap
