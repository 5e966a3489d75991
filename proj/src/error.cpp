#include "emocap/error.hpp"

namespace emocap {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::UnboundLeaf: return "UnboundLeaf";
        case ErrorKind::NonScalarOutput: return "NonScalarOutput";
        case ErrorKind::MissingSection: return "MissingSection";
        case ErrorKind::EmptySection: return "EmptySection";
        case ErrorKind::EmptySentence: return "EmptySentence";
        case ErrorKind::EmptySequence: return "EmptySequence";
        case ErrorKind::InvalidThreshold: return "InvalidThreshold";
        case ErrorKind::InvalidK: return "InvalidK";
        case ErrorKind::EmptyDataset: return "EmptyDataset";
        case ErrorKind::ConfigInvalid: return "ConfigInvalid";
        case ErrorKind::SpecInvalid: return "SpecInvalid";
        case ErrorKind::ParseError: return "ParseError";
        case ErrorKind::InconsistentShape: return "InconsistentShape";
        case ErrorKind::EmptyVideo: return "EmptyVideo";
        case ErrorKind::LengthMismatch: return "LengthMismatch";
        case ErrorKind::InsufficientShots: return "InsufficientShots";
        case ErrorKind::IoError: return "IoError";
        case ErrorKind::NumericalFailure: return "NumericalFailure";
    }
    return "Unknown";
}

namespace {

std::string format_message(ErrorKind kind, const std::string& message, std::optional<std::size_t> line) {
    std::string out = to_string(kind);
    if (line) out += " (line " + std::to_string(*line) + ")";
    if (!message.empty()) out += ": " + message;
    return out;
}

} // namespace

Error::Error(ErrorKind kind, const std::string& message, std::optional<std::size_t> line)
    : std::runtime_error(format_message(kind, message, line)), kind_(kind), line_(line) {}

} // namespace emocap
