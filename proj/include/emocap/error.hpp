#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace emocap {

enum class ErrorKind {
    ShapeMismatch,
    UnboundLeaf,
    NonScalarOutput,
    MissingSection,
    EmptySection,
    EmptySentence,
    EmptySequence,
    InvalidThreshold,
    InvalidK,
    EmptyDataset,
    ConfigInvalid,
    SpecInvalid,
    ParseError,
    InconsistentShape,
    EmptyVideo,
    LengthMismatch,
    InsufficientShots,
    IoError,
    NumericalFailure,
};

const char* to_string(ErrorKind kind) noexcept;

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message, std::optional<std::size_t> line = std::nullopt);

    ErrorKind kind() const noexcept { return kind_; }
    // 1-based line number for ParseError / InconsistentShape.
    std::optional<std::size_t> line() const noexcept { return line_; }

private:
    ErrorKind kind_;
    std::optional<std::size_t> line_;
};

} // namespace emocap
