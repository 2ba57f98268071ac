#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dfm {

// Tensor shapes or widths that do not fit together.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf where finite values are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An API called outside its contract (non-scalar loss, empty context...).
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

// Dataset content that violates its schema or invariants.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed binary file; carries the byte offset where decoding failed.
struct FormatError : std::runtime_error {
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), reason(what), offset(offset) {}
    std::string reason;
    std::size_t offset;
};

}  // namespace dfm
