#pragma once

#include <stdexcept>
#include <string>

namespace flowcf {

// Caller handed in something that violates a precondition.
struct invalid_input : std::invalid_argument {
    explicit invalid_input(const std::string& what) : std::invalid_argument(what) {}
};

// A file on disk does not match its declared layout.
struct format_error : std::runtime_error {
    format_error(const std::string& what, std::size_t byte_offset)
        : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

// An internal consistency check failed (e.g. a spectrum that should be
// Hermitian is not). Indicates a bug, not bad user input.
struct internal_error : std::logic_error {
    explicit internal_error(const std::string& what) : std::logic_error(what) {}
};

} // namespace flowcf
