#pragma once

#include <stdexcept>
#include <string>

namespace moekit {

// Bad library configuration (incompatible dimensions, invalid hyperparameters).
struct config_error : std::runtime_error {
    explicit config_error(const std::string & msg) : std::runtime_error(msg) {}
};

// Malformed runtime input (wrong image size, overlong sequence, ...).
struct input_error : std::runtime_error {
    explicit input_error(const std::string & msg) : std::runtime_error(msg) {}
};

// Data that violates a schema or record invariant.
struct validation_error : std::runtime_error {
    explicit validation_error(const std::string & msg) : std::runtime_error(msg) {}
};

// Text that could not be parsed; carries the byte offset of the failure.
struct parse_error : std::runtime_error {
    size_t position;
    parse_error(const std::string & msg, size_t pos)
        : std::runtime_error(msg + " (at byte " + std::to_string(pos) + ")"), position(pos) {}
};

} // namespace moekit
