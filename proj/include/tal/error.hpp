#pragma once

#include <stdexcept>
#include <string>

namespace tal {

/// Malformed argument passed to a pure operation (degenerate interval, bad count...).
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Configuration value violates its section's invariants.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& section, const std::string& field, const std::string& what)
        : std::runtime_error(section + "." + field + ": " + what), section_(section), field_(field) {}

    const std::string& section() const noexcept { return section_; }
    const std::string& field() const noexcept { return field_; }

private:
    std::string section_;
    std::string field_;
};

/// Tensor shapes disagree with what a model was built for.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training diverged or could not start.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace tal
