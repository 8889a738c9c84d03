#pragma once

#include <stdexcept>
#include <string>

namespace margingap {

// Input or network shapes that do not line up.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Invalid arguments, configuration files, or forbidden experiment combinations.
// The CLI maps this family to exit code 2.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A quantity that would be used as a divisor (gradient norm, total variation,
// target variance) is numerically zero.
class DegenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training produced non-finite loss for several consecutive epochs.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, std::size_t epoch)
        : std::runtime_error(what), epoch_(epoch) {}

    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

// Anything else that goes wrong while running: empty filtered sets,
// malformed files, I/O.
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace margingap
