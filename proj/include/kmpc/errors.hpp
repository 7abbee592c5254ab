#pragma once

#include <stdexcept>
#include <string>

namespace kmpc {

/// Inconsistent vector/matrix sizes or invalid indices.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed configuration or artifact files.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Base class for failures of a numerical procedure (blowup, non-convergence, singularity).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IntegrationError : public NumericalError {
public:
    IntegrationError(double time, double state_norm)
        : NumericalError("integration blowup at t = " + std::to_string(time) +
                         " s (state norm " + std::to_string(state_norm) + ")"),
          time_(time), state_norm_(state_norm) {}

    double time() const noexcept { return time_; }
    double state_norm() const noexcept { return state_norm_; }

private:
    double time_;
    double state_norm_;
};

class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, double residual)
        : NumericalError(what + " (final residual " + std::to_string(residual) + ")"),
          residual_(residual) {}

    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

namespace detail {

inline void require_size(const char* field, long actual, long expected) {
    if (actual != expected) {
        throw DimensionError(std::string(field) + ": expected size " + std::to_string(expected) +
                             ", got " + std::to_string(actual));
    }
}

}  // namespace detail
}  // namespace kmpc
