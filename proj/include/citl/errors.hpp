#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace citl {

// Invalid argument to a pure function (bad label, length mismatch, alpha out of range).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Conformal fitting failed (no calibration scores).
class CalibrationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid experiment, dataset or training configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite value encountered while training. Carries the coordinates of the failure.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what, long epoch = -1, long batch = -1, long example = -1)
        : std::runtime_error(what), epoch_(epoch), batch_(batch), example_(example) {}

    long epoch() const noexcept { return epoch_; }
    long batch() const noexcept { return batch_; }
    long example() const noexcept { return example_; }

private:
    long epoch_;
    long batch_;
    long example_;
};

}  // namespace citl
