#pragma once

#include <stdexcept>
#include <string>

namespace xsplain {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed input file (bad PLY header, missing field, bad magic...).
class FormatError : public Error {
public:
    using Error::Error;
};

// Well-formed file or structure carrying unusable values (NaN, bad label...).
class DataError : public Error {
public:
    using Error::Error;
};

// Invalid configuration value or inconsistent hyperparameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Tensor shape mismatch.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Out-of-range index (group id, voxel id, channel id).
class IndexError : public Error {
public:
    using Error::Error;
};

// Math-domain violation (negative probability mass, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// API misuse (backward twice, non-scalar root, empty batch...).
class UsageError : public Error {
public:
    using Error::Error;
};

// Filesystem failure, always carries the path.
class IoError : public Error {
public:
    using Error::Error;
};

// Optimization failure (NaN loss), carries the epoch index.
class TrainingError : public Error {
public:
    using Error::Error;
};

// Mutation of parameters that were frozen for stage 2.
class FrozenStateViolation : public Error {
public:
    using Error::Error;
};

// Prototype registry refers to a sample the dataset no longer has.
class RegistryError : public Error {
public:
    using Error::Error;
};

// Explanation asked for a voxel with no primitives in it.
class EmptySubsetError : public Error {
public:
    using Error::Error;
};

// A metric whose denominator vanished.
class DegenerateMetricError : public Error {
public:
    using Error::Error;
};

} // namespace xsplain
