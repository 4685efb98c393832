#pragma once

#include <stdexcept>
#include <string>

namespace fever {

// Incompatible shapes passed to an op; message names the op and both shapes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed, or a solver failed numerically.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error(what), key_(std::move(key)) {}

    const std::string& key() const { return key_; }

private:
    std::string key_;
};

// Bad input data: manifests, images, labels, feature files.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or incompatible checkpoint file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A documented runtime invariant was observed broken.
class InvariantError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace fever
