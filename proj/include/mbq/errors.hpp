#pragma once

#include <stdexcept>
#include <string>

namespace mbq {

// Shape mismatches between operands (rows/cols/lengths).
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Value outside the operation's admissible domain (non-finite input,
// nonpositive scale factor, negative weight, ...).
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// Invalid configuration (unsupported bit-width, empty search grid,
// incompatible mode/granularity pairing, ...).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed serialized data (tensor files, packed blobs, checkpoints).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training diverged or could not proceed.
struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mbq
