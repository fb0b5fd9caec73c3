#pragma once

#include <stdexcept>
#include <string>

namespace echoatt {

// Base class for all library errors. Subclasses map to distinct CLI exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or broadcast mismatch between tensors.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid user-supplied data: bad token ids, ragged samples, empty corpus.
struct InputError : Error {
    using Error::Error;
};

// API misuse: violated precondition (non-scalar loss, k < 2, step out of range).
struct ContractError : Error {
    using Error::Error;
};

// Mathematically degenerate input (zero-norm vector in cosine similarity).
struct DegenerateInputError : Error {
    using Error::Error;
};

// File system failures: missing, unreadable, or unwritable paths.
struct IoError : Error {
    using Error::Error;
};

// Config file failed to parse or validate.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace echoatt
