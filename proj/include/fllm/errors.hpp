#pragma once

#include <stdexcept>
#include <string>

namespace fllm {

// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape/rank mismatch between tensors.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Token id or index outside the valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

// Sequence longer than the model supports.
class LengthError : public Error {
public:
    using Error::Error;
};

// Invalid model/adapter/experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// API contract violation (wrong call order, missing gradient, non-scalar loss).
class ContractError : public Error {
public:
    using Error::Error;
};

// Operation not valid for the object's current state (e.g. double merge).
class StateError : public Error {
public:
    using Error::Error;
};

// Federation protocol violation (mismatched participants, payload lengths).
class ProtocolError : public Error {
public:
    using Error::Error;
};

// Dataset problems (empty shard, bad split).
class DataError : public Error {
public:
    using Error::Error;
};

// Watermark key does not fit the adapters it is applied to.
class KeyError : public Error {
public:
    using Error::Error;
};

// File parse/read/write failures.
class IoError : public Error {
public:
    using Error::Error;
};

// Requested feature is intentionally not supported.
class UnsupportedError : public Error {
public:
    using Error::Error;
};

// A federation round had to be aborted (e.g. missing secure-agg participant).
class AbortError : public Error {
public:
    using Error::Error;
};

}  // namespace fllm
