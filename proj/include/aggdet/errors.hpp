#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace aggdet {

/// Base of every error raised by the library. `kind()` is a stable token used
/// in machine-parseable CLI error lines.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error("contract", what) {}
};

class EmptyInputError : public Error {
public:
    explicit EmptyInputError(const std::string& what) : Error("empty_input", what) {}
};

class MissingSamplesError : public Error {
public:
    MissingSamplesError(int class_id, const std::string& what)
        : Error("missing_samples", what), class_id_(class_id) {}

    int class_id() const noexcept { return class_id_; }

private:
    int class_id_;
};

// File format errors. Each carries enough context to locate the fault.

class FormatError : public Error {
public:
    FormatError(std::string kind, const std::string& what) : Error(std::move(kind), what) {}
    explicit FormatError(const std::string& what) : Error("format", what) {}
};

class VersionError : public FormatError {
public:
    explicit VersionError(const std::string& what) : FormatError("version", what) {}
};

class DimensionError : public FormatError {
public:
    DimensionError(std::string image_id, const std::string& what)
        : FormatError("dimension", what), image_id_(std::move(image_id)) {}

    const std::string& image_id() const noexcept { return image_id_; }

private:
    std::string image_id_;
};

class NonFiniteError : public FormatError {
public:
    explicit NonFiniteError(const std::string& what) : FormatError("non_finite", what) {}
};

class TruncationError : public FormatError {
public:
    TruncationError(std::uint64_t offset, const std::string& what)
        : FormatError("truncated", what), offset_(offset) {}

    std::uint64_t byte_offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("io", what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error("usage", what) {}
};

}  // namespace aggdet
