#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace conceptforge {

/// Base error. `code` is a short machine-readable token (e.g. "shape_mismatch")
/// surfaced by the CLI as `ERROR <stage> <code>: <message>`.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& message) : Error("invalid_argument", message) {}
};

class ShapeMismatch : public Error {
public:
    explicit ShapeMismatch(const std::string& message) : Error("shape_mismatch", message) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& message) : Error("bad_format", message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io", message) {}
};

/// A concept ended up with an empty mask.
class MaskCreationFailure : public Error {
public:
    MaskCreationFailure(std::size_t concept_index, std::string concept_name, int attempts)
        : Error("mask_creation_failure",
                "empty mask for concept '" + concept_name + "' (index " + std::to_string(concept_index) +
                    ") after " + std::to_string(attempts) + " attempt(s)"),
          concept_index_(concept_index), concept_name_(std::move(concept_name)), attempts_(attempts) {}

    std::size_t concept_index() const noexcept { return concept_index_; }
    const std::string& concept_name() const noexcept { return concept_name_; }
    int attempts() const noexcept { return attempts_; }

private:
    std::size_t concept_index_;
    std::string concept_name_;
    int attempts_;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw InvalidArgument(message);
}

}  // namespace conceptforge
