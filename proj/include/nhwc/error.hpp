#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nhwc {

// Exit codes used by the CLI: 0 success, 2 invalid input, 3 numerical, 4 I/O.
enum class ExitCode : int {
    ok = 0,
    invalid_input = 2,
    numerical = 3,
    io = 4,
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

class InvalidInputError : public Error {
public:
    explicit InvalidInputError(const std::string& msg) : Error(ExitCode::invalid_input, msg) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error(ExitCode::numerical, msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(ExitCode::io, msg) {}
};

// Thrown when an assembled LM sequence does not fit the model context.
class SequenceTooLongError : public InvalidInputError {
public:
    SequenceTooLongError(std::size_t length, std::size_t limit)
        : InvalidInputError("sequence too long: " + std::to_string(length) + " > max " +
                            std::to_string(limit)),
          length_(length) {}
    std::size_t length() const noexcept { return length_; }

private:
    std::size_t length_;
};

} // namespace nhwc
