#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace crpo {

// Raised for malformed input, violated preconditions and invariant breaches.
// The CLI maps this to exit code 2; any other exception maps to 1.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Input error carrying a 1-based line number of the offending record.
class RecordError : public ValidationError {
public:
    RecordError(std::string path, std::size_t line, const std::string& what)
        : ValidationError(path + ":" + std::to_string(line) + ": " + what),
          path_(std::move(path)), line_(line) {}

    const std::string& path() const noexcept { return path_; }
    std::size_t line() const noexcept { return line_; }

private:
    std::string path_;
    std::size_t line_;
};

[[noreturn]] inline void fail(const std::string& what) { throw ValidationError(what); }

inline void require(bool cond, const std::string& what) {
    if (!cond) fail(what);
}

} // namespace crpo
