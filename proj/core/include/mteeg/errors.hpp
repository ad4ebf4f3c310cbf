#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mteeg {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TaskError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ScopeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised by binary readers (checkpoints, recordings); carries the byte offset
// at which parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& msg, std::uint64_t offset)
        : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

}  // namespace mteeg
