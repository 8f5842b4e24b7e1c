#pragma once

#include <stdexcept>
#include <string>

namespace detox {

// Failure categories map one-to-one onto CLI exit codes.
enum class ErrorKind {
    config = 2,
    data = 3,
    remote = 4,
    invariant = 5,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct RemoteError : Error {
    explicit RemoteError(const std::string& what) : Error(ErrorKind::remote, what) {}
};

struct InvariantError : Error {
    explicit InvariantError(const std::string& what) : Error(ErrorKind::invariant, what) {}
};

}  // namespace detox
