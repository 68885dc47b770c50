#pragma once

#include <stdexcept>
#include <string>

namespace mw {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { input = 2, capability = 3, consistency = 4, numeric = 5 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

inline Error input_error(const std::string& msg) { return {ErrorKind::input, msg}; }
inline Error capability_error(const std::string& msg) { return {ErrorKind::capability, msg}; }
inline Error consistency_error(const std::string& msg) { return {ErrorKind::consistency, msg}; }
inline Error numeric_error(const std::string& msg) { return {ErrorKind::numeric, msg}; }

} // namespace mw
