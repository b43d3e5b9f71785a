#pragma once

#include <stdexcept>
#include <string>

namespace occurate {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind { Config = 2, Data = 3, Numeric = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

    int exit_code() const { return static_cast<int>(kind_); }

    const char* code_name() const {
        switch (kind_) {
            case ErrorKind::Config: return "E_CONFIG";
            case ErrorKind::Data: return "E_DATA";
            case ErrorKind::Numeric: return "E_NUMERIC";
        }
        return "E_UNKNOWN";
    }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void config_error(const std::string& msg) {
    throw Error(ErrorKind::Config, msg);
}

[[noreturn]] inline void data_error(const std::string& msg) {
    throw Error(ErrorKind::Data, msg);
}

[[noreturn]] inline void numeric_error(const std::string& msg) {
    throw Error(ErrorKind::Numeric, msg);
}

} // namespace occurate
