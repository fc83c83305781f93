#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace meswitch {

enum class ErrorKind {
    invalid_argument,
    dimension_mismatch,
    non_finite,
    out_of_range,
    bad_magic,
    bad_version,
    truncated,
    digest_mismatch,
    duplicate,
    not_found,
    budget_exceeded,
    divergence,
    missing_coverage,
    io,
    protocol,
};

inline std::string_view kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::invalid_argument: return "invalid_argument";
        case ErrorKind::dimension_mismatch: return "dimension_mismatch";
        case ErrorKind::non_finite: return "non_finite";
        case ErrorKind::out_of_range: return "out_of_range";
        case ErrorKind::bad_magic: return "bad_magic";
        case ErrorKind::bad_version: return "bad_version";
        case ErrorKind::truncated: return "truncated";
        case ErrorKind::digest_mismatch: return "digest_mismatch";
        case ErrorKind::duplicate: return "duplicate";
        case ErrorKind::not_found: return "not_found";
        case ErrorKind::budget_exceeded: return "budget_exceeded";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::missing_coverage: return "missing_coverage";
        case ErrorKind::io: return "io";
        case ErrorKind::protocol: return "protocol";
    }
    return "unknown";
}

/// Every failure in the library is reported as an Error carrying a kind that
/// callers (and the CLI's one-line error output) can switch on.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, ErrorKind kind, const std::string& what) {
    if (!condition) {
        fail(kind, what);
    }
}

}  // namespace meswitch
