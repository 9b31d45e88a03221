#pragma once

#include <stdexcept>
#include <string>

namespace chorus {

// Error taxonomy; the CLI maps kinds onto exit codes
// (validation/parse/contract -> 2, capability/transport -> 3).
enum class ErrorKind {
    validation,   // bad input data, violated precondition, bad config
    parse,        // unparseable model output or file content
    contract,     // API misuse between modules (window overflow, mismatched setup)
    capability,   // backend cannot perform the requested operation
    transport,    // remote I/O failure after retries
    internal,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    static Error validation(std::string msg) { return {ErrorKind::validation, std::move(msg)}; }
    static Error parse(std::string msg) { return {ErrorKind::parse, std::move(msg)}; }
    static Error contract(std::string msg) { return {ErrorKind::contract, std::move(msg)}; }
    static Error capability(std::string msg) { return {ErrorKind::capability, std::move(msg)}; }
    static Error transport(std::string msg) { return {ErrorKind::transport, std::move(msg)}; }

private:
    ErrorKind kind_;
};

}  // namespace chorus
