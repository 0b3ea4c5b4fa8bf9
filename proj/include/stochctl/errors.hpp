#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stochctl {

enum class ErrorKind {
    Config,
    Shape,
    Domain,
    Divergence,
    NotControllable,
    Reduction,
    Resource,
    BasisDegeneracy,
    Accuracy,
    Restriction,
    Precondition,
    Infeasible,
    UnsupportedSet,
    Input,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class DivergenceError : public Error {
public:
    DivergenceError(std::size_t step, const std::string& what)
        : Error(ErrorKind::Divergence, what + " (step " + std::to_string(step) + ")"), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what)
{
    if (!cond)
        throw Error(kind, what);
}

} // namespace stochctl
