#pragma once

#include <stdexcept>
#include <string>

namespace clgeo {

enum class ErrorKind {
    dimension,
    invalid_argument,
    capacity,
    numerical,
    io,
    config,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace clgeo
