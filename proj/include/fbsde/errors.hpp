#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace fbsde {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidSpec : public Error {
public:
    using Error::Error;
};

class NonFiniteCoefficient : public Error {
public:
    using Error::Error;
};

class NonFiniteState : public Error {
public:
    using Error::Error;
};

class NonFiniteValue : public Error {
public:
    using Error::Error;
};

class NonFiniteCost : public Error {
public:
    using Error::Error;
};

class SingularRegression : public Error {
public:
    using Error::Error;
};

class ResourceLimit : public Error {
public:
    using Error::Error;
};

class IndexOutOfRange : public Error {
public:
    using Error::Error;
};

/// Raised when a Picard loop fails to reach its tolerance. Carries the
/// residual history so callers can report it.
class PicardDiverged : public Error {
public:
    PicardDiverged(const std::string& what, std::vector<double> residuals)
        : Error(what), residuals_(std::move(residuals)) {}

    const std::vector<double>& residuals() const noexcept { return residuals_; }

private:
    std::vector<double> residuals_;
};

} // namespace fbsde
