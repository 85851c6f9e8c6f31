#pragma once

#include <stdexcept>
#include <string>

namespace qlora {

/// Base class for all library failures. The CLI maps it to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input, bad configuration, malformed files. The CLI maps it to exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

}  // namespace qlora
