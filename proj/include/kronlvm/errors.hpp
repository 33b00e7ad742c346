#pragma once

#include <stdexcept>
#include <string>

namespace kronlvm {

// Exit-code classes used by the CLI: validation (1), numerical (2), IO (3).
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace kronlvm
