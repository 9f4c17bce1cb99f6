#pragma once

#include <stdexcept>
#include <string>

namespace muvo {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// validation-style errors exit 1, runtime/divergence errors exit 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class InvalidConfig : public Error {
public:
    using Error::Error;
};

class DegenerateInput : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

class CorruptFile : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

}  // namespace muvo
