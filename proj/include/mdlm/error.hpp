#pragma once

#include <stdexcept>
#include <string>

namespace mdlm {

// Every failure raised by the library derives from Error so callers can catch
// one type at the boundary (the CLI does exactly that).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class LengthError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

// Raised by exact enumeration oracles when the requested size would explode.
class RefusalError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient during optimisation.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace mdlm
