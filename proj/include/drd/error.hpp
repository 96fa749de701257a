#pragma once

#include <stdexcept>
#include <string>

namespace drd {

// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, out-of-range indices and similar content problems.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Missing or malformed files on disk.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace drd
