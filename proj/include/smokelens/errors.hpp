#pragma once

#include <stdexcept>
#include <string>

namespace smokelens {

// Bad shapes, sizes or parameter values handed to a library call.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A dataset directory whose manifest and files disagree.
class CorruptDataset : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint that cannot be decoded or has the wrong version.
class InvalidCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File-system or codec failure (unreadable PNG, unwritable path, ...).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

}  // namespace smokelens
