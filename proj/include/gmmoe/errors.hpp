// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace gmmoe {

// Invalid hyperparameters, toggles or config files. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape contract violated (mismatched, empty or indivisible shapes).
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Spatial extent too small for the requested operation.
class InputTooSmallError : public ShapeError {
 public:
  using ShapeError::ShapeError;
};

// Dataset problems: missing directories, orphaned or mismatched pairs,
// undecodable images. CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PairingError : public DataError {
 public:
  using DataError::DataError;
};

class IntegrityError : public DataError {
 public:
  using DataError::DataError;
};

class DecodeError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite loss or other numeric breakdown during training. CLI exit code 4.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable, truncated or incompatible checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gmmoe
