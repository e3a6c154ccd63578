#pragma once

#include <stdexcept>
#include <string>

namespace posecal {

// Base class for every failure raised by the library. Callers that only care
// about "something went wrong" catch this; tests and the session layer catch
// the specific subclasses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A 3D point ended up at or behind the camera centre (Zc <= 0).
class BehindCameraError : public Error {
 public:
  using Error::Error;
};

// Collinear correspondences, parallel board poses, non-recoverable B matrix.
class DegenerateConfigurationError : public Error {
 public:
  using Error::Error;
};

// Fixed-point or iterative inversion did not reach tolerance.
class NonConvergenceError : public Error {
 public:
  using Error::Error;
};

class InsufficientFramesError : public Error {
 public:
  using Error::Error;
};

// Normal equations stay singular even after damping.
class SingularNormalEquationsError : public Error {
 public:
  using Error::Error;
};

// A free parameter is not constrained by the data (Schur block singular).
class UnobservableParameterError : public Error {
 public:
  using Error::Error;
};

// The board does not project fully inside the image.
class InvisiblePoseError : public Error {
 public:
  using Error::Error;
};

// Fewer than four corners detected.
class SparseDetectionError : public Error {
 public:
  using Error::Error;
};

// Operation invoked in the wrong session phase or with a rejected input.
class InvalidStateError : public Error {
 public:
  using Error::Error;
};

// Startup ended without a single fully visible board.
class NoVisibleBoardError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace posecal
