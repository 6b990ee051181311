#pragma once

// Error types shared across the engine. Contract violations and rare
// geometric degeneracies are exceptions; routine per-frame failures
// (tracking/mapping/loop correction) are exceptions too so the pipeline
// can count and escalate them uniformly.

#include <stdexcept>
#include <string>

namespace ctslam {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// liegroups
struct AngleNearPi : Error {
  explicit AngleNearPi(const std::string& msg) : Error(msg) {}
};

// trajectory
struct TooFewControlPoses : Error {
  explicit TooFewControlPoses(const std::string& msg) : Error(msg) {}
};
struct OutOfDomain : Error {
  explicit OutOfDomain(const std::string& msg) : Error(msg) {}
};
struct IndexOutOfRange : Error {
  explicit IndexOutOfRange(const std::string& msg) : Error(msg) {}
};

// camerarig
struct BehindCamera : Error {
  explicit BehindCamera(const std::string& msg) : Error(msg) {}
};
struct DegenerateGeometry : Error {
  explicit DegenerateGeometry(const std::string& msg) : Error(msg) {}
};
struct NegativeDepth : Error {
  explicit NegativeDepth(const std::string& msg) : Error(msg) {}
};

// matching
struct TooFewMatches : Error {
  explicit TooFewMatches(const std::string& msg) : Error(msg) {}
};

// worldstate
struct EmptyWindow : Error {
  explicit EmptyWindow(const std::string& msg) : Error(msg) {}
};

// nlls
struct NumericalFailure : Error {
  explicit NumericalFailure(const std::string& msg) : Error(msg) {}
};

// tracking
struct MissingHistory : Error {
  explicit MissingHistory(const std::string& msg) : Error(msg) {}
};
struct TrackingFailure : Error {
  explicit TrackingFailure(const std::string& msg) : Error(msg) {}
};

// mapping
struct MappingFailure : Error {
  explicit MappingFailure(const std::string& msg) : Error(msg) {}
};

// loopclosure
struct NoScenario : Error {
  explicit NoScenario(const std::string& msg) : Error(msg) {}
};
struct CorrectionFailure : Error {
  explicit CorrectionFailure(const std::string& msg) : Error(msg) {}
};

// simeval
struct NoOverlap : Error {
  explicit NoOverlap(const std::string& msg) : Error(msg) {}
};

// pipeline
struct InitFailure : Error {
  explicit InitFailure(const std::string& msg) : Error(msg) {}
};
struct InvalidInput : Error {
  explicit InvalidInput(const std::string& msg) : Error(msg) {}
};

}  // namespace ctslam
