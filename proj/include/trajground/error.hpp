#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace trajground {

enum class ErrorCode {
  // navgraph
  UnknownEndpoint,
  SelfLoop,
  DuplicateEdge,
  UnknownNode,
  NoPath,
  NegativeRadius,
  // synthworld
  InfeasibleSpec,
  BadLandmarkIndex,
  BadViewIndex,
  // dataset
  EmptyPositiveSet,
  IoError,
  MalformedLine,
  InvariantViolation,
  // numerics / model
  ShapeMismatch,
  EmptyAxis,
  BadHeadCount,
  NonFiniteValue,
  TooManySteps,
  EmptyPrediction,
  // loss
  LengthMismatch,
  ProbOutOfRange,
  // trainer
  NonFiniteGradient,
  EmptyDataset,
  DivergedLoss,
  // evalcorrect
  StartMismatch,
  BadStep,
  // cli / recipes
  EmptyPath,
  UnknownCommand,
  ConfigError,
  AssertionFailed,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownEndpoint: return "UnknownEndpoint";
    case ErrorCode::SelfLoop: return "SelfLoop";
    case ErrorCode::DuplicateEdge: return "DuplicateEdge";
    case ErrorCode::UnknownNode: return "UnknownNode";
    case ErrorCode::NoPath: return "NoPath";
    case ErrorCode::NegativeRadius: return "NegativeRadius";
    case ErrorCode::InfeasibleSpec: return "InfeasibleSpec";
    case ErrorCode::BadLandmarkIndex: return "BadLandmarkIndex";
    case ErrorCode::BadViewIndex: return "BadViewIndex";
    case ErrorCode::EmptyPositiveSet: return "EmptyPositiveSet";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyAxis: return "EmptyAxis";
    case ErrorCode::BadHeadCount: return "BadHeadCount";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::TooManySteps: return "TooManySteps";
    case ErrorCode::EmptyPrediction: return "EmptyPrediction";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ProbOutOfRange: return "ProbOutOfRange";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::StartMismatch: return "StartMismatch";
    case ErrorCode::BadStep: return "BadStep";
    case ErrorCode::EmptyPath: return "EmptyPath";
    case ErrorCode::UnknownCommand: return "UnknownCommand";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::AssertionFailed: return "AssertionFailed";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code,
/// so callers and tests can branch on the kind rather than the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}
  Error(ErrorCode code, const std::string& message, std::size_t line)
      : std::runtime_error(std::string(to_string(code)) + ": line " + std::to_string(line) + ": " + message),
        code_(code),
        line_(line) {}

  ErrorCode code() const noexcept { return code_; }
  /// 1-based input line, for errors raised while parsing line-oriented files.
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> line_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace trajground
