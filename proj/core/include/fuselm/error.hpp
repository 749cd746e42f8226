#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fuselm {

// Root of the library's exception taxonomy. Everything thrown on purpose
// derives from this, so callers can catch fuselm::Error at the boundary and
// map subtypes to process exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape or rank mismatch in a tensor operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required (softmax inputs, gate
// scores, loss values).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autodiff graph, e.g. calling backward twice through the same
// expression tree.
class GraphStateError : public Error {
 public:
  using Error::Error;
};

// Sequence exceeds a configured context window.
class LengthError : public Error {
 public:
  using Error::Error;
};

// Character or token id outside the shared vocabulary.
class VocabError : public Error {
 public:
  using Error::Error;
};

// Cross-model token streams disagree where they must match position-for-
// position (fusion requires identical response spans).
class AlignmentError : public Error {
 public:
  using Error::Error;
};

// Batch sampler cannot satisfy its contract (e.g. per-domain quota larger
// than the corpus).
class SamplerError : public Error {
 public:
  using Error::Error;
};

// Unknown or inconsistent domain tag.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Training loss became non-finite. Carries the step at which it happened.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int64_t step)
      : Error(what), step_(step) {}
  int64_t step() const { return step_; }

 private:
  int64_t step_;
};

// Protocol violation on a stateful object (inference engine stepped out of
// order, resumed after finish, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

// Invalid or contradictory run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem / serialization failure, including checksum mismatches.
class IoError : public Error {
 public:
  using Error::Error;
};

// A loss was requested over zero unmasked positions.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

// Analysis asked for a quantity that is undefined on its input (e.g. average
// weights over an empty record set).
class AnalysisError : public Error {
 public:
  using Error::Error;
};

}  // namespace fuselm
