// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace blockverify {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;
using TokenSpan = std::span<const Token>;

/// Absolute tolerance every ProbVector must satisfy on its total mass.
inline constexpr double kNormTolerance = 1e-9;

// ----------------------------------------------------------------------------
// Errors
// ----------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model parameters or spec files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An exhaustive enumeration would exceed its hard atom budget.
class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

/// A residual distribution was requested where no residual mass exists.
class EmptyResidual : public Error {
 public:
  using Error::Error;
};

// ----------------------------------------------------------------------------
// Vocab
// ----------------------------------------------------------------------------

/// Token alphabet. `eos`, when present, is absorbing in every model.
class Vocab {
 public:
  explicit Vocab(std::size_t size, std::optional<Token> eos = std::nullopt)
      : size_(size), eos_(eos) {
    if (size < 2) throw ConfigError("vocab size must be >= 2, got " + std::to_string(size));
    if (eos && *eos >= size) {
      throw ConfigError("eos token " + std::to_string(*eos) + " outside vocab of size " +
                        std::to_string(size));
    }
  }

  std::size_t size() const { return size_; }
  const std::optional<Token>& eos() const { return eos_; }
  bool is_eos(Token t) const { return eos_ && *eos_ == t; }

  bool contains_eos(TokenSpan seq) const {
    if (!eos_) return false;
    for (Token t : seq)
      if (t == *eos_) return true;
    return false;
  }

  void check(TokenSpan seq) const {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] >= size_) {
        throw ConfigError("token " + std::to_string(seq[i]) + " at position " + std::to_string(i) +
                          " outside vocab of size " + std::to_string(size_));
      }
    }
  }

  friend bool operator==(const Vocab&, const Vocab&) = default;

 private:
  std::size_t size_;
  std::optional<Token> eos_;
};

// ----------------------------------------------------------------------------
// ProbVector
// ----------------------------------------------------------------------------

/// A distribution over the vocabulary, stored in linear space.
class ProbVector {
 public:
  ProbVector() = default;

  /// Validates non-negativity and total mass within kNormTolerance.
  explicit ProbVector(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw ConfigError("probability vector is empty");
    double total = 0.0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      if (!(probs_[i] >= 0.0) || !std::isfinite(probs_[i])) {
        throw ConfigError("probability entry " + std::to_string(i) + " is negative or not finite");
      }
      total += probs_[i];
    }
    if (std::abs(total - 1.0) > kNormTolerance) {
      throw ConfigError("probability vector sums to " + std::to_string(total) + ", expected 1");
    }
  }

  /// Divides by the total. Throws if the total is not positive.
  static ProbVector normalized(std::vector<double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("negative or non-finite weight");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("weights have zero total mass");
    for (double& w : weights) w /= total;
    return ProbVector(std::move(weights));
  }

  static ProbVector point_mass(std::size_t size, Token at) {
    std::vector<double> p(size, 0.0);
    p.at(at) = 1.0;
    ProbVector out;
    out.probs_ = std::move(p);
    return out;
  }

  static ProbVector uniform(std::size_t size) {
    ProbVector out;
    out.probs_.assign(size, 1.0 / static_cast<double>(size));
    return out;
  }

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> values() const { return probs_; }
  auto begin() const { return probs_.begin(); }
  auto end() const { return probs_.end(); }

  friend bool operator==(const ProbVector&, const ProbVector&) = default;

 private:
  std::vector<double> probs_;
};

// ----------------------------------------------------------------------------
// LogProb
// ----------------------------------------------------------------------------

/// Natural-log probability; -inf encodes zero.
class LogProb {
 public:
  constexpr LogProb() = default;
  constexpr explicit LogProb(double value) : value_(value) {}

  static LogProb zero() { return LogProb(-std::numeric_limits<double>::infinity()); }
  static constexpr LogProb one() { return LogProb(0.0); }
  static LogProb from_linear(double p) { return p > 0.0 ? LogProb(std::log(p)) : zero(); }

  constexpr double value() const { return value_; }
  double linear() const { return std::exp(value_); }
  bool is_zero() const { return value_ == -std::numeric_limits<double>::infinity(); }

  LogProb& operator+=(LogProb other) {
    value_ += other.value_;
    return *this;
  }
  friend LogProb operator+(LogProb a, LogProb b) { return a += b; }
  friend bool operator==(LogProb, LogProb) = default;

 private:
  double value_ = 0.0;
};

}  // namespace blockverify
