// SPDX-License-Identifier: Apache-2.0
#pragma once

// Draft verification: the token-by-token rejection verifier and the
// block-level verifier with backward induction. Both are pure functions of a
// scored draft and a stream of uniform variates.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "blockverify/model.hpp"
#include "blockverify/random.hpp"
#include "blockverify/types.hpp"

namespace blockverify {

enum class Verifier { token, block };

inline const char* to_string(Verifier v) { return v == Verifier::token ? "token" : "block"; }

inline Verifier parse_verifier(const std::string& s) {
  if (s == "token") return Verifier::token;
  if (s == "block") return Verifier::block;
  throw ConfigError("unknown verifier '" + s + "' (expected token|block)");
}

// ----------------------------------------------------------------------------
// DraftBlock
// ----------------------------------------------------------------------------

/// A drafted block of L tokens with both models' rows at positions 0..L and
/// the joint log-probabilities of every draft prefix, relative to the block
/// start.
struct DraftBlock {
  TokenSeq draft;
  std::vector<ProbVector> small_rows;
  std::vector<ProbVector> big_rows;
  std::vector<LogProb> small_log_joints;
  std::vector<LogProb> big_log_joints;

  std::size_t length() const { return draft.size(); }

  void validate() const {
    const std::size_t n = draft.size() + 1;
    if (draft.empty()) throw std::invalid_argument("draft block is empty");
    if (small_rows.size() != n || big_rows.size() != n || small_log_joints.size() != n ||
        big_log_joints.size() != n) {
      throw std::invalid_argument("draft block needs L+1 rows and joints");
    }
    if (!(small_log_joints[0] == LogProb::one()) || !(big_log_joints[0] == LogProb::one())) {
      throw std::invalid_argument("draft block joints must start at log 1");
    }
  }
};

inline LogProb step_log(const ProbVector& row, Token t) { return LogProb::from_linear(row[t]); }

/// Assembles a block from already-computed rows, deriving the joints.
inline DraftBlock make_draft_block(TokenSeq draft, std::vector<ProbVector> small_rows,
                                   std::vector<ProbVector> big_rows) {
  DraftBlock b{std::move(draft), std::move(small_rows), std::move(big_rows), {}, {}};
  if (b.small_rows.size() != b.draft.size() + 1 || b.big_rows.size() != b.draft.size() + 1) {
    throw std::invalid_argument("draft block needs L+1 rows");
  }
  b.small_log_joints.assign(1, LogProb::one());
  b.big_log_joints.assign(1, LogProb::one());
  for (std::size_t i = 0; i < b.draft.size(); ++i) {
    b.small_log_joints.push_back(b.small_log_joints[i] + step_log(b.small_rows[i], b.draft[i]));
    b.big_log_joints.push_back(b.big_log_joints[i] + step_log(b.big_rows[i], b.draft[i]));
  }
  return b;
}

/// Scores `draft` after `prefix` with both models (one pass each).
inline DraftBlock score_draft(const ArModel& small, const ArModel& big, TokenSpan prefix,
                              TokenSeq draft) {
  auto small_rows = small.score(prefix, draft);
  auto big_rows = big.score(prefix, draft);
  return make_draft_block(std::move(draft), std::move(small_rows), std::move(big_rows));
}

// ----------------------------------------------------------------------------
// Remaining / rejected mass and residual rows
// ----------------------------------------------------------------------------

/// p_remain and p_rej at a prefix, both multiplied by exp(-log_scale) where
/// log_scale = max(log M_b(x^i), log M_s(x^i)). Ratios of the scaled values
/// equal ratios of the true ones.
struct ResidualMasses {
  double remain = 0.0;
  double rej = 0.0;
  double log_scale = -std::numeric_limits<double>::infinity();

  double true_remain() const { return remain > 0.0 ? remain * std::exp(log_scale) : 0.0; }
  double true_rej() const { return rej > 0.0 ? rej * std::exp(log_scale) : 0.0; }
};

inline ResidualMasses residual_masses(LogProb big_joint, LogProb small_joint, const ProbVector& big_row,
                                      const ProbVector& small_row) {
  ResidualMasses m;
  m.log_scale = std::max(big_joint.value(), small_joint.value());
  if (m.log_scale == -std::numeric_limits<double>::infinity()) return m;
  const double wb = std::exp(big_joint.value() - m.log_scale);
  const double ws = std::exp(small_joint.value() - m.log_scale);
  for (std::size_t x = 0; x < big_row.size(); ++x) {
    const double d = wb * big_row[x] - ws * small_row[x];
    if (d > 0.0)
      m.remain += d;
    else
      m.rej -= d;
  }
  return m;
}

/// sum_x (M_b(x^i, x) - M_s(x^i, x))_+
inline double p_remain(LogProb big_joint, LogProb small_joint, const ProbVector& big_row,
                       const ProbVector& small_row) {
  return residual_masses(big_joint, small_joint, big_row, small_row).true_remain();
}

/// sum_x (M_s(x^i, x) - M_b(x^i, x))_+
inline double p_rej(LogProb big_joint, LogProb small_joint, const ProbVector& big_row,
                    const ProbVector& small_row) {
  return residual_masses(big_joint, small_joint, big_row, small_row).true_rej();
}

/// p_res^{x^i}(x) = (M_b(x^i, x) - M_s(x^i, x))_+ / p_remain(x^i).
inline ProbVector residual_row(LogProb big_joint, LogProb small_joint, const ProbVector& big_row,
                               const ProbVector& small_row) {
  const double scale = std::max(big_joint.value(), small_joint.value());
  if (scale == -std::numeric_limits<double>::infinity()) throw EmptyResidual("empty residual");
  const double wb = std::exp(big_joint.value() - scale);
  const double ws = std::exp(small_joint.value() - scale);
  std::vector<double> w(big_row.size());
  double total = 0.0;
  for (std::size_t x = 0; x < w.size(); ++x) {
    w[x] = std::max(0.0, wb * big_row[x] - ws * small_row[x]);
    total += w[x];
  }
  if (!(total > 0.0)) throw EmptyResidual("empty residual");
  for (double& v : w) v /= total;
  return ProbVector(std::move(w));
}

/// Token-level residual: (M_b(x | X^tau) - M_s(x | X^tau))_+, normalized.
inline ProbVector token_residual_row(const ProbVector& big_row, const ProbVector& small_row) {
  return residual_row(LogProb::one(), LogProb::one(), big_row, small_row);
}

// ----------------------------------------------------------------------------
// Outcome types
// ----------------------------------------------------------------------------

enum class CorrectionMode { plain, token_residual, block_residual };

/// Describes M_b,next after the accepted prefix X^tau. The free token is drawn
/// from `first_row`, which is computed from the block's cached rows only.
struct Correction {
  CorrectionMode mode = CorrectionMode::plain;
  /// Number of depths (counted from X^tau) served by residual rows.
  std::size_t depth_limit = 0;
  /// Joints of X^tau relative to the block start; used by block residuals.
  LogProb big_log_joint = LogProb::one();
  LogProb small_log_joint = LogProb::one();
  ProbVector first_row;
};

/// Counters for degenerate inputs the verifiers tolerate.
struct VerifyDiagnostics {
  std::size_t ratio_clamps = 0;        // 0/0 or x/0 ratios forced to 1
  std::size_t residual_fallbacks = 0;  // rows served from M_b because no residual mass existed
  double termination_gap = 0.0;        // |p_remain(empty) - p_rej(empty)|

  VerifyDiagnostics& operator+=(const VerifyDiagnostics& o) {
    ratio_clamps += o.ratio_clamps;
    residual_fallbacks += o.residual_fallbacks;
    termination_gap = std::max(termination_gap, o.termination_gap);
    return *this;
  }
};

struct VerifyOutcome {
  std::size_t tau = 0;
  TokenSeq accepted;
  Correction correction;
  VerifyDiagnostics diagnostics;
};

// ----------------------------------------------------------------------------
// Acceptance probabilities
// ----------------------------------------------------------------------------

/// exp(min(0, log_b - log_s)); -inf - -inf and x / 0 accept.
inline double clamped_ratio(LogProb log_b, LogProb log_s, VerifyDiagnostics* diag) {
  if (log_s.is_zero()) {
    if (diag) ++diag->ratio_clamps;
    return 1.0;
  }
  return std::exp(std::min(0.0, log_b.value() - log_s.value()));
}

/// a_i = min(1, M_b(X_i | X^{i-1}) / M_s(X_i | X^{i-1})) for i = 1..L (index i-1).
inline std::vector<double> token_accept_probs(const DraftBlock& b, VerifyDiagnostics* diag = nullptr) {
  std::vector<double> a(b.length());
  for (std::size_t i = 0; i < b.length(); ++i) {
    a[i] = clamped_ratio(step_log(b.big_rows[i], b.draft[i]), step_log(b.small_rows[i], b.draft[i]),
                         diag);
  }
  return a;
}

inline constexpr double kTerminationTolerance = 1e-8;

/// Block verifier acceptance probabilities, indexed by prefix length:
/// [L] is the whole-block test min(1, M_b(X^L) / M_s(X^L)); [k] for k < L is
/// the backward test min(1, p_remain(X^k) / p_rej(X^k)). [0] is always 1.
inline std::vector<double> block_accept_probs(const DraftBlock& b, VerifyDiagnostics* diag = nullptr) {
  const std::size_t len = b.length();
  std::vector<double> h(len + 1);
  h[len] = clamped_ratio(b.big_log_joints[len], b.small_log_joints[len], diag);
  for (std::size_t k = 0; k < len; ++k) {
    const auto m =
        residual_masses(b.big_log_joints[k], b.small_log_joints[k], b.big_rows[k], b.small_rows[k]);
    if (m.rej > 0.0) {
      h[k] = std::min(1.0, m.remain / m.rej);
    } else {
      h[k] = 1.0;
      if (diag) ++diag->ratio_clamps;
    }
    if (k == 0) {
      // Both joints are 1 here, so the two masses are the same TV distance.
      const double gap = std::abs(m.remain - m.rej);
      if (diag) diag->termination_gap = std::max(diag->termination_gap, gap);
      if (gap > kTerminationTolerance) {
        throw std::logic_error("p_remain(empty) != p_rej(empty): gap " + std::to_string(gap));
      }
      h[0] = 1.0;
    }
  }
  return h;
}

/// Exact P(tau = l | draft) for l = 0..L.
inline std::vector<double> tau_distribution(const DraftBlock& b, Verifier verifier) {
  const std::size_t len = b.length();
  std::vector<double> dist(len + 1, 0.0);
  if (verifier == Verifier::token) {
    const auto a = token_accept_probs(b);
    double alive = 1.0;
    for (std::size_t l = 0; l < len; ++l) {
      dist[l] = alive * (1.0 - a[l]);
      alive *= a[l];
    }
    dist[len] = alive;
  } else {
    const auto h = block_accept_probs(b);
    dist[len] = h[len];
    double rejected = 1.0 - h[len];
    for (std::size_t k = len; k-- > 0;) {
      dist[k] = rejected * h[k];
      rejected *= 1.0 - h[k];
    }
  }
  return dist;
}

// ----------------------------------------------------------------------------
// Corrections
// ----------------------------------------------------------------------------

/// M_b,next for a given outcome tau.
inline Correction make_correction(const DraftBlock& b, std::size_t tau, Verifier verifier) {
  const std::size_t len = b.length();
  if (tau > len) throw std::out_of_range("tau > L");
  Correction c;
  if (tau == len) {
    c.mode = CorrectionMode::plain;
    c.first_row = b.big_rows[len];
    return c;
  }
  if (verifier == Verifier::token) {
    c.mode = CorrectionMode::token_residual;
    c.depth_limit = 1;
    c.first_row = token_residual_row(b.big_rows[tau], b.small_rows[tau]);
    return c;
  }
  c.mode = CorrectionMode::block_residual;
  c.depth_limit = len - tau;
  c.big_log_joint = b.big_log_joints[tau];
  c.small_log_joint = b.small_log_joints[tau];
  try {
    c.first_row = residual_row(c.big_log_joint, c.small_log_joint, b.big_rows[tau], b.small_rows[tau]);
  } catch (const EmptyResidual&) {
    // Accepting a prefix with p_remain = 0 contradicts having rejected the
    // longer prefixes.
    throw std::logic_error("block verifier accepted prefix of length " + std::to_string(tau) +
                           " with no remaining mass");
  }
  return c;
}

// ----------------------------------------------------------------------------
// Verifiers
// ----------------------------------------------------------------------------

/// Token verification with explicit variates eta_1..eta_L.
inline VerifyOutcome token_verify_with(const DraftBlock& b, std::span<const double> etas) {
  b.validate();
  if (etas.size() != b.length()) throw std::invalid_argument("token_verify needs L variates");
  VerifyOutcome out;
  const auto a = token_accept_probs(b, &out.diagnostics);
  std::size_t tau = 0;
  while (tau < b.length() && etas[tau] <= a[tau]) ++tau;
  out.tau = tau;
  out.accepted.assign(b.draft.begin(), b.draft.begin() + static_cast<std::ptrdiff_t>(tau));
  out.correction = make_correction(b, tau, Verifier::token);
  return out;
}

/// Block verification with explicit variates eta_0..eta_L.
inline VerifyOutcome block_verify_with(const DraftBlock& b, std::span<const double> etas) {
  b.validate();
  const std::size_t len = b.length();
  if (etas.size() != len + 1) throw std::invalid_argument("block_verify needs L+1 variates");
  VerifyOutcome out;
  const auto h = block_accept_probs(b, &out.diagnostics);
  std::size_t tau = 0;
  if (etas[0] <= h[len]) {
    tau = len;
  } else {
    for (std::size_t i = 1; i <= len; ++i) {
      if (etas[i] <= h[len - i]) {
        tau = len - i;
        break;
      }
    }
  }
  out.tau = tau;
  out.accepted.assign(b.draft.begin(), b.draft.begin() + static_cast<std::ptrdiff_t>(tau));
  out.correction = make_correction(b, tau, Verifier::block);
  return out;
}

/// Consumes exactly L variates.
template <Random64 G>
VerifyOutcome token_verify(const DraftBlock& b, G& gen) {
  std::vector<double> etas(b.length());
  for (double& e : etas) e = uniform01(gen);
  return token_verify_with(b, etas);
}

/// Consumes exactly L+1 variates.
template <Random64 G>
VerifyOutcome block_verify(const DraftBlock& b, G& gen) {
  std::vector<double> etas(b.length() + 1);
  for (double& e : etas) e = uniform01(gen);
  return block_verify_with(b, etas);
}

template <Random64 G>
VerifyOutcome verify(const DraftBlock& b, Verifier v, G& gen) {
  return v == Verifier::token ? token_verify(b, gen) : block_verify(b, gen);
}

}  // namespace blockverify
