// SPDX-License-Identifier: Apache-2.0
#pragma once

// Exact computations over explicit models: expected acceptance lengths for
// both verifiers, the coupling upper bound, Bernoulli/binomial closed forms,
// and exhaustive enumeration of the distributions the verifiers induce.
//
// Everything here enumerates; each entry point enforces a hard atom budget
// and throws BudgetExceeded instead of sampling.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "blockverify/correction.hpp"
#include "blockverify/model.hpp"
#include "blockverify/verification.hpp"

namespace blockverify {

inline constexpr double kEnumerationBudget = 1e6;

/// Throws unless vocab_size^length <= budget.
inline void check_budget(std::size_t vocab_size, std::size_t length, double budget = kEnumerationBudget) {
  const double atoms = std::pow(static_cast<double>(vocab_size), static_cast<double>(length));
  if (atoms > budget) {
    throw BudgetExceeded("enumeration of " + std::to_string(vocab_size) + "^" + std::to_string(length) +
                         " sequences exceeds budget " + std::to_string(static_cast<long long>(budget)));
  }
}

inline void check_pair(const ArModel& small, const ArModel& big) {
  if (!(small.vocab() == big.vocab())) throw ConfigError("small and big vocab differ");
}

// ----------------------------------------------------------------------------
// Distances and coupling cost
// ----------------------------------------------------------------------------

inline double tv_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("tv_distance: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

inline double tv_distance(const ProbVector& a, const ProbVector& b) { return tv_distance(a.values(), b.values()); }

/// beta(x, y): length of the longest common prefix.
inline std::size_t common_prefix_length(TokenSpan x, TokenSpan y) {
  const std::size_t n = std::min(x.size(), y.size());
  std::size_t i = 0;
  while (i < n && x[i] == y[i]) ++i;
  return i;
}

// ----------------------------------------------------------------------------
// Expected acceptance length, closed forms
// ----------------------------------------------------------------------------

/// sum_{l=1..L} sum_{x^l} prod_i min(M_s(x_i | x^{i-1}), M_b(x_i | x^{i-1})).
inline double expected_tau_token(const ArModel& small, const ArModel& big, std::size_t length,
                                 TokenSpan prefix = {}) {
  check_pair(small, big);
  check_budget(small.vocab().size(), length);
  TokenSeq ctx(prefix.begin(), prefix.end());
  std::function<double(std::size_t, double)> walk = [&](std::size_t depth, double mass) -> double {
    if (depth == length) return 0.0;
    const ProbVector s = small.conditional(ctx);
    const ProbVector b = big.conditional(ctx);
    double total = 0.0;
    for (Token x = 0; x < s.size(); ++x) {
      const double m = mass * std::min(s[x], b[x]);
      if (!(m > 0.0)) continue;
      ctx.push_back(x);
      total += m + walk(depth + 1, m);
      ctx.pop_back();
    }
    return total;
  };
  return walk(0, 1.0);
}

/// sum_{l=1..L} sum_{x^l} min(M_s(x^l), M_b(x^l)), carrying both joints in
/// log space down the prefix tree.
inline double expected_tau_block(const ArModel& small, const ArModel& big, std::size_t length,
                                 TokenSpan prefix = {}) {
  check_pair(small, big);
  check_budget(small.vocab().size(), length);
  TokenSeq ctx(prefix.begin(), prefix.end());
  std::function<double(std::size_t, LogProb, LogProb)> walk = [&](std::size_t depth, LogProb ls,
                                                                 LogProb lb) -> double {
    if (depth == length) return 0.0;
    const ProbVector s = small.conditional(ctx);
    const ProbVector b = big.conditional(ctx);
    double total = 0.0;
    for (Token x = 0; x < s.size(); ++x) {
      const LogProb ns = ls + step_log(s, x);
      const LogProb nb = lb + step_log(b, x);
      if (ns.is_zero() || nb.is_zero()) continue;  // min is zero on this whole subtree
      ctx.push_back(x);
      total += std::exp(std::min(ns.value(), nb.value())) + walk(depth + 1, ns, nb);
      ctx.pop_back();
    }
    return total;
  };
  return walk(0, LogProb::one(), LogProb::one());
}

/// All length-`length` continuations of `prefix` with their probability under
/// `model` (zero-probability sequences omitted).
inline std::map<TokenSeq, double> sequence_distribution(const ArModel& model, std::size_t length,
                                                        TokenSpan prefix = {}) {
  check_budget(model.vocab().size(), length);
  std::map<TokenSeq, double> out;
  TokenSeq ctx(prefix.begin(), prefix.end());
  TokenSeq seq;
  std::function<void(double)> walk = [&](double mass) {
    if (seq.size() == length) {
      out.emplace(seq, mass);
      return;
    }
    const ProbVector row = model.conditional(ctx);
    for (Token x = 0; x < row.size(); ++x) {
      if (!(row[x] > 0.0)) continue;
      ctx.push_back(x);
      seq.push_back(x);
      walk(mass * row[x]);
      seq.pop_back();
      ctx.pop_back();
    }
  };
  walk(1.0);
  return out;
}

/// The coupling upper bound sum_l sum_{x^l} min(M_s^l(x^l), M_b^l(x^l)),
/// with the l-step marginals obtained by summing full L-step joints over
/// their suffixes (not from the chain rule directly).
inline double coupling_upper_bound(const ArModel& small, const ArModel& big, std::size_t length,
                                   TokenSpan prefix = {}) {
  check_pair(small, big);
  const auto joint_s = sequence_distribution(small, length, prefix);
  const auto joint_b = sequence_distribution(big, length, prefix);
  std::vector<std::map<TokenSeq, std::pair<double, double>>> marginals(length + 1);
  auto accumulate = [&](const std::map<TokenSeq, double>& joint, bool is_small) {
    for (const auto& [seq, p] : joint) {
      for (std::size_t l = 1; l <= length; ++l) {
        auto& cell = marginals[l][TokenSeq(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(l))];
        (is_small ? cell.first : cell.second) += p;
      }
    }
  };
  accumulate(joint_s, true);
  accumulate(joint_b, false);
  double bound = 0.0;
  for (std::size_t l = 1; l <= length; ++l)
    for (const auto& [seq, pq] : marginals[l]) bound += std::min(pq.first, pq.second);
  return bound;
}

// ----------------------------------------------------------------------------
// Enumerating drafts
// ----------------------------------------------------------------------------

/// Calls fn(block, M_s(draft)) for every draft of positive small-model mass.
template <typename Fn>
void for_each_draft(const ArModel& small, const ArModel& big, std::size_t length, TokenSpan prefix, Fn&& fn) {
  check_pair(small, big);
  if (length == 0) throw ConfigError("block length must be >= 1");
  check_budget(small.vocab().size(), length);
  for (const auto& [draft, p] : sequence_distribution(small, length, prefix)) {
    fn(score_draft(small, big, prefix, draft), p);
  }
}

/// Exact distribution of tau for the token verifier, summing
/// P(tau = l | x^L) = prod_{i<=l} min(1, b/s) * (1 - min(1, b/s at l+1)) over drafts.
inline std::vector<double> exact_token_tau_distribution(const ArModel& small, const ArModel& big,
                                                        std::size_t length, TokenSpan prefix = {}) {
  std::vector<double> dist(length + 1, 0.0);
  for_each_draft(small, big, length, prefix, [&](const DraftBlock& b, double p) {
    double accepted = 1.0;
    for (std::size_t i = 0; i < length; ++i) {
      const double s = b.small_rows[i][b.draft[i]];
      const double r = std::min(1.0, b.big_rows[i][b.draft[i]] / s);
      dist[i] += p * accepted * (1.0 - r);
      accepted *= r;
    }
    dist[length] += p * accepted;
  });
  return dist;
}

/// Exact distribution of tau for the block verifier.
inline std::vector<double> exact_block_tau_distribution(const ArModel& small, const ArModel& big,
                                                        std::size_t length, TokenSpan prefix = {}) {
  std::vector<double> dist(length + 1, 0.0);
  for_each_draft(small, big, length, prefix, [&](const DraftBlock& b, double p) {
    const auto d = tau_distribution(b, Verifier::block);
    for (std::size_t l = 0; l <= length; ++l) dist[l] += p * d[l];
  });
  return dist;
}

inline double distribution_mean(std::span<const double> dist) {
  double m = 0.0;
  for (std::size_t l = 0; l < dist.size(); ++l) m += static_cast<double>(l) * dist[l];
  return m;
}

/// P(X^l = x^l, tau >= l) for the block verifier, keyed by x^l (l = 1..L).
inline std::map<TokenSeq, double> enumerate_block_accept_joint(const ArModel& small, const ArModel& big,
                                                               std::size_t length, TokenSpan prefix = {}) {
  std::map<TokenSeq, double> out;
  for_each_draft(small, big, length, prefix, [&](const DraftBlock& b, double p) {
    const auto d = tau_distribution(b, Verifier::block);
    double at_least = 0.0;
    for (std::size_t l = length; l >= 1; --l) {
      at_least += d[l];
      out[TokenSeq(b.draft.begin(), b.draft.begin() + static_cast<std::ptrdiff_t>(l))] += p * at_least;
    }
  });
  return out;
}

// ----------------------------------------------------------------------------
// Couplings and output distributions
// ----------------------------------------------------------------------------

using Coupling = std::map<std::pair<TokenSeq, TokenSeq>, double>;

/// The joint law of (X^L, Y^L) with X^L ~ M_s^L and Y^L = (X^tau, Z^{L-tau}),
/// integrating analytically over acceptance events and correction draws.
inline Coupling enumerate_coupling(const ModelPtr& small, const ModelPtr& big, std::size_t length,
                                   Verifier verifier, TokenSpan prefix = {}) {
  check_budget(small->vocab().size(), 2 * length);
  Coupling out;
  for_each_draft(*small, *big, length, prefix, [&](const DraftBlock& b, double p) {
    const auto dist = tau_distribution(b, verifier);
    for (std::size_t tau = 0; tau <= length; ++tau) {
      if (!(dist[tau] > 0.0)) continue;
      TokenSeq y(b.draft.begin(), b.draft.begin() + static_cast<std::ptrdiff_t>(tau));
      const double w = p * dist[tau];
      if (tau == length) {
        out[{b.draft, y}] += w;
        continue;
      }
      TokenSeq base(prefix.begin(), prefix.end());
      base.insert(base.end(), y.begin(), y.end());
      const Correction c = make_correction(b, tau, verifier);
      const auto next = std::make_shared<const CorrectionModel>(big, small, base, c);
      for (const auto& [z, pz] : sequence_distribution(*next, length - tau, base)) {
        TokenSeq full = y;
        full.insert(full.end(), z.begin(), z.end());
        out[{b.draft, full}] += w * pz;
      }
    }
  });
  return out;
}

/// Distribution of Y^L = (X^tau, Z^{L-tau}).
inline std::map<TokenSeq, double> enumerate_output_distribution(const ModelPtr& small, const ModelPtr& big,
                                                                std::size_t length, Verifier verifier,
                                                                TokenSpan prefix = {}) {
  std::map<TokenSeq, double> out;
  for (const auto& [xy, p] : enumerate_coupling(small, big, length, verifier, prefix)) out[xy.second] += p;
  return out;
}

struct BetaStats {
  double direct = 0.0;  // sum pi(x, y) beta(x, y)
  double tail = 0.0;    // sum_l P(beta >= l)
};

inline BetaStats coupling_beta(const Coupling& pi, std::size_t length) {
  BetaStats s;
  std::vector<double> at_least(length + 2, 0.0);
  for (const auto& [xy, p] : pi) {
    const std::size_t beta = common_prefix_length(xy.first, xy.second);
    s.direct += p * static_cast<double>(beta);
    for (std::size_t l = 1; l <= beta; ++l) at_least[l] += p;
  }
  for (std::size_t l = 1; l <= length; ++l) s.tail += at_least[l];
  return s;
}

/// Max absolute difference between two sparse distributions (missing = 0).
inline double max_abs_deviation(const std::map<TokenSeq, double>& a, const std::map<TokenSeq, double>& b) {
  double worst = 0.0;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    worst = std::max(worst, std::abs(v - (it == b.end() ? 0.0 : it->second)));
  }
  for (const auto& [k, v] : b)
    if (!a.contains(k)) worst = std::max(worst, std::abs(v));
  return worst;
}

// ----------------------------------------------------------------------------
// Whole decode loop
// ----------------------------------------------------------------------------

inline constexpr std::size_t kDecodeEnumerationBudget = 20'000'000;

/// Exact distribution of the first `horizon` output tokens of speculative
/// decoding, enumerating drafts, acceptance outcomes, free tokens, and the
/// correction targets of later iterations. Outputs that stop at E.O.S early
/// are padded with E.O.S.
inline std::map<TokenSeq, double> enumerate_decode_distribution(const ModelPtr& big, const ModelPtr& small,
                                                                TokenSpan prompt, std::size_t length,
                                                                Verifier verifier, std::size_t horizon) {
  check_pair(*small, *big);
  if (length == 0 || horizon == 0) throw ConfigError("block length and horizon must be >= 1");
  check_budget(small->vocab().size(), length);
  const Vocab& vocab = big->vocab();
  std::map<TokenSeq, double> out;
  std::size_t leaves = 0;

  auto record = [&](TokenSeq emitted, double p) {
    if (++leaves > kDecodeEnumerationBudget) throw BudgetExceeded("decode enumeration budget exceeded");
    if (emitted.size() < horizon) {
      if (!vocab.eos()) throw std::logic_error("decode ended early without E.O.S");
      emitted.resize(horizon, *vocab.eos());
    }
    emitted.resize(horizon);
    out[emitted] += p;
  };

  std::function<void(const TokenSeq&, const ModelPtr&, double)> iterate = [&](const TokenSeq& context,
                                                                              const ModelPtr& target,
                                                                              double mass) {
    for_each_draft(*small, *target, length, context, [&](const DraftBlock& b, double p_draft) {
      const auto dist = tau_distribution(b, verifier);
      for (std::size_t tau = 0; tau <= length; ++tau) {
        const double w = mass * p_draft * dist[tau];
        if (!(w > 0.0)) continue;
        TokenSeq base = context;
        base.insert(base.end(), b.draft.begin(), b.draft.begin() + static_cast<std::ptrdiff_t>(tau));
        TokenSeq emitted(base.begin() + static_cast<std::ptrdiff_t>(prompt.size()), base.end());
        if (vocab.contains_eos(TokenSpan(base).subspan(context.size()))) {
          record(std::move(emitted), w);
          continue;
        }
        const Correction c = make_correction(b, tau, verifier);
        ModelPtr next = next_target(target, small, base, c);
        for (Token z = 0; z < c.first_row.size(); ++z) {
          const double wz = w * c.first_row[z];
          if (!(wz > 0.0)) continue;
          TokenSeq ctx = base;
          ctx.push_back(z);
          const std::size_t produced = ctx.size() - prompt.size();
          if (vocab.is_eos(z) || produced >= horizon) {
            record(TokenSeq(ctx.begin() + static_cast<std::ptrdiff_t>(prompt.size()), ctx.end()), wz);
          } else {
            iterate(ctx, next, wz);
          }
        }
      }
    });
  };
  iterate(TokenSeq(prompt.begin(), prompt.end()), big, 1.0);
  return out;
}

// ----------------------------------------------------------------------------
// Bernoulli sources
// ----------------------------------------------------------------------------

/// Bin(n, p) pmf by repeated convolution with Ber(p).
inline std::vector<double> binomial_pmf(std::size_t n, double p) {
  std::vector<double> pmf{1.0};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> next(pmf.size() + 1, 0.0);
    for (std::size_t k = 0; k < pmf.size(); ++k) {
      next[k] += pmf[k] * (1.0 - p);
      next[k + 1] += pmf[k] * p;
    }
    pmf = std::move(next);
  }
  return pmf;
}

struct BernoulliCurves {
  std::vector<double> token;  // index L-1 holds the value for block length L
  std::vector<double> block;
};

inline constexpr std::size_t kMaxBernoulliLength = 64;

/// Expected accepted tokens for memoryless Ber(p) drafter / Ber(q) target:
/// token = sum_{l=1..L} (1 - |p - q|)^l, block = sum_{l=1..L} (1 - TV(Bin(l,p), Bin(l,q))).
/// `include_free_token` adds the l = 0 term (1) to both.
inline BernoulliCurves bernoulli_curves(double p, double q, std::size_t max_length,
                                        bool include_free_token = false) {
  if (!(p >= 0.0 && p <= 1.0 && q >= 0.0 && q <= 1.0)) throw ConfigError("p and q must lie in [0, 1]");
  if (max_length == 0 || max_length > kMaxBernoulliLength) {
    throw ConfigError("L_max must be in [1, " + std::to_string(kMaxBernoulliLength) + "]");
  }
  BernoulliCurves c;
  const double agree = 1.0 - std::abs(p - q);
  double token = include_free_token ? 1.0 : 0.0;
  double block = token;
  double power = 1.0;
  for (std::size_t l = 1; l <= max_length; ++l) {
    power *= agree;
    token += power;
    block += 1.0 - tv_distance(binomial_pmf(l, p), binomial_pmf(l, q));
    c.token.push_back(token);
    c.block.push_back(block);
  }
  return c;
}

// ----------------------------------------------------------------------------
// Reports
// ----------------------------------------------------------------------------

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

struct AcceptanceReport {
  std::size_t length = 0;
  double exact_token = 0.0;
  double exact_block = 0.0;
  double upper_bound = 0.0;
  MeanSe mc_token;
  MeanSe mc_block;
  std::size_t n_trials = 0;
};

/// Exact columns of a report; Monte-Carlo columns are filled by the harness.
inline AcceptanceReport exact_report(const ArModel& small, const ArModel& big, std::size_t length,
                                     TokenSpan prefix = {}) {
  AcceptanceReport r;
  r.length = length;
  r.exact_token = expected_tau_token(small, big, length, prefix);
  r.exact_block = expected_tau_block(small, big, length, prefix);
  r.upper_bound = coupling_upper_bound(small, big, length, prefix);
  return r;
}

}  // namespace blockverify
