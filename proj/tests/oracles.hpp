// SPDX-License-Identifier: Apache-2.0
#pragma once

// Brute-force reference implementations used only by the tests. They work in
// linear space on plain vectors and share no code with the library beyond
// ArModel::conditional, so agreement with the library is a real cross-check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <vector>

#include "blockverify/model.hpp"

namespace oracle {

using blockverify::ModelPtr;
using blockverify::Token;
using blockverify::TokenSeq;

using Row = std::vector<double>;
using Dist = std::map<TokenSeq, double>;
/// Conditional row as a function of the absolute context.
using CondFn = std::function<Row(const TokenSeq&)>;

inline CondFn as_fn(const ModelPtr& m) {
  return [m](const TokenSeq& ctx) {
    const auto r = m->conditional(ctx);
    return Row(r.begin(), r.end());
  };
}

inline TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

inline TokenSeq head(const TokenSeq& s, std::size_t n) { return TokenSeq(s.begin(), s.begin() + n); }

/// P(seq | start) as a product of conditionals.
inline double joint(const CondFn& f, const TokenSeq& start, const TokenSeq& seq) {
  double p = 1.0;
  TokenSeq ctx = start;
  for (Token t : seq) {
    p *= f(ctx)[t];
    ctx.push_back(t);
  }
  return p;
}

inline std::vector<TokenSeq> all_sequences(std::size_t vocab, std::size_t n) {
  std::vector<TokenSeq> out{{}};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<TokenSeq> next;
    for (const auto& s : out)
      for (Token t = 0; t < vocab; ++t) {
        TokenSeq e = s;
        e.push_back(t);
        next.push_back(std::move(e));
      }
    out = std::move(next);
  }
  return out;
}

inline Dist product_distribution(const CondFn& f, std::size_t vocab, std::size_t n, const TokenSeq& start = {}) {
  Dist d;
  for (const auto& s : all_sequences(vocab, n)) d[s] = joint(f, start, s);
  return d;
}

inline double max_dev(const Dist& a, const Dist& b) {
  double worst = 0.0;
  for (const auto& [k, v] : a) worst = std::max(worst, std::abs(v - (b.contains(k) ? b.at(k) : 0.0)));
  for (const auto& [k, v] : b)
    if (!a.contains(k)) worst = std::max(worst, std::abs(v));
  return worst;
}

/// Sum over x of (big(y, x) - small(y, x))_+ with joints taken from `start`.
inline double remain_mass(const CondFn& small, const CondFn& big, const TokenSeq& start, const TokenSeq& y) {
  const double jb = joint(big, start, y), js = joint(small, start, y);
  const Row rb = big(concat(start, y)), rs = small(concat(start, y));
  double m = 0.0;
  for (std::size_t x = 0; x < rb.size(); ++x) m += std::max(0.0, jb * rb[x] - js * rs[x]);
  return m;
}

inline double rejected_mass(const CondFn& small, const CondFn& big, const TokenSeq& start, const TokenSeq& y) {
  return remain_mass(big, small, start, y);
}

/// Normalized positive part; empty when there is no positive mass.
inline Row residual(const CondFn& small, const CondFn& big, const TokenSeq& start, const TokenSeq& y) {
  const double jb = joint(big, start, y), js = joint(small, start, y);
  const Row rb = big(concat(start, y)), rs = small(concat(start, y));
  Row w(rb.size());
  double total = 0.0;
  for (std::size_t x = 0; x < rb.size(); ++x) total += w[x] = std::max(0.0, jb * rb[x] - js * rs[x]);
  if (!(total > 0.0)) return {};
  for (double& v : w) v /= total;
  return w;
}

inline std::vector<double> token_tau(const CondFn& small, const CondFn& big, const TokenSeq& start,
                                     const TokenSeq& x) {
  const std::size_t n = x.size();
  std::vector<double> d(n + 1, 0.0);
  double alive = 1.0;
  TokenSeq ctx = start;
  for (std::size_t i = 0; i < n; ++i) {
    const double h = std::min(1.0, big(ctx)[x[i]] / small(ctx)[x[i]]);
    d[i] = alive * (1.0 - h);
    alive *= h;
    ctx.push_back(x[i]);
  }
  d[n] = alive;
  return d;
}

inline std::vector<double> block_tau(const CondFn& small, const CondFn& big, const TokenSeq& start,
                                     const TokenSeq& x) {
  const std::size_t n = x.size();
  std::vector<double> d(n + 1, 0.0);
  d[n] = std::min(1.0, joint(big, start, x) / joint(small, start, x));
  double alive = 1.0 - d[n];
  for (std::size_t i = 1; i <= n; ++i) {
    const TokenSeq y = head(x, n - i);
    const double rej = rejected_mass(small, big, start, y);
    const double h = rej > 0.0 ? std::min(1.0, remain_mass(small, big, start, y) / rej) : 1.0;
    d[n - i] = alive * h;
    alive *= 1.0 - h;
  }
  return d;
}

/// Target for the next iteration after accepting `accepted` in a block of
/// length `length` that started at absolute context `start`.
inline CondFn next_target(const CondFn& big, const CondFn& small, const TokenSeq& start, const TokenSeq& accepted,
                          std::size_t length, bool block_mode) {
  if (accepted.size() == length) return big;
  const TokenSeq base = concat(start, accepted);
  return [=](const TokenSeq& ctx) -> Row {
    const bool extends = ctx.size() >= base.size() && std::equal(base.begin(), base.end(), ctx.begin());
    if (!extends) return big(ctx);
    if (!block_mode) {
      if (ctx.size() != base.size()) return big(ctx);
      const Row rb = big(ctx), rs = small(ctx);
      Row w(rb.size());
      double total = 0.0;
      for (std::size_t x = 0; x < rb.size(); ++x) total += w[x] = std::max(0.0, rb[x] - rs[x]);
      if (!(total > 0.0)) return rb;
      for (double& v : w) v /= total;
      return w;
    }
    if (ctx.size() - start.size() >= length) return big(ctx);
    Row r = residual(small, big, start, TokenSeq(ctx.begin() + start.size(), ctx.end()));
    return r.empty() ? big(ctx) : r;
  };
}

/// Law of (X^tau, Z^{L - tau}) for one verify step after `start`.
inline Dist verify_output(const CondFn& small, const CondFn& big, std::size_t vocab, std::size_t length,
                          bool block_mode, const TokenSeq& start = {}) {
  Dist out;
  for (const auto& x : all_sequences(vocab, length)) {
    const double px = joint(small, start, x);
    if (!(px > 0.0)) continue;
    const auto tau = block_mode ? block_tau(small, big, start, x) : token_tau(small, big, start, x);
    for (std::size_t t = 0; t <= length; ++t) {
      if (!(tau[t] > 0.0)) continue;
      const TokenSeq y = head(x, t);
      const CondFn next = next_target(big, small, start, y, length, block_mode);
      for (const auto& [z, pz] : product_distribution(next, vocab, length - t, concat(start, y))) {
        out[concat(y, z)] += px * tau[t] * pz;
      }
    }
  }
  return out;
}

/// Law of the first `horizon` emitted tokens of the full decode loop. Early
/// E.O.S stops are padded with E.O.S.
inline Dist decode_output(const ModelPtr& big_model, const ModelPtr& small_model, const TokenSeq& prompt,
                          std::size_t length, bool block_mode, std::size_t horizon) {
  const std::size_t vocab = big_model->vocab().size();
  const auto eos = big_model->vocab().eos();
  const CondFn small = as_fn(small_model);
  Dist out;
  auto record = [&](const TokenSeq& ctx, double p) {
    TokenSeq e(ctx.begin() + prompt.size(), ctx.end());
    if (e.size() < horizon) e.resize(horizon, eos.value());
    e.resize(horizon);
    out[e] += p;
  };
  auto has_eos = [&](const TokenSeq& s) { return eos && std::find(s.begin(), s.end(), *eos) != s.end(); };

  std::function<void(const TokenSeq&, const CondFn&, double)> step = [&](const TokenSeq& ctx, const CondFn& target,
                                                                         double mass) {
    for (const auto& x : all_sequences(vocab, length)) {
      const double px = joint(small, ctx, x);
      if (!(px > 0.0)) continue;
      const auto tau = block_mode ? block_tau(small, target, ctx, x) : token_tau(small, target, ctx, x);
      for (std::size_t t = 0; t <= length; ++t) {
        const double w = mass * px * tau[t];
        if (!(w > 0.0)) continue;
        const TokenSeq y = head(x, t);
        const TokenSeq base = concat(ctx, y);
        if (has_eos(y)) {
          record(base, w);
          continue;
        }
        const CondFn next = next_target(target, small, ctx, y, length, block_mode);
        const Row zrow = next(base);
        for (Token z = 0; z < vocab; ++z) {
          if (!(zrow[z] > 0.0)) continue;
          TokenSeq c2 = base;
          c2.push_back(z);
          if ((eos && z == *eos) || c2.size() - prompt.size() >= horizon) {
            record(c2, w * zrow[z]);
          } else {
            step(c2, next, w * zrow[z]);
          }
        }
      }
    }
  };
  step(prompt, as_fn(big_model), 1.0);
  return out;
}

/// sum_l sum_{x^l} prod_i min(small_i, big_i)
inline double token_expectation(const CondFn& small, const CondFn& big, std::size_t vocab, std::size_t length,
                                const TokenSeq& start = {}) {
  double e = 0.0;
  for (std::size_t l = 1; l <= length; ++l)
    for (const auto& x : all_sequences(vocab, l)) {
      double p = 1.0;
      TokenSeq ctx = start;
      for (Token t : x) {
        p *= std::min(small(ctx)[t], big(ctx)[t]);
        ctx.push_back(t);
      }
      e += p;
    }
  return e;
}

/// sum_l sum_{x^l} min(small(x^l), big(x^l))
inline double block_expectation(const CondFn& small, const CondFn& big, std::size_t vocab, std::size_t length,
                                const TokenSeq& start = {}) {
  double e = 0.0;
  for (std::size_t l = 1; l <= length; ++l)
    for (const auto& x : all_sequences(vocab, l)) e += std::min(joint(small, start, x), joint(big, start, x));
  return e;
}

/// C(n, k) p^k (1 - p)^(n - k) via lgamma.
inline double binom(std::size_t n, std::size_t k, double p) {
  if (p == 0.0) return k == 0 ? 1.0 : 0.0;
  if (p == 1.0) return k == n ? 1.0 : 0.0;
  const double lc = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
  return std::exp(lc + k * std::log(p) + (n - k) * std::log1p(-p));
}

inline double bernoulli_token(double p, double q, std::size_t length) {
  double e = 0.0;
  for (std::size_t l = 1; l <= length; ++l) e += std::pow(1.0 - std::abs(p - q), static_cast<double>(l));
  return e;
}

inline double bernoulli_block(double p, double q, std::size_t length) {
  double e = 0.0;
  for (std::size_t l = 1; l <= length; ++l) {
    double tv = 0.0;
    for (std::size_t k = 0; k <= l; ++k) tv += std::abs(binom(l, k, p) - binom(l, k, q));
    e += 1.0 - 0.5 * tv;
  }
  return e;
}

}  // namespace oracle
