// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "blockverify/random.hpp"
#include "blockverify/types.hpp"

namespace blockverify {

/// A finite-vocabulary autoregressive model: a next-token distribution for
/// every prefix. Implementations are immutable and may be shared across
/// threads.
///
/// E.O.S absorption is enforced here rather than in subclasses: any prefix
/// containing the vocabulary's eos token gets a point mass on eos.
class ArModel {
 public:
  explicit ArModel(Vocab vocab) : vocab_(std::move(vocab)) {}
  virtual ~ArModel() = default;

  ArModel(const ArModel&) = delete;
  ArModel& operator=(const ArModel&) = delete;

  const Vocab& vocab() const { return vocab_; }
  virtual std::string kind() const = 0;

  ProbVector conditional(TokenSpan prefix) const {
    if (vocab_.contains_eos(prefix)) return ProbVector::point_mass(vocab_.size(), *vocab_.eos());
    return next_row(prefix);
  }

  /// Rows at `prefix + continuation[..i]` for i = 0..continuation.size().
  /// This is one parallel scoring pass over a drafted continuation.
  std::vector<ProbVector> score(TokenSpan prefix, TokenSpan continuation) const {
    std::vector<ProbVector> rows = score_rows(prefix, continuation);
    if (vocab_.eos()) {
      bool absorbed = vocab_.contains_eos(prefix);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (i > 0 && vocab_.is_eos(continuation[i - 1])) absorbed = true;
        if (absorbed) rows[i] = ProbVector::point_mass(vocab_.size(), *vocab_.eos());
      }
    }
    return rows;
  }

 protected:
  virtual ProbVector next_row(TokenSpan prefix) const = 0;

  virtual std::vector<ProbVector> score_rows(TokenSpan prefix, TokenSpan continuation) const {
    std::vector<ProbVector> rows;
    rows.reserve(continuation.size() + 1);
    TokenSeq ctx(prefix.begin(), prefix.end());
    ctx.reserve(prefix.size() + continuation.size());
    rows.push_back(next_row(ctx));
    for (Token t : continuation) {
      ctx.push_back(t);
      rows.push_back(next_row(ctx));
    }
    return rows;
  }

 private:
  Vocab vocab_;
};

using ModelPtr = std::shared_ptr<const ArModel>;

// ----------------------------------------------------------------------------
// Model families
// ----------------------------------------------------------------------------

/// Same row after every prefix.
class MemorylessModel final : public ArModel {
 public:
  MemorylessModel(Vocab vocab, ProbVector row) : ArModel(std::move(vocab)), row_(std::move(row)) {
    if (row_.size() != this->vocab().size()) throw ConfigError("memoryless row size != vocab size");
  }

  std::string kind() const override { return "memoryless"; }
  const ProbVector& row() const { return row_; }

 protected:
  ProbVector next_row(TokenSpan) const override { return row_; }

 private:
  ProbVector row_;
};

/// First-order chain: `initial` for the empty prefix, otherwise the
/// transition row of the last token.
class MarkovModel final : public ArModel {
 public:
  MarkovModel(Vocab vocab, ProbVector initial, std::vector<ProbVector> transition)
      : ArModel(std::move(vocab)), initial_(std::move(initial)), transition_(std::move(transition)) {
    const std::size_t n = this->vocab().size();
    if (initial_.size() != n) throw ConfigError("markov initial row size != vocab size");
    if (transition_.size() != n) throw ConfigError("markov transition must have vocab_size rows");
    for (const auto& r : transition_)
      if (r.size() != n) throw ConfigError("markov transition row size != vocab size");
  }

  std::string kind() const override { return "markov"; }
  const ProbVector& initial() const { return initial_; }
  const std::vector<ProbVector>& transition() const { return transition_; }

 protected:
  ProbVector next_row(TokenSpan prefix) const override {
    if (prefix.empty()) return initial_;
    return transition_.at(prefix.back());
  }

 private:
  ProbVector initial_;
  std::vector<ProbVector> transition_;
};

/// Variable-order table keyed by the last min(context_len, |prefix|) tokens.
/// Missing contexts fall back to the default row.
class TableModel final : public ArModel {
 public:
  using Rows = std::map<TokenSeq, ProbVector>;

  TableModel(Vocab vocab, std::size_t context_len, ProbVector default_row, Rows rows)
      : ArModel(std::move(vocab)),
        context_len_(context_len),
        default_row_(std::move(default_row)),
        rows_(std::move(rows)) {
    const std::size_t n = this->vocab().size();
    if (default_row_.size() != n) throw ConfigError("table default row size != vocab size");
    for (const auto& [ctx, row] : rows_) {
      if (row.size() != n) throw ConfigError("table row size != vocab size");
      if (ctx.size() > context_len_) throw ConfigError("table context longer than context_len");
      this->vocab().check(ctx);
    }
  }

  std::string kind() const override { return "table"; }
  std::size_t context_len() const { return context_len_; }
  const ProbVector& default_row() const { return default_row_; }
  const Rows& rows() const { return rows_; }

 protected:
  ProbVector next_row(TokenSpan prefix) const override {
    const std::size_t k = std::min(context_len_, prefix.size());
    const TokenSeq key(prefix.end() - static_cast<std::ptrdiff_t>(k), prefix.end());
    auto it = rows_.find(key);
    return it == rows_.end() ? default_row_ : it->second;
  }

 private:
  std::size_t context_len_;
  ProbVector default_row_;
  Rows rows_;
};

// ----------------------------------------------------------------------------
// Random table models
// ----------------------------------------------------------------------------

inline constexpr std::size_t kMaxRandomRows = std::size_t{1} << 20;

/// Table model with one row per context of length <= context_len, each row
/// drawn as normalized Gamma(concentration) variates (a symmetric Dirichlet).
/// Deterministic in `seed`.
inline std::shared_ptr<const TableModel> make_random_model(const Vocab& vocab, std::size_t context_len,
                                                          std::uint64_t seed, double concentration) {
  if (!(concentration > 0.0) || !std::isfinite(concentration)) {
    throw ConfigError("concentration must be positive and finite");
  }
  const std::size_t v = vocab.size();
  std::size_t total = 0, level = 1;
  for (std::size_t k = 0; k <= context_len; ++k) {
    total += level;
    if (total > kMaxRandomRows) throw ConfigError("random model table too large");
    if (k < context_len) level *= v;
  }

  Rng gen = make_rng(seed);
  std::gamma_distribution<double> gamma(concentration, 1.0);
  auto draw_row = [&] {
    std::vector<double> w(v);
    double sum = 0.0;
    for (double& x : w) {
      x = gamma(gen);
      sum += x;
    }
    // Tiny concentrations can underflow every variate.
    if (!(sum > 0.0)) return ProbVector::point_mass(v, static_cast<Token>(gen() % v));
    return ProbVector::normalized(std::move(w));
  };

  TableModel::Rows rows;
  TokenSeq ctx;
  // Contexts in (length, lexicographic) order so the stream layout is fixed.
  for (std::size_t len = 0; len <= context_len; ++len) {
    ctx.assign(len, 0);
    while (true) {
      rows.emplace(ctx, draw_row());
      std::size_t pos = len;
      while (pos > 0 && ++ctx[pos - 1] == v) ctx[--pos] = 0;
      if (pos == 0) break;
    }
  }
  ProbVector fallback = rows.at(TokenSeq{});
  return std::make_shared<const TableModel>(vocab, context_len, std::move(fallback), std::move(rows));
}

// ----------------------------------------------------------------------------
// Joint probabilities and sampling
// ----------------------------------------------------------------------------

/// log M(seq | prefix) = sum of log conditionals along seq.
inline LogProb joint_log_prob(const ArModel& model, TokenSpan seq, TokenSpan prefix = {}) {
  if (seq.empty()) return LogProb::one();
  const auto rows = model.score(prefix, seq.first(seq.size() - 1));
  LogProb total = LogProb::one();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const double p = rows[i][seq[i]];
    if (!(p > 0.0)) return LogProb::zero();
    total += LogProb(std::log(p));
  }
  return total;
}

/// Draws `length` tokens autoregressively after `prefix`.
template <Random64 G>
TokenSeq sample_block(const ArModel& model, TokenSpan prefix, std::size_t length, G& gen) {
  if (length == 0) throw ConfigError("block length must be >= 1");
  TokenSeq ctx(prefix.begin(), prefix.end());
  TokenSeq out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    const Token t = sample_index(model.conditional(ctx), gen);
    out.push_back(t);
    ctx.push_back(t);
  }
  return out;
}

}  // namespace blockverify
