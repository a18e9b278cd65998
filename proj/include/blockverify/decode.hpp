// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <optional>
#include <utility>
#include <vector>

#include "blockverify/correction.hpp"
#include "blockverify/model.hpp"
#include "blockverify/random.hpp"
#include "blockverify/verification.hpp"

namespace blockverify {

struct IterationRecord {
  TokenSeq draft;
  std::size_t tau = 0;
  std::optional<Token> free_token;
  std::size_t big_calls = 1;
  std::size_t emitted = 0;
  bool partial = false;  // emission cut by max_tokens
};

struct DecodeTrace {
  std::vector<IterationRecord> iterations;
  /// Emitted tokens, cut after the first E.O.S and at max_tokens.
  TokenSeq output;
  /// Accepted and free tokens exactly as produced (absorbed E.O.S kept).
  TokenSeq raw;
  std::size_t serial_calls = 0;
  bool length_limited = false;
  bool eos_reached = false;
  VerifyDiagnostics diagnostics;

  std::size_t tokens_emitted() const { return output.size(); }
};

struct DecodeOptions {
  std::size_t block_length = 4;
  Verifier verifier = Verifier::block;
  std::size_t max_tokens = 64;
};

/// Draws L tokens from `small` after `context`, keeping the L+1 rows seen.
template <Random64 G>
std::pair<TokenSeq, std::vector<ProbVector>> draft_with_rows(const ArModel& small, TokenSpan context,
                                                             std::size_t length, G& gen) {
  TokenSeq ctx(context.begin(), context.end());
  TokenSeq draft;
  std::vector<ProbVector> rows;
  draft.reserve(length);
  rows.reserve(length + 1);
  for (std::size_t i = 0; i < length; ++i) {
    rows.push_back(small.conditional(ctx));
    const Token t = sample_index(rows.back(), gen);
    draft.push_back(t);
    ctx.push_back(t);
  }
  rows.push_back(small.conditional(ctx));
  return {std::move(draft), std::move(rows)};
}

namespace detail {

inline std::size_t fallbacks_of(const ModelPtr& m) {
  std::size_t n = 0;
  for (const ArModel* p = m.get(); auto* c = dynamic_cast<const CorrectionModel*>(p); p = c->big().get()) {
    n += c->residual_fallbacks();
  }
  return n;
}

}  // namespace detail

/// Speculative decoding: draft L tokens, score once, verify, take the free
/// token from the correction row, and continue with the correction model as
/// the target. Stops after E.O.S or `max_tokens` emitted tokens.
template <Random64 G>
DecodeTrace spec_decode(const ModelPtr& big, const ModelPtr& small, TokenSpan prompt,
                        const DecodeOptions& opt, G& gen) {
  if (opt.block_length == 0) throw ConfigError("block length must be >= 1");
  if (opt.max_tokens == 0) throw ConfigError("max_tokens must be >= 1");
  if (!(big->vocab() == small->vocab())) throw ConfigError("small and big vocab differ");
  const Vocab& vocab = big->vocab();
  vocab.check(prompt);

  DecodeTrace trace;
  TokenSeq context(prompt.begin(), prompt.end());
  ModelPtr target = big;

  while (trace.output.size() < opt.max_tokens) {
    auto [draft, small_rows] = draft_with_rows(*small, context, opt.block_length, gen);
    const std::size_t fallbacks_before = detail::fallbacks_of(target);
    auto big_rows = target->score(context, draft);
    ++trace.serial_calls;
    trace.diagnostics.residual_fallbacks += detail::fallbacks_of(target) - fallbacks_before;

    const DraftBlock block = make_draft_block(draft, std::move(small_rows), std::move(big_rows));
    VerifyOutcome outcome = verify(block, opt.verifier, gen);
    trace.diagnostics += outcome.diagnostics;

    IterationRecord rec;
    rec.draft = std::move(draft);
    rec.tau = outcome.tau;

    TokenSeq emit = outcome.accepted;
    bool stop = false;
    if (vocab.contains_eos(outcome.accepted)) {
      stop = true;
    } else {
      // Drawn from cached rows; the target is not called again.
      const Token z = sample_index(outcome.correction.first_row, gen);
      rec.free_token = z;
      emit.push_back(z);
      stop = vocab.is_eos(z);
    }
    trace.raw.insert(trace.raw.end(), emit.begin(), emit.end());

    if (vocab.eos()) {
      auto it = std::find(emit.begin(), emit.end(), *vocab.eos());
      if (it != emit.end()) {
        emit.erase(it + 1, emit.end());
        trace.eos_reached = true;
      }
    }
    const std::size_t room = opt.max_tokens - trace.output.size();
    if (emit.size() > room) {
      emit.resize(room);
      rec.partial = true;
      trace.eos_reached = vocab.contains_eos(emit);
    }
    rec.emitted = emit.size();
    trace.output.insert(trace.output.end(), emit.begin(), emit.end());
    trace.iterations.push_back(std::move(rec));

    if (stop || trace.eos_reached || trace.output.size() >= opt.max_tokens) break;

    TokenSeq base = context;
    base.insert(base.end(), outcome.accepted.begin(), outcome.accepted.end());
    target = next_target(target, small, base, outcome.correction);
    context = std::move(base);
    context.push_back(*trace.iterations.back().free_token);
  }
  trace.length_limited = !trace.eos_reached && trace.output.size() >= opt.max_tokens;
  return trace;
}

/// Plain autoregressive sampling: one big-model call per token.
template <Random64 G>
DecodeTrace baseline_decode(const ModelPtr& big, TokenSpan prompt, std::size_t max_tokens, G& gen) {
  if (max_tokens == 0) throw ConfigError("max_tokens must be >= 1");
  const Vocab& vocab = big->vocab();
  vocab.check(prompt);
  DecodeTrace trace;
  TokenSeq context(prompt.begin(), prompt.end());
  while (trace.output.size() < max_tokens) {
    const Token t = sample_index(big->conditional(context), gen);
    ++trace.serial_calls;
    IterationRecord rec;
    rec.free_token = t;
    rec.emitted = 1;
    trace.iterations.push_back(rec);
    trace.output.push_back(t);
    trace.raw.push_back(t);
    context.push_back(t);
    if (vocab.is_eos(t)) {
      trace.eos_reached = true;
      break;
    }
  }
  trace.length_limited = !trace.eos_reached;
  return trace;
}

/// Emitted tokens per serial big-model call. With `exclude_partial`, a final
/// iteration cut by max_tokens is left out (unless it is the only one).
inline double block_efficiency(const DecodeTrace& trace, bool exclude_partial = false) {
  if (trace.iterations.empty() || trace.serial_calls == 0) {
    throw std::invalid_argument("block efficiency needs at least one iteration");
  }
  double tokens = static_cast<double>(trace.tokens_emitted());
  double calls = static_cast<double>(trace.serial_calls);
  const auto& last = trace.iterations.back();
  if (exclude_partial && last.partial && trace.iterations.size() > 1) {
    tokens -= static_cast<double>(last.emitted);
    calls -= static_cast<double>(last.big_calls);
  }
  return tokens / calls;
}

}  // namespace blockverify
