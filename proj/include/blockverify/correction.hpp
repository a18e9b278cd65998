// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "blockverify/model.hpp"
#include "blockverify/verification.hpp"

namespace blockverify {

/// M_b,next as a model: residual rows for the first `depth_limit` depths after
/// the accepted prefix, the wrapped big model everywhere else.
///
/// Rows at fresh prefixes are computed from one scoring pass of each wrapped
/// model, starting at the base prefix, plus the joints stored in the
/// correction. No other model state is consulted.
class CorrectionModel final : public ArModel {
 public:
  CorrectionModel(ModelPtr big, ModelPtr small, TokenSeq base, Correction correction)
      : ArModel(big->vocab()),
        big_(std::move(big)),
        small_(std::move(small)),
        base_(std::move(base)),
        correction_(std::move(correction)) {
    if (correction_.mode == CorrectionMode::plain || correction_.depth_limit == 0) {
      throw std::invalid_argument("plain corrections are the big model itself");
    }
    if (!(small_->vocab() == vocab())) throw ConfigError("small and big vocab differ");
  }

  std::string kind() const override { return "residual-wrapper"; }
  const ModelPtr& big() const { return big_; }
  const ModelPtr& small() const { return small_; }
  const TokenSeq& base() const { return base_; }
  const Correction& correction() const { return correction_; }
  std::size_t depth_limit() const { return correction_.depth_limit; }

  /// Prefixes of this length or longer are served by the big model.
  std::size_t region_end() const { return base_.size() + correction_.depth_limit; }

  /// Rows served from the big model because the residual mass was zero at a
  /// reachable prefix. Exact arithmetic never gets here; rounding might.
  std::size_t residual_fallbacks() const { return fallbacks_.load(std::memory_order_relaxed); }

 protected:
  ProbVector next_row(TokenSpan prefix) const override { return score_rows(prefix, {}).front(); }

  std::vector<ProbVector> score_rows(TokenSpan prefix, TokenSpan cont) const override {
    if (!extends_base(prefix) || prefix.size() >= region_end()) return big_->score(prefix, cont);

    const std::size_t skip = prefix.size() - base_.size();
    TokenSeq tail(prefix.begin() + static_cast<std::ptrdiff_t>(base_.size()), prefix.end());
    tail.insert(tail.end(), cont.begin(), cont.end());

    auto big_rows = big_->score(base_, tail);
    const bool block = correction_.mode == CorrectionMode::block_residual;
    const std::size_t residual_depths = std::min(correction_.depth_limit, big_rows.size());
    std::vector<ProbVector> small_rows;
    if (block && residual_depths > 1) {
      TokenSeq head(tail.begin(), tail.begin() + static_cast<std::ptrdiff_t>(residual_depths - 1));
      small_rows = small_->score(base_, head);
    }

    std::vector<ProbVector> out;
    out.reserve(cont.size() + 1);
    LogProb lb = correction_.big_log_joint;
    LogProb ls = correction_.small_log_joint;
    // Once the tail leaves the residual support the prefix has probability
    // zero under this model; any valid row will do there.
    bool reachable = true;
    for (std::size_t j = 0; j < big_rows.size(); ++j) {
      ProbVector row;
      if (j == 0) {
        row = correction_.first_row;
      } else if (j < residual_depths && reachable) {
        row = block_row(lb, ls, big_rows[j], small_rows[j]);
      } else {
        row = big_rows[j];
      }
      if (j < residual_depths && j < tail.size() && !(row[tail[j]] > 0.0)) reachable = false;
      if (j >= skip) out.push_back(std::move(row));
      if (j + 1 < residual_depths && j < tail.size()) {
        lb += step_log(big_rows[j], tail[j]);
        ls += step_log(small_rows[j], tail[j]);
      }
    }
    return out;
  }

 private:
  bool extends_base(TokenSpan prefix) const {
    return prefix.size() >= base_.size() && std::equal(base_.begin(), base_.end(), prefix.begin());
  }

  ProbVector block_row(LogProb lb, LogProb ls, const ProbVector& big_row, const ProbVector& small_row) const {
    try {
      return residual_row(lb, ls, big_row, small_row);
    } catch (const EmptyResidual&) {
      fallbacks_.fetch_add(1, std::memory_order_relaxed);
      return big_row;
    }
  }

  ModelPtr big_;
  ModelPtr small_;
  TokenSeq base_;
  Correction correction_;
  mutable std::atomic<std::size_t> fallbacks_{0};
};

/// Drops correction layers whose residual region ends before `min_prefix_len`.
inline ModelPtr strip_expired(ModelPtr model, std::size_t min_prefix_len) {
  while (auto* c = dynamic_cast<const CorrectionModel*>(model.get())) {
    if (c->region_end() > min_prefix_len) break;
    model = c->big();
  }
  return model;
}

/// The target model for the iteration after a verify step whose accepted
/// prefix ends the absolute context `base`. The next block starts one token
/// later (after the free token).
inline ModelPtr next_target(const ModelPtr& big, const ModelPtr& small, TokenSeq base,
                            const Correction& correction) {
  const std::size_t next_start = base.size() + 1;
  if (correction.mode == CorrectionMode::plain) return strip_expired(big, next_start);
  auto wrapped = std::make_shared<const CorrectionModel>(strip_expired(big, base.size()), small,
                                                         std::move(base), correction);
  return strip_expired(wrapped, next_start);
}

}  // namespace blockverify
