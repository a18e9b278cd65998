// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment harness behind the command-line tool: Monte-Carlo estimation
// with deterministic seeding, CSV/JSON emission, and the subcommands.
//
// Exit codes: 0 success, 2 config error, 3 theory violation or oracle
// failure, 4 enumeration budget exceeded.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "blockverify/analysis.hpp"
#include "blockverify/decode.hpp"
#include "blockverify/model_spec.hpp"
#include "blockverify/verification.hpp"
#include "json.hpp"

namespace blockverify::harness {

enum ExitCode : int { kOk = 0, kConfigError = 2, kTheoryViolation = 3, kBudgetExceeded = 4 };

// ----------------------------------------------------------------------------
// Monte-Carlo plumbing
// ----------------------------------------------------------------------------

struct RunningStats {
  std::size_t n = 0;
  double sum = 0.0;
  double sum_sq = 0.0;

  void add(double x) {
    ++n;
    sum += x;
    sum_sq += x * x;
  }
  void merge(const RunningStats& o) {
    n += o.n;
    sum += o.sum;
    sum_sq += o.sum_sq;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  double variance() const {
    if (n < 2) return 0.0;
    const double m = mean();
    return std::max(0.0, (sum_sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1));
  }
  double se() const { return n ? std::sqrt(variance() / static_cast<double>(n)) : 0.0; }
  MeanSe summary() const { return {mean(), se()}; }
};

/// Trials per seeded chunk. Chunks, not workers, own random streams, so the
/// result does not depend on the worker count.
inline constexpr std::size_t kChunkTrials = 1024;

/// Runs `trial(rng)` `trials` times. Chunk c uses derive_seed(seed, c); chunk
/// results are merged in chunk order.
template <typename Trial>
RunningStats run_trials(std::size_t trials, std::uint64_t seed, std::size_t workers, const Trial& trial) {
  const std::size_t chunks = (trials + kChunkTrials - 1) / kChunkTrials;
  std::vector<RunningStats> partial(chunks);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t c = next++; c < chunks; c = next++) {
      Rng gen = make_rng(derive_seed(seed, c));
      const std::size_t begin = c * kChunkTrials;
      const std::size_t end = std::min(trials, begin + kChunkTrials);
      for (std::size_t t = begin; t < end; ++t) partial[c].add(trial(gen));
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, chunks));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  RunningStats total;
  for (const auto& p : partial) total.merge(p);
  return total;
}

/// tau from one verify step on a fresh draft after `prefix`.
template <Random64 G>
std::size_t sample_tau(const ArModel& small, const ArModel& big, TokenSpan prefix, std::size_t length,
                       Verifier verifier, G& gen) {
  auto [draft, small_rows] = draft_with_rows(small, prefix, length, gen);
  auto big_rows = big.score(prefix, draft);
  const auto block = make_draft_block(std::move(draft), std::move(small_rows), std::move(big_rows));
  return verify(block, verifier, gen).tau;
}

inline RunningStats mc_tau(const ArModel& small, const ArModel& big, std::size_t length, Verifier verifier,
                           std::size_t trials, std::uint64_t seed, std::size_t workers = 1, TokenSpan prefix = {}) {
  return run_trials(trials, seed, workers, [&](Rng& gen) {
    return static_cast<double>(sample_tau(small, big, prefix, length, verifier, gen));
  });
}

inline RunningStats mc_block_efficiency(const ModelPtr& small, const ModelPtr& big, TokenSpan prompt,
                                        const DecodeOptions& opt, bool exclude_partial, std::size_t trials,
                                        std::uint64_t seed, std::size_t workers = 1) {
  return run_trials(trials, seed, workers, [&](Rng& gen) {
    return block_efficiency(spec_decode(big, small, prompt, opt, gen), exclude_partial);
  });
}

// ----------------------------------------------------------------------------
// Config and formatting
// ----------------------------------------------------------------------------

struct ExperimentConfig {
  ModelPtr small;
  ModelPtr big;
  std::vector<std::size_t> lengths{4};
  Verifier verifier = Verifier::block;
  std::size_t trials = 10000;
  std::uint64_t seed = 0;
  std::size_t horizon = 64;
  TokenSeq prompt;
  std::size_t workers = 1;
  bool include_free_token = false;
  bool exclude_partial_final_block = true;
  bool json = false;
};

/// "8", "1..10", "1-10" or "1,2,4".
inline std::vector<std::size_t> parse_lengths(const std::string& text) {
  auto to_len = [&](const std::string& s) -> std::size_t {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty() || v == 0) throw ConfigError("invalid block length '" + s + "' in --L " + text);
    return v;
  };
  std::vector<std::size_t> out;
  auto dots = text.find("..");
  auto dash = text.find('-');
  if (dots != std::string::npos || dash != std::string::npos) {
    const bool d = dots != std::string::npos;
    const std::size_t at = d ? dots : dash;
    const std::size_t lo = to_len(text.substr(0, at));
    const std::size_t hi = to_len(text.substr(at + (d ? 2 : 1)));
    if (hi < lo) throw ConfigError("empty range in --L " + text);
    for (std::size_t l = lo; l <= hi; ++l) out.push_back(l);
    return out;
  }
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) out.push_back(to_len(part));
  if (out.empty()) throw ConfigError("--L is empty");
  return out;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of everything that determines a command's output.
inline std::string config_hash(const std::string& command, const ExperimentConfig& c) {
  std::ostringstream os;
  os << command << '|';
  if (c.small) os << model_to_json(*c.small).dump() << '|';
  if (c.big) os << model_to_json(*c.big).dump() << '|';
  for (auto l : c.lengths) os << l << ',';
  os << '|' << to_string(c.verifier) << '|' << c.trials << '|' << c.seed << '|' << c.horizon << '|';
  for (auto t : c.prompt) os << t << ',';
  os << '|' << c.include_free_token << c.exclude_partial_final_block;
  return hex64(fnv1a(os.str()));
}

inline void write_csv_preamble(std::ostream& out, const std::string& command, const ExperimentConfig& c,
                               const std::string& header) {
  out << "# blockverify " << command << " config_hash=" << config_hash(command, c) << " seed=" << c.seed
      << '\n'
      << header << '\n';
}

// Stream tags keep each Monte-Carlo estimate on its own seed family.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t kind, std::size_t length, Verifier v) {
  return derive_seed(derive_seed(seed, kind), length * 2 + (v == Verifier::block ? 1 : 0));
}

// ----------------------------------------------------------------------------
// Commands
// ----------------------------------------------------------------------------

/// Per-L exact and Monte-Carlo comparison of the two verifiers.
inline int cmd_compare(const ExperimentConfig& c, std::ostream& out, std::ostream& log) {
  if (c.trials == 0) throw ConfigError("--trials must be >= 1");
  nlohmann::json summary = nlohmann::json::array();
  if (!c.json) {
    write_csv_preamble(out, "compare", c,
                       "L,exact_token,exact_block,upper_bound,mc_token_mean,mc_token_se,mc_block_mean,"
                       "mc_block_se,be_token_mean,be_token_se,be_block_mean,be_block_se");
  }
  int code = kOk;
  for (std::size_t len : c.lengths) {
    AcceptanceReport r = exact_report(*c.small, *c.big, len, c.prompt);
    r.n_trials = c.trials;
    r.mc_token = mc_tau(*c.small, *c.big, len, Verifier::token, c.trials, stream_seed(c.seed, 1, len, Verifier::token),
                        c.workers, c.prompt)
                     .summary();
    r.mc_block = mc_tau(*c.small, *c.big, len, Verifier::block, c.trials, stream_seed(c.seed, 1, len, Verifier::block),
                        c.workers, c.prompt)
                     .summary();
    MeanSe be[2];
    double wall_ms[2];
    for (Verifier v : {Verifier::token, Verifier::block}) {
      const DecodeOptions opt{len, v, c.horizon};
      const auto t0 = std::chrono::steady_clock::now();
      be[v == Verifier::block] = mc_block_efficiency(c.small, c.big, c.prompt, opt, c.exclude_partial_final_block,
                                                     c.trials, stream_seed(c.seed, 2, len, v), c.workers)
                                     .summary();
      wall_ms[v == Verifier::block] =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    log << "L=" << len << " decode wall clock (informational): token " << fmt(wall_ms[0]) << " ms, block "
        << fmt(wall_ms[1]) << " ms\n";

    if (r.exact_block < r.exact_token - 1e-12 || std::abs(r.exact_block - r.upper_bound) > 1e-10) {
      log << "theory violation at L=" << len << ": exact_token=" << fmt(r.exact_token)
          << " exact_block=" << fmt(r.exact_block) << " upper_bound=" << fmt(r.upper_bound) << '\n';
      code = kTheoryViolation;
    }
    if (c.json) {
      summary.push_back({{"L", len},
                         {"exact_token", r.exact_token},
                         {"exact_block", r.exact_block},
                         {"upper_bound", r.upper_bound},
                         {"mc_token", {{"mean", r.mc_token.mean}, {"se", r.mc_token.se}}},
                         {"mc_block", {{"mean", r.mc_block.mean}, {"se", r.mc_block.se}}},
                         {"block_efficiency_token", {{"mean", be[0].mean}, {"se", be[0].se}}},
                         {"block_efficiency_block", {{"mean", be[1].mean}, {"se", be[1].se}}},
                         {"n_trials", r.n_trials}});
    } else {
      out << len << ',' << fmt(r.exact_token) << ',' << fmt(r.exact_block) << ',' << fmt(r.upper_bound) << ','
          << fmt(r.mc_token.mean) << ',' << fmt(r.mc_token.se) << ',' << fmt(r.mc_block.mean) << ','
          << fmt(r.mc_block.se) << ',' << fmt(be[0].mean) << ',' << fmt(be[0].se) << ',' << fmt(be[1].mean) << ','
          << fmt(be[1].se) << '\n';
    }
  }
  if (c.json) {
    out << nlohmann::json{{"command", "compare"}, {"config_hash", config_hash("compare", c)}, {"seed", c.seed},
                          {"rows", summary}}
               .dump(2)
        << '\n';
  }
  return code;
}

struct SweepConfig {
  double p = 0.5;
  double q = 0.75;
  std::size_t max_length = 16;
  bool include_free_token = false;
};

/// Bernoulli token/block curves for L = 1..L_max.
inline int cmd_bernoulli_sweep(const SweepConfig& s, std::ostream& out, std::ostream& log) {
  const auto curves = bernoulli_curves(s.p, s.q, s.max_length, s.include_free_token);
  const std::string desc = "bernoulli-sweep|" + fmt(s.p) + '|' + fmt(s.q) + '|' + std::to_string(s.max_length) + '|' +
                           (s.include_free_token ? "1" : "0");
  out << "# blockverify bernoulli-sweep config_hash=" << hex64(fnv1a(desc)) << " seed=none p=" << fmt(s.p)
      << " q=" << fmt(s.q) << " include_free_token=" << (s.include_free_token ? 1 : 0) << '\n'
      << "L,token_curve,block_curve,gap\n";
  int code = kOk;
  double prev_gap = 0.0;
  for (std::size_t i = 0; i < curves.token.size(); ++i) {
    const double gap = curves.block[i] - curves.token[i];
    out << i + 1 << ',' << fmt(curves.token[i]) << ',' << fmt(curves.block[i]) << ',' << fmt(gap) << '\n';
    if (gap < -1e-12 || gap < prev_gap - 1e-12) {
      log << "gap not monotone or negative at L=" << i + 1 << '\n';
      code = kTheoryViolation;
    }
    prev_gap = gap;
  }
  return code;
}

struct OracleConfig {
  std::size_t pairs = 50;
  std::size_t vocab = 2;
  std::size_t length = 2;
  std::size_t context_len = 2;
  double concentration = 1.0;
  std::uint64_t seed = 0;
  bool adversarial = false;
  double tolerance = 1e-10;
};

struct OracleResult {
  std::size_t checks = 0;
  std::size_t failures = 0;
  std::size_t skipped = 0;
  double worst_output_token = 0.0;
  double worst_output_block = 0.0;
  double worst_accept_joint = 0.0;
  double worst_optimality = 0.0;
  double worst_token_tau = 0.0;
  double min_dominance_margin = std::numeric_limits<double>::infinity();
};

/// Near-degenerate pair: rows put 1e-12 mass on one token.
inline std::pair<ModelPtr, ModelPtr> adversarial_pair(std::size_t vocab) {
  const Vocab v(vocab);
  auto skewed = [&](Token heavy) {
    std::vector<double> w(vocab, 1e-12);
    w[heavy] = 1.0 - 1e-12 * static_cast<double>(vocab - 1);
    return ProbVector::normalized(std::move(w));
  };
  std::vector<ProbVector> ts, tb;
  for (Token t = 0; t < vocab; ++t) {
    ts.push_back(skewed(t));
    tb.push_back(skewed(static_cast<Token>((t + 1) % vocab)));
  }
  return {std::make_shared<const MarkovModel>(v, skewed(0), ts), std::make_shared<const MarkovModel>(v, skewed(0), tb)};
}

/// Runs every enumeration oracle on one pair, folding deviations into `r`.
inline void check_pair_oracles(const ModelPtr& small, const ModelPtr& big, std::size_t length, double tol,
                               OracleResult& r) {
  const auto target = sequence_distribution(*big, length);
  const double dev_t = max_abs_deviation(enumerate_output_distribution(small, big, length, Verifier::token), target);
  const double dev_b = max_abs_deviation(enumerate_output_distribution(small, big, length, Verifier::block), target);
  r.worst_output_token = std::max(r.worst_output_token, dev_t);
  r.worst_output_block = std::max(r.worst_output_block, dev_b);

  double dev_joint = 0.0;
  for (const auto& [prefix, p] : enumerate_block_accept_joint(*small, *big, length)) {
    const double expect = std::min(joint_log_prob(*small, prefix).linear(), joint_log_prob(*big, prefix).linear());
    dev_joint = std::max(dev_joint, std::abs(p - expect));
  }
  r.worst_accept_joint = std::max(r.worst_accept_joint, dev_joint);

  const double block = expected_tau_block(*small, *big, length);
  const double bound = coupling_upper_bound(*small, *big, length);
  const double mean_block = distribution_mean(exact_block_tau_distribution(*small, *big, length));
  const double dev_opt = std::max(std::abs(block - bound), std::abs(block - mean_block));
  r.worst_optimality = std::max(r.worst_optimality, dev_opt);

  const double token = expected_tau_token(*small, *big, length);
  const double dev_tok = std::abs(token - distribution_mean(exact_token_tau_distribution(*small, *big, length)));
  r.worst_token_tau = std::max(r.worst_token_tau, dev_tok);

  const double margin = block - token;
  r.min_dominance_margin = std::min(r.min_dominance_margin, margin);

  r.checks += 6;
  for (double d : {dev_t, dev_b, dev_joint, dev_opt, dev_tok})
    if (!(d <= tol)) ++r.failures;
  if (margin < -1e-12) ++r.failures;
}

inline OracleResult run_oracles(const OracleConfig& o, std::ostream& log) {
  OracleResult r;
  const Vocab vocab(o.vocab);
  std::vector<std::pair<ModelPtr, ModelPtr>> pairs;
  for (std::size_t i = 0; i < o.pairs; ++i) {
    pairs.emplace_back(make_random_model(vocab, o.context_len, derive_seed(o.seed, 2 * i), o.concentration),
                       make_random_model(vocab, o.context_len, derive_seed(o.seed, 2 * i + 1), o.concentration));
  }
  if (o.adversarial && o.pairs > 0) pairs.push_back(adversarial_pair(o.vocab));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      check_pair_oracles(pairs[i].first, pairs[i].second, o.length, o.tolerance, r);
    } catch (const BudgetExceeded& e) {
      ++r.skipped;
      log << "warning: pair " << i << " skipped: " << e.what() << '\n';
    }
  }
  return r;
}

/// Batch enumeration-oracle run over seeded random pairs.
inline int cmd_oracle_check(const OracleConfig& o, std::ostream& out, std::ostream& log) {
  const OracleResult r = run_oracles(o, log);
  out << "oracle-check pairs=" << o.pairs << (o.adversarial ? "+adversarial" : "") << " vocab=" << o.vocab
      << " L=" << o.length << " seed=" << o.seed << '\n'
      << "  output distribution (token)  worst |dev| = " << fmt(r.worst_output_token) << '\n'
      << "  output distribution (block)  worst |dev| = " << fmt(r.worst_output_block) << '\n'
      << "  block accept joint           worst |dev| = " << fmt(r.worst_accept_joint) << '\n'
      << "  optimality (block=bound=mean) worst |dev| = " << fmt(r.worst_optimality) << '\n'
      << "  token tau distribution mean  worst |dev| = " << fmt(r.worst_token_tau) << '\n'
      << "  dominance block - token      min margin  = "
      << (r.checks ? fmt(r.min_dominance_margin) : std::string("n/a")) << '\n'
      << "  checks=" << r.checks << " failures=" << r.failures << " skipped=" << r.skipped << '\n';
  if (r.checks == 0 && r.skipped == 0) {
    out << "FAIL: no checks executed\n";
    return kTheoryViolation;
  }
  if (r.failures > 0) {
    out << "FAIL\n";
    return kTheoryViolation;
  }
  if (r.skipped > 0) {
    out << "INCOMPLETE: budget exceeded for " << r.skipped << " pair(s)\n";
    return kBudgetExceeded;
  }
  out << "PASS\n";
  return kOk;
}

inline nlohmann::json trace_to_json(const DecodeTrace& t, bool exclude_partial) {
  nlohmann::json iters = nlohmann::json::array();
  for (const auto& it : t.iterations) {
    iters.push_back({{"draft", it.draft},
                     {"tau", it.tau},
                     {"free_token", it.free_token ? nlohmann::json(*it.free_token) : nlohmann::json(nullptr)},
                     {"big_calls", it.big_calls},
                     {"emitted", it.emitted},
                     {"partial", it.partial}});
  }
  return {{"output", t.output},
          {"raw", t.raw},
          {"serial_calls", t.serial_calls},
          {"tokens_emitted", t.tokens_emitted()},
          {"block_efficiency", block_efficiency(t, exclude_partial)},
          {"length_limited", t.length_limited},
          {"eos_reached", t.eos_reached},
          {"ratio_clamps", t.diagnostics.ratio_clamps},
          {"residual_fallbacks", t.diagnostics.residual_fallbacks},
          {"iterations", iters}};
}

/// One speculative decode with a printed trace.
inline int cmd_decode(const ExperimentConfig& c, std::ostream& out, std::ostream&) {
  if (c.lengths.size() != 1) throw ConfigError("decode takes a single --L");
  c.big->vocab().check(c.prompt);
  Rng gen = make_rng(c.seed);
  const DecodeOptions opt{c.lengths.front(), c.verifier, c.horizon};
  const DecodeTrace t = spec_decode(c.big, c.small, c.prompt, opt, gen);
  if (c.json) {
    out << trace_to_json(t, c.exclude_partial_final_block).dump(2) << '\n';
    return kOk;
  }
  auto join = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
    return s;
  };
  out << "output: " << join(t.output) << '\n';
  for (std::size_t i = 0; i < t.iterations.size(); ++i) {
    const auto& it = t.iterations[i];
    out << "iter " << i << ": draft [" << join(it.draft) << "] tau=" << it.tau << " free="
        << (it.free_token ? std::to_string(*it.free_token) : std::string("-")) << " emitted=" << it.emitted
        << (it.partial ? " (partial)" : "") << '\n';
  }
  out << "serial big-model calls: " << t.serial_calls << '\n'
      << "tokens emitted: " << t.tokens_emitted() << '\n'
      << "block efficiency: " << fmt(block_efficiency(t, c.exclude_partial_final_block)) << '\n'
      << (t.eos_reached ? "stopped at E.O.S\n" : (t.length_limited ? "length-limited\n" : ""));
  return kOk;
}

/// Exact acceptance statistics and tau distributions per L.
inline int cmd_exact(const ExperimentConfig& c, std::ostream& out, std::ostream& log) {
  nlohmann::json rows = nlohmann::json::array();
  if (!c.json) {
    write_csv_preamble(out, "exact", c, "L,exact_token,exact_block,upper_bound,token_tau_dist,block_tau_dist");
  }
  int code = kOk;
  auto join = [](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + fmt(v[i]);
    return s;
  };
  for (std::size_t len : c.lengths) {
    const auto r = exact_report(*c.small, *c.big, len, c.prompt);
    const auto td = exact_token_tau_distribution(*c.small, *c.big, len, c.prompt);
    const auto bd = exact_block_tau_distribution(*c.small, *c.big, len, c.prompt);
    if (r.exact_block < r.exact_token - 1e-12 || std::abs(r.exact_block - r.upper_bound) > 1e-10) {
      log << "theory violation at L=" << len << '\n';
      code = kTheoryViolation;
    }
    if (c.json) {
      rows.push_back({{"L", len},
                      {"exact_token", r.exact_token},
                      {"exact_block", r.exact_block},
                      {"upper_bound", r.upper_bound},
                      {"token_tau_dist", td},
                      {"block_tau_dist", bd}});
    } else {
      out << len << ',' << fmt(r.exact_token) << ',' << fmt(r.exact_block) << ',' << fmt(r.upper_bound) << ','
          << join(td) << ',' << join(bd) << '\n';
    }
  }
  if (c.json) {
    out << nlohmann::json{{"command", "exact"}, {"config_hash", config_hash("exact", c)}, {"rows", rows}}.dump(2)
        << '\n';
  }
  return code;
}

/// Maps library exceptions onto exit codes.
inline int run_guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const BudgetExceeded& e) {
    err << "error: " << e.what() << '\n';
    return kBudgetExceeded;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::logic_error& e) {
    err << "internal invariant violated: " << e.what() << '\n';
    return kTheoryViolation;
  }
}

}  // namespace blockverify::harness
