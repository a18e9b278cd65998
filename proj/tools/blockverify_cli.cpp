// SPDX-License-Identifier: Apache-2.0
//
// blockverify: compare token and block verification on small/big model pairs.

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "blockverify/blockverify.hpp"
#include "blockverify/harness.hpp"

namespace bv = blockverify;
namespace hx = blockverify::harness;

namespace {

struct Args {
  std::string ms, mb;
  std::string lengths = "4";
  std::size_t trials = 10000;
  std::uint64_t seed = 0;
  std::string out;
  std::string verifier = "block";
  std::size_t horizon = 64;
  std::size_t workers = 1;
  std::string prompt;
  bool json = false;
  bool include_free_token = false;
  bool exclude_partial = true;
};

bv::TokenSeq parse_prompt(const std::string& text) {
  bv::TokenSeq out;
  std::stringstream ss(text);
  for (std::string part; std::getline(ss, part, ',');) {
    if (part.empty()) continue;
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(part, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != part.size()) throw bv::ConfigError("invalid token '" + part + "' in --prompt");
    out.push_back(static_cast<bv::Token>(v));
  }
  return out;
}

// A path, or an inline JSON object.
bv::ModelPtr load_spec(const std::string& arg, const std::string& flag) {
  const auto first = arg.find_first_not_of(" \t\n");
  if (first != std::string::npos && arg[first] == '{') return bv::model_from_string(arg, flag);
  return bv::load_model(arg);
}

hx::ExperimentConfig build_config(const Args& a) {
  hx::ExperimentConfig c;
  if (a.ms.empty() || a.mb.empty()) throw bv::ConfigError("--ms and --mb are required");
  c.small = load_spec(a.ms, "--ms");
  c.big = load_spec(a.mb, "--mb");
  if (!(c.small->vocab() == c.big->vocab())) {
    throw bv::ConfigError("vocab mismatch: " + a.ms + " and " + a.mb + " must have the same vocab_size and eos");
  }
  c.lengths = hx::parse_lengths(a.lengths);
  c.verifier = bv::parse_verifier(a.verifier);
  c.trials = a.trials;
  c.seed = a.seed;
  c.horizon = a.horizon;
  c.workers = a.workers;
  c.prompt = parse_prompt(a.prompt);
  c.big->vocab().check(c.prompt);
  c.json = a.json;
  c.include_free_token = a.include_free_token;
  c.exclude_partial_final_block = a.exclude_partial;
  return c;
}

// Runs `body` against --out (or stdout).
int with_output(const std::string& path, const std::function<int(std::ostream&)>& body) {
  if (path.empty()) return body(std::cout);
  std::ofstream file(path);
  if (!file) throw bv::ConfigError(path + ": cannot open for writing");
  return body(file);
}

void add_model_options(CLI::App* cmd, Args& a) {
  cmd->add_option("--ms", a.ms, "small (draft) model spec: JSON file or inline object")->required();
  cmd->add_option("--mb", a.mb, "big (target) model spec: JSON file or inline object")->required();
  cmd->add_option("--prompt", a.prompt, "comma-separated prompt tokens");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token vs block verification for speculative decoding"};
  app.require_subcommand(1);
  Args a;

  auto* compare = app.add_subcommand("compare", "exact and Monte-Carlo acceptance per block length");
  add_model_options(compare, a);
  compare->add_option("--L", a.lengths, "block length: N, A..B, A-B or a comma list")->capture_default_str();
  compare->add_option("--trials", a.trials, "Monte-Carlo trials per estimate")->capture_default_str();
  compare->add_option("--seed", a.seed, "master seed")->capture_default_str();
  compare->add_option("--horizon", a.horizon, "max tokens per decode run")->capture_default_str();
  compare->add_option("--workers", a.workers, "worker threads")->capture_default_str();
  compare->add_option("--out", a.out, "CSV output path (default stdout)");
  compare->add_flag("--json", a.json, "emit a JSON summary instead of CSV");
  compare->add_flag("--exclude-partial-final-block,!--keep-partial-final-block", a.exclude_partial,
                    "leave a final iteration cut by --horizon out of block efficiency (default on)");

  hx::SweepConfig sweep;
  std::string sweep_out;
  auto* bern = app.add_subcommand("bernoulli-sweep", "closed-form Bernoulli curves");
  bern->add_option("--p", sweep.p, "small model P(1)")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  bern->add_option("--q", sweep.q, "big model P(1)")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  bern->add_option("--L-max", sweep.max_length, "largest block length")
      ->capture_default_str()
      ->check(CLI::Range(std::size_t{1}, bv::kMaxBernoulliLength));
  bern->add_flag("--include-free-token", sweep.include_free_token, "add the free token to both curves");
  bern->add_option("--out", sweep_out, "CSV output path (default stdout)");

  hx::OracleConfig oracle;
  auto* oc = app.add_subcommand("oracle-check", "exhaustive checks over seeded random model pairs");
  oc->add_option("--pairs", oracle.pairs, "number of random pairs")->capture_default_str();
  oc->add_option("--vocab", oracle.vocab, "vocab size")->capture_default_str();
  oc->add_option("--L", oracle.length, "block length")->capture_default_str();
  oc->add_option("--context-len", oracle.context_len, "context length of the random models")->capture_default_str();
  oc->add_option("--concentration", oracle.concentration, "Dirichlet concentration")->capture_default_str();
  oc->add_option("--seed", oracle.seed, "master seed")->capture_default_str();
  oc->add_flag("--adversarial", oracle.adversarial, "add a near-degenerate pair with 1e-12 row entries");

  auto* dec = app.add_subcommand("decode", "one speculative decode with a trace");
  add_model_options(dec, a);
  dec->add_option("--L", a.lengths, "block length")->capture_default_str();
  dec->add_option("--verifier", a.verifier, "token or block")->capture_default_str();
  dec->add_option("--seed", a.seed, "seed")->capture_default_str();
  dec->add_option("--max-tokens,--horizon", a.horizon, "max emitted tokens")->capture_default_str();
  dec->add_flag("--json", a.json, "emit the trace as JSON");

  auto* ex = app.add_subcommand("exact", "exact expectations and tau distributions");
  add_model_options(ex, a);
  ex->add_option("--L", a.lengths, "block length: N, A..B, A-B or a comma list")->capture_default_str();
  ex->add_option("--out", a.out, "CSV output path (default stdout)");
  ex->add_flag("--json", a.json, "emit JSON instead of CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : hx::kConfigError;
  }

  return hx::run_guarded(
      [&]() -> int {
        if (*compare) {
          const auto c = build_config(a);
          return with_output(a.out, [&](std::ostream& out) { return hx::cmd_compare(c, out, std::cerr); });
        }
        if (*bern) {
          return with_output(sweep_out, [&](std::ostream& out) { return hx::cmd_bernoulli_sweep(sweep, out, std::cerr); });
        }
        if (*oc) return hx::cmd_oracle_check(oracle, std::cout, std::cerr);
        if (*dec) return hx::cmd_decode(build_config(a), std::cout, std::cerr);
        const auto c = build_config(a);
        return with_output(a.out, [&](std::ostream& out) { return hx::cmd_exact(c, out, std::cerr); });
      },
      std::cerr);
}
