// SPDX-License-Identifier: Apache-2.0
#pragma once

// Model specification files (JSON).
//
//   {
//     "vocab_size": 4,          // >= 2
//     "eos": 3,                 // optional; null or absent means no E.O.S
//     "kind": "memoryless" | "markov" | "table" | "random",
//
//     // memoryless
//     "probs": [p0, p1, ...],
//     // markov
//     "initial": [...], "transition": [[...], ...],   // vocab_size rows
//     // table
//     "context_len": 2, "default": [...],
//     "rows": [{"context": [0, 1], "probs": [...]}, ...],
//     // random
//     "context_len": 2, "seed": 7, "concentration": 1.0
//   }
//
// Every row must sum to 1 within 1e-6; accepted rows are renormalized.

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "blockverify/model.hpp"
#include "json.hpp"

namespace blockverify {

inline constexpr double kSpecRowTolerance = 1e-6;

namespace detail {

using nlohmann::json;

[[noreturn]] inline void spec_error(const std::string& where, const std::string& what) {
  throw ConfigError(where + ": " + what);
}

inline const json& require(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) spec_error(where, std::string("missing field '") + key + "'");
  return *it;
}

inline std::uint64_t read_uint(const json& j, const std::string& where) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
    spec_error(where, "expected a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

inline ProbVector read_row(const json& j, std::size_t size, const std::string& where) {
  if (!j.is_array()) spec_error(where, "expected an array of probabilities");
  if (j.size() != size) {
    spec_error(where, "expected " + std::to_string(size) + " entries, got " + std::to_string(j.size()));
  }
  std::vector<double> w;
  w.reserve(size);
  double total = 0.0;
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) spec_error(where + "[" + std::to_string(i) + "]", "expected a number");
    const double v = j[i].get<double>();
    if (!(v >= 0.0) || !std::isfinite(v)) spec_error(where + "[" + std::to_string(i) + "]", "negative probability");
    w.push_back(v);
    total += v;
  }
  if (std::abs(total - 1.0) > kSpecRowTolerance) {
    std::ostringstream os;
    os.precision(12);
    os << "row sums to " << total << " (must be 1 within " << kSpecRowTolerance << ")";
    spec_error(where, os.str());
  }
  return ProbVector::normalized(std::move(w));
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.contains(it.key())) spec_error(where, "unknown field '" + it.key() + "'");
}

}  // namespace detail

/// Builds a model from a parsed spec. `source` prefixes every diagnostic.
inline ModelPtr model_from_json(const nlohmann::json& j, const std::string& source = "spec") {
  using detail::require;
  using detail::spec_error;
  if (!j.is_object()) spec_error(source, "top level must be an object");

  const std::size_t n = detail::read_uint(require(j, "vocab_size", source), source + ".vocab_size");
  std::optional<Token> eos;
  if (auto it = j.find("eos"); it != j.end() && !it->is_null()) {
    eos = static_cast<Token>(detail::read_uint(*it, source + ".eos"));
  }
  const auto& kind_j = require(j, "kind", source);
  if (!kind_j.is_string()) spec_error(source + ".kind", "expected a string");
  const std::string kind = kind_j.get<std::string>();

  try {
    Vocab vocab(n, eos);
    if (kind == "memoryless") {
      detail::reject_unknown(j, {"vocab_size", "eos", "kind", "probs", "seed"}, source);
      return std::make_shared<const MemorylessModel>(vocab,
                                                     detail::read_row(require(j, "probs", source), n, source + ".probs"));
    }
    if (kind == "markov") {
      detail::reject_unknown(j, {"vocab_size", "eos", "kind", "initial", "transition", "seed"}, source);
      auto initial = detail::read_row(require(j, "initial", source), n, source + ".initial");
      const auto& t = require(j, "transition", source);
      if (!t.is_array() || t.size() != n) spec_error(source + ".transition", "expected vocab_size rows");
      std::vector<ProbVector> rows;
      for (std::size_t i = 0; i < n; ++i)
        rows.push_back(detail::read_row(t[i], n, source + ".transition[" + std::to_string(i) + "]"));
      return std::make_shared<const MarkovModel>(vocab, std::move(initial), std::move(rows));
    }
    if (kind == "table") {
      detail::reject_unknown(j, {"vocab_size", "eos", "kind", "context_len", "default", "rows", "seed"}, source);
      const std::size_t c = detail::read_uint(require(j, "context_len", source), source + ".context_len");
      auto fallback = detail::read_row(require(j, "default", source), n, source + ".default");
      TableModel::Rows rows;
      if (auto it = j.find("rows"); it != j.end()) {
        if (!it->is_array()) spec_error(source + ".rows", "expected an array");
        for (std::size_t i = 0; i < it->size(); ++i) {
          const std::string where = source + ".rows[" + std::to_string(i) + "]";
          const auto& r = (*it)[i];
          if (!r.is_object()) spec_error(where, "expected an object");
          detail::reject_unknown(r, {"context", "probs"}, where);
          const auto& ctx_j = require(r, "context", where);
          if (!ctx_j.is_array()) spec_error(where + ".context", "expected an array of tokens");
          TokenSeq ctx;
          for (std::size_t k = 0; k < ctx_j.size(); ++k) {
            const auto tok = detail::read_uint(ctx_j[k], where + ".context[" + std::to_string(k) + "]");
            if (tok >= n) spec_error(where + ".context[" + std::to_string(k) + "]", "token outside vocab");
            ctx.push_back(static_cast<Token>(tok));
          }
          if (ctx.size() > c) spec_error(where + ".context", "longer than context_len");
          if (!rows.emplace(ctx, detail::read_row(require(r, "probs", where), n, where + ".probs")).second) {
            spec_error(where + ".context", "duplicate context");
          }
        }
      }
      return std::make_shared<const TableModel>(vocab, c, std::move(fallback), std::move(rows));
    }
    if (kind == "random") {
      detail::reject_unknown(j, {"vocab_size", "eos", "kind", "context_len", "seed", "concentration"}, source);
      const std::size_t c = detail::read_uint(require(j, "context_len", source), source + ".context_len");
      const std::uint64_t seed = detail::read_uint(require(j, "seed", source), source + ".seed");
      const auto& a = require(j, "concentration", source);
      if (!a.is_number()) spec_error(source + ".concentration", "expected a number");
      return make_random_model(vocab, c, seed, a.get<double>());
    }
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(source, 0) == 0) throw;
    spec_error(source, msg);
  }
  spec_error(source + ".kind", "unknown kind '" + kind + "' (expected memoryless|markov|table|random)");
}

inline ModelPtr model_from_string(const std::string& text, const std::string& source = "spec") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return model_from_json(j, source);
}

inline ModelPtr load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open model spec");
  std::stringstream buf;
  buf << in.rdbuf();
  return model_from_string(buf.str(), path);
}

/// Serializes the three parameterized kinds. Random models serialize as the
/// table they expand to.
inline nlohmann::json model_to_json(const ArModel& model) {
  nlohmann::json j;
  j["vocab_size"] = model.vocab().size();
  j["eos"] = model.vocab().eos() ? nlohmann::json(*model.vocab().eos()) : nlohmann::json(nullptr);
  auto row = [](const ProbVector& p) { return std::vector<double>(p.begin(), p.end()); };
  if (auto* m = dynamic_cast<const MemorylessModel*>(&model)) {
    j["kind"] = "memoryless";
    j["probs"] = row(m->row());
  } else if (auto* mk = dynamic_cast<const MarkovModel*>(&model)) {
    j["kind"] = "markov";
    j["initial"] = row(mk->initial());
    for (const auto& r : mk->transition()) j["transition"].push_back(row(r));
  } else if (auto* t = dynamic_cast<const TableModel*>(&model)) {
    j["kind"] = "table";
    j["context_len"] = t->context_len();
    j["default"] = row(t->default_row());
    j["rows"] = nlohmann::json::array();
    for (const auto& [ctx, r] : t->rows()) j["rows"].push_back({{"context", ctx}, {"probs", row(r)}});
  } else {
    throw ConfigError("model kind '" + model.kind() + "' has no spec representation");
  }
  return j;
}

}  // namespace blockverify
