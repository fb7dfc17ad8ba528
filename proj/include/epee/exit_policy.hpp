#pragma once

// Exit decisions over a PredictionTrace.
//
// Dynamic strategies walk layers 1..M in order. At each layer the patience
// counter is first updated with that layer's argmax, then both rules are
// tested against the updated state:
//
//   entropy rule   H_m < tau             (strict, so tau = 0 never fires)
//   patience rule  counter >= patience   (the counter grows by at most one
//                                         per layer, so this is counter == P)
//
// EPEE exits when either fires. If nothing fires by layer M the sample exits
// there anyway. When both fire on the same layer the entropy rule is
// recorded. Budgeted inference ignores the trace dynamics and always uses
// one fixed exit.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "epee/errors.hpp"
#include "epee/trace.hpp"

namespace epee {

enum class Strategy { Entropy, Patience, EPEE, Budgeted };

enum class ExitTrigger { EntropyRule, PatienceRule, FinalLayerFallback, Budget };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Entropy: return "entropy";
    case Strategy::Patience: return "patience";
    case Strategy::EPEE: return "epee";
    case Strategy::Budgeted: return "budgeted";
  }
  return "?";
}

inline std::string_view to_string(ExitTrigger t) {
  switch (t) {
    case ExitTrigger::EntropyRule: return "entropy_rule";
    case ExitTrigger::PatienceRule: return "patience_rule";
    case ExitTrigger::FinalLayerFallback: return "final_layer_fallback";
    case ExitTrigger::Budget: return "budget";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  if (name == "entropy") return Strategy::Entropy;
  if (name == "patience") return Strategy::Patience;
  if (name == "epee") return Strategy::EPEE;
  if (name == "budgeted") return Strategy::Budgeted;
  throw InputError("unknown strategy \"" + std::string(name) + "\" (expected entropy|patience|epee|budgeted)");
}

struct ExitPolicyConfig {
  Strategy strategy = Strategy::EPEE;
  double tau = 0.0;
  std::size_t patience = 1;
  std::size_t budget_layer = 1;

  bool uses_entropy() const { return strategy == Strategy::Entropy || strategy == Strategy::EPEE; }
  bool uses_patience() const { return strategy == Strategy::Patience || strategy == Strategy::EPEE; }

  static ExitPolicyConfig entropy(double tau) { return {Strategy::Entropy, tau, 1, 1}; }
  static ExitPolicyConfig patience_only(std::size_t p) { return {Strategy::Patience, 0.0, p, 1}; }
  static ExitPolicyConfig epee(double tau, std::size_t p) { return {Strategy::EPEE, tau, p, 1}; }
  static ExitPolicyConfig budgeted(std::size_t layer) { return {Strategy::Budgeted, 0.0, 1, layer}; }

  /// Range-checks the fields this strategy reads against a model depth.
  void validate(std::size_t num_layers) const {
    if (uses_entropy() && !(tau >= 0.0 && tau <= 1.0)) {
      throw InputError("tau " + std::to_string(tau) + " outside [0, 1]");
    }
    if (uses_patience() && (patience < 1 || patience > num_layers)) {
      throw InputError("patience " + std::to_string(patience) + " outside [1, " + std::to_string(num_layers) + "]");
    }
    if (strategy == Strategy::Budgeted && (budget_layer < 1 || budget_layer > num_layers)) {
      throw InputError("budget_layer " + std::to_string(budget_layer) + " outside [1, " +
                       std::to_string(num_layers) + "]");
    }
  }

  friend bool operator==(const ExitPolicyConfig&, const ExitPolicyConfig&) = default;
};

inline nlohmann::json to_json(const ExitPolicyConfig& c) {
  return {{"strategy", std::string(to_string(c.strategy))},
          {"tau", c.tau},
          {"patience", c.patience},
          {"budget_layer", c.budget_layer}};
}

/// Missing keys keep their defaults.
inline ExitPolicyConfig policy_from_json(const nlohmann::json& j) {
  ExitPolicyConfig c;
  try {
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    if (j.contains("tau")) c.tau = j.at("tau").get<double>();
    if (j.contains("patience")) c.patience = j.at("patience").get<std::size_t>();
    if (j.contains("budget_layer")) c.budget_layer = j.at("budget_layer").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed exit policy: ") + e.what());
  }
  return c;
}

struct ExitOutcome {
  std::size_t exit_layer = 0;  // 1-based
  ClassIndex predicted_class = 0;
  std::size_t layers_used = 0;
  ExitTrigger triggered_by = ExitTrigger::FinalLayerFallback;

  friend bool operator==(const ExitOutcome&, const ExitOutcome&) = default;
};

/// Consecutive-agreement counter. `prev_argmax` is empty at layer 1.
inline std::size_t patience_update(std::size_t prev_counter, std::optional<ClassIndex> prev_argmax,
                                   ClassIndex cur_argmax) {
  if (!prev_argmax) return 1;
  return *prev_argmax == cur_argmax ? prev_counter + 1 : 1;
}

inline ExitOutcome decide_exit(const PredictionTrace& trace, const ExitPolicyConfig& cfg) {
  const std::size_t layers = trace.num_layers();
  if (layers == 0) throw InputError("decide_exit: empty trace");
  if (trace.entropy.size() != layers || trace.argmax.size() != layers) {
    throw InputError("decide_exit: trace caches do not match " + std::to_string(layers) + " layers");
  }
  cfg.validate(layers);

  auto exit_at = [&](std::size_t layer, ExitTrigger why) {
    return ExitOutcome{layer, trace.argmax_at(layer), layer, why};
  };

  if (cfg.strategy == Strategy::Budgeted) return exit_at(cfg.budget_layer, ExitTrigger::Budget);

  std::size_t counter = 0;
  std::optional<ClassIndex> prev;
  for (std::size_t m = 1; m <= layers; ++m) {
    const ClassIndex cur = trace.argmax_at(m);
    counter = patience_update(counter, prev, cur);
    prev = cur;
    if (cfg.uses_entropy() && trace.entropy_at(m) < cfg.tau) return exit_at(m, ExitTrigger::EntropyRule);
    if (cfg.uses_patience() && counter >= cfg.patience) return exit_at(m, ExitTrigger::PatienceRule);
  }
  return exit_at(layers, ExitTrigger::FinalLayerFallback);
}

}  // namespace epee
