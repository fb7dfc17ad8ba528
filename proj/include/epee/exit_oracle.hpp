#pragma once

// Reference exit simulator used to cross-check decide_exit.
//
// Written independently on purpose: it reads only the raw distributions,
// recomputes entropy and argmax itself, and tracks the full history of
// argmaxes instead of a running counter. Do not share helpers with
// exit_policy.hpp.

#include <cmath>
#include <cstddef>
#include <vector>

#include "epee/exit_policy.hpp"

namespace epee::oracle {

inline ExitOutcome decide_exit_oracle(const PredictionTrace& trace, const ExitPolicyConfig& cfg) {
  const std::size_t M = trace.probs.rows();
  const std::size_t K = trace.probs.cols();
  if (M == 0 || K < 2) throw InputError("oracle: bad trace shape");
  const bool entropy_on = cfg.strategy == Strategy::Entropy || cfg.strategy == Strategy::EPEE;
  const bool patience_on = cfg.strategy == Strategy::Patience || cfg.strategy == Strategy::EPEE;
  if (entropy_on && (cfg.tau < 0.0 || cfg.tau > 1.0)) throw InputError("oracle: bad tau");
  if (patience_on && (cfg.patience == 0 || cfg.patience > M)) throw InputError("oracle: bad patience");
  if (cfg.strategy == Strategy::Budgeted && (cfg.budget_layer == 0 || cfg.budget_layer > M)) {
    throw InputError("oracle: bad budget layer");
  }

  std::vector<std::size_t> top(M);
  std::vector<double> ent(M);
  for (std::size_t i = 0; i < M; ++i) {
    std::size_t best = 0;
    double h = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double p = trace.probs(i, k);
      if (p > trace.probs(i, best)) best = k;
      if (p != 0.0) h += p * std::log(p);
    }
    top[i] = best;
    ent[i] = -h / std::log(double(K));
  }

  ExitOutcome out;
  if (cfg.strategy == Strategy::Budgeted) {
    out.exit_layer = cfg.budget_layer;
    out.triggered_by = ExitTrigger::Budget;
  } else {
    out.exit_layer = M;
    out.triggered_by = ExitTrigger::FinalLayerFallback;
    for (std::size_t i = 0; i < M; ++i) {
      // Length of the run of identical predictions ending at layer i.
      std::size_t run = 1;
      while (run <= i && top[i - run] == top[i]) ++run;
      const bool by_entropy = entropy_on && ent[i] < cfg.tau;
      const bool by_patience = patience_on && run == cfg.patience;
      if (by_entropy || by_patience) {
        out.exit_layer = i + 1;
        out.triggered_by = by_entropy ? ExitTrigger::EntropyRule : ExitTrigger::PatienceRule;
        break;
      }
    }
  }
  out.layers_used = out.exit_layer;
  out.predicted_class = top[out.exit_layer - 1];
  return out;
}

}  // namespace epee::oracle
