#pragma once

// Invariant suites for the exit-policy engine, run over supplied or
// randomly generated traces:
//
//   degeneracy-entropy   EPEE(tau, P=M) exits where Entropy(tau) does
//   degeneracy-patience  EPEE(0, P) == Patience(P), every field
//   oracle-equivalence   decide_exit == oracle::decide_exit_oracle
//   monotone-tau         exit layer never grows as tau grows
//   monotone-patience    exit layer never shrinks as patience grows

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "epee/exit_oracle.hpp"
#include "epee/exit_policy.hpp"
#include "epee/rng.hpp"
#include "epee/trace.hpp"

namespace epee {

struct RandomTraceOptions {
  std::size_t min_layers = 2;
  std::size_t max_layers = 12;
  std::size_t min_classes = 2;
  std::size_t max_classes = 8;
};

/// One random trace. Rows are a mix of exact one-hot, exact uniform and
/// softmaxed random logits of varying sharpness; consecutive layers often
/// repeat the previous favourite so patience runs actually occur.
inline PredictionTrace random_trace(Rng& rng, const RandomTraceOptions& opt = {}, std::string id = {}) {
  const std::size_t layers = rng.between(opt.min_layers, opt.max_layers);
  const std::size_t classes = rng.between(opt.min_classes, opt.max_classes);
  Matrix probs(layers, classes);
  std::size_t favourite = rng.below(classes);
  for (std::size_t m = 0; m < layers; ++m) {
    if (rng.bernoulli(0.35)) favourite = rng.below(classes);
    auto row = probs.row(m);
    const double kind = rng.uniform();
    if (kind < 0.08) {
      row[favourite] = 1.0;
    } else if (kind < 0.14) {
      for (double& p : row) p = 1.0 / static_cast<double>(classes);
    } else {
      const double sharpness = rng.uniform(0.0, 6.0);
      double total = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        double logit = rng.normal();
        if (k == favourite) logit += sharpness;
        row[k] = std::exp(logit);
        total += row[k];
      }
      for (double& p : row) p /= total;
    }
  }
  return make_trace(std::move(id), rng.below(classes), std::move(probs));
}

inline std::vector<PredictionTrace> random_traces(std::size_t n, std::uint64_t seed, const RandomTraceOptions& opt = {}) {
  Rng rng(seed);
  std::vector<PredictionTrace> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_trace(rng, opt, "rand-" + std::to_string(i)));
  return out;
}

struct SuiteResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t violations = 0;
  double seconds = 0.0;
  std::string first_failure;

  bool passed() const { return violations == 0; }
};

namespace detail {

template <typename Body>
SuiteResult run_suite(std::string name, Body&& body) {
  SuiteResult r;
  r.name = std::move(name);
  const auto start = std::chrono::steady_clock::now();
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline void record(SuiteResult& r, bool ok, const PredictionTrace& t, const std::string& what) {
  ++r.cases;
  if (ok) return;
  if (r.violations++ == 0) r.first_failure = "trace " + t.sample_id + ": " + what;
}

inline std::string describe(const ExitPolicyConfig& c) { return to_json(c).dump(); }

}  // namespace detail

/// The 21 thresholds 0.00, 0.05, ..., 1.00.
inline std::vector<double> tau_sweep() {
  std::vector<double> taus;
  for (int i = 0; i <= 20; ++i) taus.push_back(i / 20.0);
  return taus;
}

/// Runs all five suites. Per-trace thresholds and patience values are drawn
/// from `seed` so the same corpus always sees the same configurations.
inline std::vector<SuiteResult> run_invariant_suites(std::span<const PredictionTrace> traces, std::uint64_t seed) {
  std::vector<double> taus(traces.size());
  std::vector<std::size_t> patiences(traces.size());
  std::vector<ExitPolicyConfig> mixed(traces.size());
  {
    Rng rng(seed);
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const std::size_t layers = traces[i].num_layers();
      taus[i] = rng.uniform();
      patiences[i] = rng.between(1, layers);
      switch (rng.below(4)) {
        case 0: mixed[i] = ExitPolicyConfig::entropy(taus[i]); break;
        case 1: mixed[i] = ExitPolicyConfig::patience_only(patiences[i]); break;
        case 2: mixed[i] = ExitPolicyConfig::epee(taus[i], patiences[i]); break;
        default: mixed[i] = ExitPolicyConfig::budgeted(rng.between(1, layers)); break;
      }
    }
  }

  std::vector<SuiteResult> results;
  results.push_back(detail::run_suite("degeneracy-entropy", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const auto& t = traces[i];
      const auto a = decide_exit(t, ExitPolicyConfig::epee(taus[i], t.num_layers()));
      const auto b = decide_exit(t, ExitPolicyConfig::entropy(taus[i]));
      detail::record(r, a.exit_layer == b.exit_layer && a.predicted_class == b.predicted_class, t,
                     "tau=" + std::to_string(taus[i]));
    }
  }));
  results.push_back(detail::run_suite("degeneracy-patience", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const auto& t = traces[i];
      const auto a = decide_exit(t, ExitPolicyConfig::epee(0.0, patiences[i]));
      const auto b = decide_exit(t, ExitPolicyConfig::patience_only(patiences[i]));
      detail::record(r, a == b, t, "patience=" + std::to_string(patiences[i]));
    }
  }));
  results.push_back(detail::run_suite("oracle-equivalence", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const auto& t = traces[i];
      for (const auto& cfg : {mixed[i], ExitPolicyConfig::epee(taus[i], patiences[i])}) {
        detail::record(r, decide_exit(t, cfg) == oracle::decide_exit_oracle(t, cfg), t, detail::describe(cfg));
      }
    }
  }));
  const auto sweep = tau_sweep();
  results.push_back(detail::run_suite("monotone-tau", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const auto& t = traces[i];
      std::size_t prev = t.num_layers() + 1;
      bool ok = true;
      for (double tau : sweep) {
        const std::size_t layer = decide_exit(t, ExitPolicyConfig::epee(tau, patiences[i])).exit_layer;
        ok = ok && layer <= prev;
        prev = layer;
      }
      detail::record(r, ok, t, "patience=" + std::to_string(patiences[i]));
    }
  }));
  results.push_back(detail::run_suite("monotone-patience", [&](SuiteResult& r) {
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const auto& t = traces[i];
      std::size_t prev = 0;
      bool ok = true;
      for (std::size_t p = 1; p <= t.num_layers(); ++p) {
        const std::size_t layer = decide_exit(t, ExitPolicyConfig::epee(taus[i], p)).exit_layer;
        ok = ok && layer >= prev;
        prev = layer;
      }
      detail::record(r, ok, t, "tau=" + std::to_string(taus[i]));
    }
  }));
  return results;
}

}  // namespace epee
