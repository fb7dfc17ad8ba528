#pragma once

// Policy evaluation over cached traces: accuracy, macro-F1, speed-up,
// per-layer budgeted curves, (tau, patience) grid search and its Pareto
// frontier. Nothing here touches the model; every number is replayed from
// PredictionTraces.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "epee/errors.hpp"
#include "epee/exit_policy.hpp"
#include "epee/trace.hpp"

namespace epee {

/// 1 - (sum of exit layers) / (N * M). Exiting at layer m consumes layers
/// 1..m, so the per-sample count of executed layers is the exit layer itself.
inline double speedup_ratio(std::span<const std::size_t> exit_layers, std::size_t num_layers) {
  if (exit_layers.empty()) throw InputError("speedup_ratio: no samples");
  if (num_layers == 0) throw InputError("speedup_ratio: zero layers");
  std::size_t used = 0;
  for (std::size_t m : exit_layers) {
    if (m < 1 || m > num_layers) {
      throw InputError("speedup_ratio: exit layer " + std::to_string(m) + " outside [1, " +
                       std::to_string(num_layers) + "]");
    }
    used += m;
  }
  return 1.0 - static_cast<double>(used) / (static_cast<double>(exit_layers.size()) * static_cast<double>(num_layers));
}

/// Unweighted mean of per-class F1 over `num_classes` classes. A class with
/// precision + recall == 0 (including one absent from both gold and
/// predictions) scores 0.
inline double macro_f1(std::span<const ClassIndex> gold, std::span<const ClassIndex> predicted,
                       std::size_t num_classes) {
  if (gold.size() != predicted.size()) throw InputError("macro_f1: length mismatch");
  if (num_classes == 0) return 0.0;
  std::vector<std::size_t> tp(num_classes), fp(num_classes), fn(num_classes);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] == predicted[i]) {
      ++tp[gold[i]];
    } else {
      ++fp[predicted[i]];
      ++fn[gold[i]];
    }
  }
  double total = 0.0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double denom = 2.0 * static_cast<double>(tp[k]) + static_cast<double>(fp[k] + fn[k]);
    if (tp[k] > 0) total += 2.0 * static_cast<double>(tp[k]) / denom;
  }
  return total / static_cast<double>(num_classes);
}

struct EvalResult {
  ExitPolicyConfig config;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double speedup = 0.0;
  std::vector<std::size_t> exit_histogram;  // index 0 is layer 1
  std::size_t n_samples = 0;

  /// Speed-up recomputed from the histogram alone.
  double speedup_from_histogram() const {
    std::size_t used = 0;
    for (std::size_t i = 0; i < exit_histogram.size(); ++i) used += (i + 1) * exit_histogram[i];
    return 1.0 - static_cast<double>(used) /
                     (static_cast<double>(n_samples) * static_cast<double>(exit_histogram.size()));
  }
};

/// Shared (layers, classes) of a trace set; throws if they disagree.
inline std::pair<std::size_t, std::size_t> trace_shape(std::span<const PredictionTrace> traces) {
  if (traces.empty()) throw InputError("no traces");
  const std::size_t layers = traces.front().num_layers();
  const std::size_t classes = traces.front().num_classes();
  for (const auto& t : traces) {
    if (t.num_layers() != layers || t.num_classes() != classes) {
      throw InputError("trace " + t.sample_id + " has shape " + t.probs.shape() + ", expected " +
                       Matrix::shape_string(layers, classes));
    }
  }
  return {layers, classes};
}

inline EvalResult evaluate(std::span<const PredictionTrace> traces, const ExitPolicyConfig& cfg) {
  const auto [layers, classes] = trace_shape(traces);
  cfg.validate(layers);
  EvalResult r;
  r.config = cfg;
  r.n_samples = traces.size();
  r.exit_histogram.assign(layers, 0);
  std::vector<ClassIndex> gold, predicted;
  std::vector<std::size_t> exits;
  gold.reserve(traces.size());
  predicted.reserve(traces.size());
  exits.reserve(traces.size());
  std::size_t correct = 0;
  for (const auto& t : traces) {
    const ExitOutcome o = decide_exit(t, cfg);
    ++r.exit_histogram[o.exit_layer - 1];
    exits.push_back(o.exit_layer);
    gold.push_back(t.gold);
    predicted.push_back(o.predicted_class);
    if (o.predicted_class == t.gold) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(traces.size());
  r.macro_f1 = macro_f1(gold, predicted, classes);
  r.speedup = speedup_ratio(exits, layers);
  return r;
}

inline nlohmann::json to_json(const EvalResult& r) {
  return {{"config", to_json(r.config)},     {"accuracy", r.accuracy},
          {"macro_f1", r.macro_f1},          {"speedup", r.speedup},
          {"exit_histogram", r.exit_histogram}, {"n_samples", r.n_samples}};
}

struct LayerStat {
  std::size_t layer = 0;
  double accuracy = 0.0;
  double mean_entropy = 0.0;
};

/// Accuracy and mean normalized entropy of every exit used on its own.
inline std::vector<LayerStat> budgeted_curve(std::span<const PredictionTrace> traces) {
  const std::size_t layers = trace_shape(traces).first;
  std::vector<LayerStat> curve(layers);
  const double n = static_cast<double>(traces.size());
  for (std::size_t m = 1; m <= layers; ++m) {
    std::size_t correct = 0;
    double entropy = 0.0;
    for (const auto& t : traces) {
      if (t.argmax_at(m) == t.gold) ++correct;
      entropy += t.entropy_at(m);
    }
    curve[m - 1] = {m, static_cast<double>(correct) / n, entropy / n};
  }
  return curve;
}

struct GridResult {
  std::vector<double> tau_values;           // ascending
  std::vector<std::size_t> patience_values; // ascending
  std::vector<EvalResult> cells;            // tau-major: cells[i * |patience| + j]

  const EvalResult& at(std::size_t tau_index, std::size_t patience_index) const {
    return cells[tau_index * patience_values.size() + patience_index];
  }
};

/// Evaluates EPEE on every (tau, patience) pair. Value lists are sorted and
/// de-duplicated first; out-of-range values are rejected before any work.
/// Cells are independent, so `threads` > 1 splits them across workers
/// without changing the result.
inline GridResult grid_search(std::span<const PredictionTrace> traces, std::vector<double> tau_values,
                              std::vector<std::size_t> patience_values, unsigned threads = 1) {
  const std::size_t layers = trace_shape(traces).first;
  if (tau_values.empty() || patience_values.empty()) throw InputError("grid_search: empty value list");
  for (double t : tau_values) {
    if (!(t >= 0.0 && t <= 1.0)) throw InputError("grid_search: tau " + std::to_string(t) + " outside [0, 1]");
  }
  for (std::size_t p : patience_values) {
    if (p < 1 || p > layers) {
      throw InputError("grid_search: patience " + std::to_string(p) + " outside [1, " + std::to_string(layers) + "]");
    }
  }
  std::sort(tau_values.begin(), tau_values.end());
  tau_values.erase(std::unique(tau_values.begin(), tau_values.end()), tau_values.end());
  std::sort(patience_values.begin(), patience_values.end());
  patience_values.erase(std::unique(patience_values.begin(), patience_values.end()), patience_values.end());

  GridResult g;
  g.tau_values = std::move(tau_values);
  g.patience_values = std::move(patience_values);
  const std::size_t n_cells = g.tau_values.size() * g.patience_values.size();
  g.cells.resize(n_cells);
  auto run_cell = [&](std::size_t c) {
    const double tau = g.tau_values[c / g.patience_values.size()];
    const std::size_t patience = g.patience_values[c % g.patience_values.size()];
    g.cells[c] = evaluate(traces, ExitPolicyConfig::epee(tau, patience));
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n_cells)));
  if (threads == 1) {
    for (std::size_t c = 0; c < n_cells; ++c) run_cell(c);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < n_cells; c += threads) run_cell(c);
      });
    }
  }
  return g;
}

struct FrontierPoint {
  double speedup = 0.0;
  double accuracy = 0.0;
  ExitPolicyConfig config;
};

/// Cells not dominated in (speedup, accuracy), ascending by speed-up.
/// Cells with an identical (speedup, accuracy) point are represented once,
/// by the first such cell in grid order.
inline std::vector<FrontierPoint> pareto_frontier(const GridResult& grid) {
  if (grid.cells.empty()) throw InputError("pareto_frontier: empty grid");
  std::vector<std::size_t> order(grid.cells.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fastest first; within equal speed-up the most accurate, then grid order.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = grid.cells[a];
    const auto& y = grid.cells[b];
    if (x.speedup != y.speedup) return x.speedup > y.speedup;
    return x.accuracy > y.accuracy;
  });
  std::vector<FrontierPoint> frontier;
  for (std::size_t idx : order) {
    const auto& c = grid.cells[idx];
    // Anything already kept is at least as fast, so c survives only by
    // beating every kept accuracy.
    if (frontier.empty() || c.accuracy > frontier.back().accuracy) {
      frontier.push_back({c.speedup, c.accuracy, c.config});
    }
  }
  std::reverse(frontier.begin(), frontier.end());
  return frontier;
}

namespace detail {

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

/// One grid CSV data row (no newline).
inline std::string grid_csv_row(const EvalResult& r) {
  return detail::fixed6(r.config.tau) + "," + std::to_string(r.config.patience) + "," +
         detail::fixed6(r.accuracy) + "," + detail::fixed6(r.macro_f1) + "," + detail::fixed6(r.speedup) + "," +
         std::to_string(r.n_samples);
}

inline constexpr const char* kGridCsvHeader = "tau,patience,accuracy,macro_f1,speedup,n_samples";

/// Rows come out sorted by (tau, patience) because the grid is stored that way.
inline void write_grid_csv(std::ostream& out, const GridResult& grid) {
  out << kGridCsvHeader << '\n';
  for (const auto& cell : grid.cells) out << grid_csv_row(cell) << '\n';
}

inline void write_curve_csv(std::ostream& out, std::span<const LayerStat> curve) {
  out << "layer,accuracy,mean_entropy\n";
  for (const auto& s : curve) {
    out << s.layer << ',' << detail::fixed6(s.accuracy) << ',' << detail::fixed6(s.mean_entropy) << '\n';
  }
}

inline void write_histogram_csv(std::ostream& out, const EvalResult& r) {
  out << "layer,count\n";
  for (std::size_t i = 0; i < r.exit_histogram.size(); ++i) out << i + 1 << ',' << r.exit_histogram[i] << '\n';
}

inline nlohmann::json frontier_to_json(std::span<const FrontierPoint> frontier) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : frontier) {
    arr.push_back({{"tau", p.config.tau},
                   {"patience", p.config.patience},
                   {"speedup", p.speedup},
                   {"accuracy", p.accuracy}});
  }
  return arr;
}

}  // namespace epee
