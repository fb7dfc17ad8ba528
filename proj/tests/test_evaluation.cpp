#include <algorithm>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "epee/evaluation.hpp"
#include "epee/exit_oracle.hpp"
#include "epee/verify.hpp"

namespace epee {
namespace {

double indicator_speedup(const std::vector<std::size_t>& exits, std::size_t layers) {
  // U[i][l] = 1 when sample i runs layer l.
  std::vector<std::vector<int>> used(exits.size(), std::vector<int>(layers, 0));
  for (std::size_t i = 0; i < exits.size(); ++i) {
    for (std::size_t l = 0; l < exits[i]; ++l) used[i][l] = 1;
  }
  std::size_t ran = 0;
  for (const auto& row : used) {
    for (int u : row) ran += static_cast<std::size_t>(u);
  }
  return 1.0 - static_cast<double>(ran) / static_cast<double>(exits.size() * layers);
}

std::vector<PredictionTrace> fixed_shape_traces(std::size_t n, std::uint64_t seed, std::size_t layers = 6,
                                                std::size_t classes = 3) {
  return random_traces(n, seed, RandomTraceOptions{layers, layers, classes, classes});
}

TEST(Speedup, Examples) {
  EXPECT_NEAR(speedup_ratio(std::vector<std::size_t>{1, 1, 2}, 4), 1.0 - 4.0 / 12.0, 1e-15);
  EXPECT_NEAR(speedup_ratio(std::vector<std::size_t>{1, 1, 2}, 4), 0.6667, 1e-4);
  EXPECT_EQ(speedup_ratio(std::vector<std::size_t>{6, 6, 6}, 6), 0.0);
  EXPECT_EQ(speedup_ratio(std::vector<std::size_t>{1, 2, 3, 4}, 4), 0.375);
}

TEST(Speedup, UniformExitLayer) {
  for (std::size_t layers = 1; layers <= 16; ++layers) {
    for (std::size_t m = 1; m <= layers; ++m) {
      const std::vector<std::size_t> exits(7, m);
      EXPECT_DOUBLE_EQ(speedup_ratio(exits, layers), 1.0 - static_cast<double>(m) / static_cast<double>(layers));
      EXPECT_EQ(speedup_ratio(exits, layers), indicator_speedup(exits, layers));
    }
  }
}

TEST(Speedup, MatchesIndicatorCount) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t layers = rng.between(1, 16);
    std::vector<std::size_t> exits(rng.between(1, 50));
    for (auto& e : exits) e = rng.between(1, layers);
    ASSERT_EQ(speedup_ratio(exits, layers), indicator_speedup(exits, layers));
  }
}

TEST(Speedup, RejectsBadInput) {
  EXPECT_THROW(speedup_ratio(std::vector<std::size_t>{}, 4), InputError);
  EXPECT_THROW(speedup_ratio(std::vector<std::size_t>{0}, 4), InputError);
  EXPECT_THROW(speedup_ratio(std::vector<std::size_t>{5}, 4), InputError);
}

TEST(MacroF1, Examples) {
  const std::vector<ClassIndex> gold{0, 0, 1}, pred{0, 0, 0};
  // Class 0: P = 2/3, R = 1, F1 = 0.8. Classes 1 and 2 score 0.
  EXPECT_NEAR(macro_f1(gold, pred, 3), 0.8 / 3.0, 1e-12);
  EXPECT_EQ(macro_f1(gold, gold, 2), 1.0);
  EXPECT_EQ(macro_f1(std::vector<ClassIndex>{0, 1}, std::vector<ClassIndex>{1, 0}, 2), 0.0);
}

TEST(MacroF1, MatchesPrecisionRecallDefinition) {
  Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = rng.between(2, 6);
    std::vector<ClassIndex> gold(rng.between(1, 40)), pred(gold.size());
    for (std::size_t i = 0; i < gold.size(); ++i) {
      gold[i] = rng.below(k);
      pred[i] = rng.bernoulli(0.5) ? gold[i] : rng.below(k);
    }
    double want = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double tp = 0, pred_c = 0, gold_c = 0;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        tp += (gold[i] == c && pred[i] == c);
        pred_c += (pred[i] == c);
        gold_c += (gold[i] == c);
      }
      const double precision = pred_c > 0 ? tp / pred_c : 0.0;
      const double recall = gold_c > 0 ? tp / gold_c : 0.0;
      want += precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    }
    ASSERT_NEAR(macro_f1(gold, pred, k), want / static_cast<double>(k), 1e-12);
  }
}

TEST(Evaluate, FullBudgetHasNoSpeedup) {
  const auto traces = fixed_shape_traces(50, 1);
  const auto r = evaluate(traces, ExitPolicyConfig::budgeted(6));
  EXPECT_EQ(r.speedup, 0.0);
  std::size_t correct = 0;
  for (const auto& t : traces) correct += t.argmax_at(6) == t.gold;
  EXPECT_EQ(r.accuracy, correct / 50.0);
  EXPECT_EQ(r.exit_histogram, (std::vector<std::size_t>{0, 0, 0, 0, 0, 50}));
}

TEST(Evaluate, ConfidentCorrectFirstLayer) {
  std::vector<PredictionTrace> traces;
  for (std::size_t i = 0; i < 8; ++i) {
    Matrix probs(5, 2, 0.5);
    probs(0, i % 2) = 1.0;
    probs(0, 1 - i % 2) = 0.0;
    traces.push_back(make_trace(std::to_string(i), i % 2, probs));
  }
  const auto r = evaluate(traces, ExitPolicyConfig::entropy(0.5));
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  EXPECT_DOUBLE_EQ(r.speedup, 1.0 - 1.0 / 5.0);
  EXPECT_EQ(r.n_samples, 8u);
}

TEST(Evaluate, MatchesOracleLoop) {
  const auto traces = fixed_shape_traces(200, 2);
  const auto cfg = ExitPolicyConfig::epee(0.3, 3);
  const auto r = evaluate(traces, cfg);
  std::size_t correct = 0, ran = 0;
  std::vector<std::size_t> hist(6, 0);
  for (const auto& t : traces) {
    const auto o = oracle::decide_exit_oracle(t, cfg);
    correct += o.predicted_class == t.gold;
    ran += o.exit_layer;
    ++hist[o.exit_layer - 1];
  }
  EXPECT_EQ(r.accuracy, correct / 200.0);
  EXPECT_NEAR(r.speedup, 1.0 - ran / 1200.0, 1e-15);
  EXPECT_EQ(r.exit_histogram, hist);
}

TEST(Evaluate, HistogramCarriesTheSpeedup) {
  const auto traces = fixed_shape_traces(300, 3, 9, 4);
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto cfg = ExitPolicyConfig::epee(rng.uniform(), rng.between(1, 9));
    const auto r = evaluate(traces, cfg);
    std::size_t total = 0;
    for (auto c : r.exit_histogram) total += c;
    EXPECT_EQ(total, traces.size());
    EXPECT_NEAR(r.speedup_from_histogram(), r.speedup, 1e-12);
  }
}

TEST(Evaluate, RejectsMixedShapesAndBadConfigs) {
  auto traces = fixed_shape_traces(3, 4);
  EXPECT_THROW(evaluate(traces, ExitPolicyConfig::budgeted(7)), InputError);
  traces.push_back(fixed_shape_traces(1, 5, 4, 3)[0]);
  EXPECT_THROW(evaluate(traces, ExitPolicyConfig::budgeted(1)), InputError);
  EXPECT_THROW(evaluate(std::vector<PredictionTrace>{}, ExitPolicyConfig::budgeted(1)), InputError);
}

TEST(BudgetedCurve, Example) {
  const std::vector<PredictionTrace> traces{
      make_trace("a", 0, Matrix::from_rows({{0.5, 0.5}, {0.9, 0.1}})),
      make_trace("b", 1, Matrix::from_rows({{1.0, 0.0}, {0.2, 0.8}})),
  };
  const auto curve = budgeted_curve(traces);
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_EQ(curve[0].layer, 1u);
  EXPECT_EQ(curve[0].accuracy, 0.5);
  EXPECT_NEAR(curve[0].mean_entropy, 0.5, 1e-12);
  EXPECT_EQ(curve[1].accuracy, 1.0);
  const double h = [](double p) { return -(p * std::log(p) + (1 - p) * std::log(1 - p)) / std::log(2.0); }(0.9);
  const double h2 = -(0.2 * std::log(0.2) + 0.8 * std::log(0.8)) / std::log(2.0);
  EXPECT_NEAR(curve[1].mean_entropy, (h + h2) / 2.0, 1e-12);
}

TEST(BudgetedCurve, AgreesWithBudgetedEvaluation) {
  const auto traces = fixed_shape_traces(120, 6, 7, 3);
  const auto curve = budgeted_curve(traces);
  for (std::size_t m = 1; m <= 7; ++m) {
    EXPECT_EQ(evaluate(traces, ExitPolicyConfig::budgeted(m)).accuracy, curve[m - 1].accuracy);
  }
}

std::vector<double> default_taus() { return tau_sweep(); }
std::vector<std::size_t> all_patience(std::size_t layers) {
  std::vector<std::size_t> p(layers);
  for (std::size_t i = 0; i < layers; ++i) p[i] = i + 1;
  return p;
}

TEST(Grid, CellsMatchIndividualEvaluations) {
  const auto traces = fixed_shape_traces(80, 7);
  const auto g = grid_search(traces, {0.5, 0.1, 0.1}, {3, 1});
  EXPECT_EQ(g.tau_values, (std::vector<double>{0.1, 0.5}));
  EXPECT_EQ(g.patience_values, (std::vector<std::size_t>{1, 3}));
  ASSERT_EQ(g.cells.size(), 4u);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const auto want = evaluate(traces, ExitPolicyConfig::epee(g.tau_values[i], g.patience_values[j]));
      EXPECT_EQ(g.at(i, j).accuracy, want.accuracy);
      EXPECT_EQ(g.at(i, j).speedup, want.speedup);
      EXPECT_EQ(g.at(i, j).config, want.config);
    }
  }
}

TEST(Grid, IndependentOfTraceOrderAndThreadCount) {
  auto traces = fixed_shape_traces(150, 8);
  const auto base = grid_search(traces, default_taus(), all_patience(6));
  Rng rng(1);
  rng.shuffle(traces);
  const auto shuffled = grid_search(traces, default_taus(), all_patience(6), 3);
  ASSERT_EQ(base.cells.size(), shuffled.cells.size());
  for (std::size_t c = 0; c < base.cells.size(); ++c) {
    EXPECT_EQ(base.cells[c].accuracy, shuffled.cells[c].accuracy);
    EXPECT_EQ(base.cells[c].macro_f1, shuffled.cells[c].macro_f1);
    EXPECT_EQ(base.cells[c].speedup, shuffled.cells[c].speedup);
    EXPECT_EQ(base.cells[c].exit_histogram, shuffled.cells[c].exit_histogram);
  }
}

TEST(Grid, SpeedupMonotoneAlongBothAxes) {
  const auto traces = fixed_shape_traces(200, 9);
  const auto g = grid_search(traces, default_taus(), all_patience(6));
  for (std::size_t i = 0; i < g.tau_values.size(); ++i) {
    for (std::size_t j = 0; j < g.patience_values.size(); ++j) {
      if (i > 0) {
        EXPECT_GE(g.at(i, j).speedup, g.at(i - 1, j).speedup);
      }
      if (j > 0) {
        EXPECT_LE(g.at(i, j).speedup, g.at(i, j - 1).speedup);
      }
    }
  }
}

TEST(Grid, RejectsOutOfRangeValues) {
  const auto traces = fixed_shape_traces(5, 10);
  EXPECT_THROW(grid_search(traces, {1.1}, {1}), InputError);
  EXPECT_THROW(grid_search(traces, {-0.1}, {1}), InputError);
  EXPECT_THROW(grid_search(traces, {0.5}, {0}), InputError);
  EXPECT_THROW(grid_search(traces, {0.5}, {7}), InputError);
  EXPECT_THROW(grid_search(traces, {}, {1}), InputError);
}

GridResult handmade_grid(const std::vector<std::pair<double, double>>& points) {
  GridResult g;
  g.patience_values = {1};
  for (std::size_t i = 0; i < points.size(); ++i) {
    g.tau_values.push_back(static_cast<double>(i) / 100.0);
    EvalResult r;
    r.config = ExitPolicyConfig::epee(static_cast<double>(i) / 100.0, 1);
    r.speedup = points[i].first;
    r.accuracy = points[i].second;
    g.cells.push_back(r);
  }
  return g;
}

TEST(Pareto, FasterCellWithEqualAccuracyDominates) {
  const auto f = pareto_frontier(handmade_grid({{0.2, 0.9}, {0.5, 0.9}}));
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].speedup, 0.5);
  EXPECT_EQ(f[0].config.tau, 0.01);
}

TEST(Pareto, IdenticalCellsCollapseToFirst) {
  const auto f = pareto_frontier(handmade_grid({{0.3, 0.8}, {0.3, 0.8}, {0.3, 0.8}}));
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].config.tau, 0.0);

  std::vector<PredictionTrace> traces;
  for (int i = 0; i < 4; ++i) traces.push_back(make_trace("h", 0, Matrix::from_rows({{1.0, 0.0}, {1.0, 0.0}, {1.0, 0.0}})));
  EXPECT_EQ(pareto_frontier(grid_search(traces, {0.05, 0.5, 1.0}, all_patience(3))).size(), 1u);
}

TEST(Pareto, SortedAscendingBySpeedup) {
  const auto f = pareto_frontier(handmade_grid({{0.6, 0.7}, {0.1, 0.95}, {0.4, 0.8}, {0.3, 0.75}}));
  ASSERT_EQ(f.size(), 3u);
  EXPECT_EQ(f[0].speedup, 0.1);
  EXPECT_EQ(f[1].speedup, 0.4);
  EXPECT_EQ(f[2].speedup, 0.6);
}

TEST(Pareto, MatchesPairwiseDominanceOnRandomGrids) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::pair<double, double>> pts(rng.between(1, 40));
    for (auto& p : pts) p = {rng.below(6) / 5.0, rng.below(6) / 5.0};
    const auto grid = handmade_grid(pts);
    std::vector<std::pair<double, double>> want;
    std::vector<double> want_tau;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      bool dominated = false;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        const bool geq = pts[j].first >= pts[i].first && pts[j].second >= pts[i].second;
        const bool strict = pts[j].first > pts[i].first || pts[j].second > pts[i].second;
        dominated = dominated || (geq && strict);
      }
      if (!dominated && std::find(want.begin(), want.end(), pts[i]) == want.end()) {
        want.push_back(pts[i]);
        want_tau.push_back(grid.cells[i].config.tau);
      }
    }
    std::vector<std::size_t> order(want.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return want[a].first < want[b].first; });
    const auto got = pareto_frontier(grid);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].speedup, want[order[i]].first);
      EXPECT_EQ(got[i].accuracy, want[order[i]].second);
      EXPECT_EQ(got[i].config.tau, want_tau[order[i]]);
    }
  }
}

TEST(Output, GridCsvLayout) {
  const auto traces = fixed_shape_traces(10, 12);
  const auto g = grid_search(traces, {0.25, 0.5}, {1, 2});
  std::ostringstream out;
  write_grid_csv(out, g);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "tau,patience,accuracy,macro_f1,speedup,n_samples");
  std::getline(in, line);
  EXPECT_TRUE(line.starts_with("0.250000,1,")) << line;
  EXPECT_TRUE(line.ends_with(",10")) << line;
  int rows = 1;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST(Output, CurveAndHistogramCsv) {
  const std::vector<PredictionTrace> traces{make_trace("a", 0, Matrix::from_rows({{0.5, 0.5}, {1.0, 0.0}}))};
  std::ostringstream curve;
  write_curve_csv(curve, budgeted_curve(traces));
  EXPECT_EQ(curve.str(), "layer,accuracy,mean_entropy\n1,1.000000,1.000000\n2,1.000000,0.000000\n");
  std::ostringstream hist;
  write_histogram_csv(hist, evaluate(traces, ExitPolicyConfig::budgeted(2)));
  EXPECT_EQ(hist.str(), "layer,count\n1,0\n2,1\n");
}

TEST(Output, FrontierJson) {
  const auto j = frontier_to_json(pareto_frontier(handmade_grid({{0.25, 0.5}})));
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0].at("speedup"), 0.25);
  EXPECT_EQ(j[0].at("accuracy"), 0.5);
  EXPECT_EQ(j[0].at("patience"), 1);
  EXPECT_TRUE(j[0].contains("tau"));
  const auto e = to_json(evaluate(std::vector<PredictionTrace>{make_trace("a", 0, Matrix::from_rows({{0.5, 0.5}, {1.0, 0.0}}))},
                                  ExitPolicyConfig::budgeted(1)));
  for (const char* key : {"config", "accuracy", "macro_f1", "speedup", "exit_histogram", "n_samples"}) {
    EXPECT_TRUE(e.contains(key)) << key;
  }
}

}  // namespace
}  // namespace epee
