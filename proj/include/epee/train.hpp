#pragma once

// Joint training of all exits with SGD + momentum.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "epee/data.hpp"
#include "epee/model.hpp"

namespace epee {

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::size_t epochs = 10;
  WeightScheme weight_scheme = WeightScheme::LinearCost;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size == 0) throw InputError("train: batch_size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw InputError("train: learning_rate must be finite and non-negative");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InputError("train: momentum outside [0, 1)");
    if (epochs == 0) throw InputError("train: epochs must be at least 1");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"epochs", c.epochs},         {"weight_scheme", to_string(c.weight_scheme)}, {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  try {
    if (j.contains("batch_size")) base.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("learning_rate")) base.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("momentum")) base.momentum = j.at("momentum").get<double>();
    if (j.contains("epochs")) base.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("weight_scheme")) base.weight_scheme = parse_weight_scheme(j.at("weight_scheme").get<std::string>());
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed train config: ") + e.what());
  }
  return base;
}

struct TrainReport {
  std::vector<double> epoch_loss;                  // mean joint loss seen during each epoch
  std::vector<std::vector<double>> dev_accuracy;   // [epoch][layer]

  friend bool operator==(const TrainReport&, const TrainReport&) = default;
};

inline nlohmann::json to_json(const TrainReport& r) {
  return {{"epoch_loss", r.epoch_loss}, {"dev_accuracy", r.dev_accuracy}};
}

/// Token ids for every sample of a split, in split order.
inline std::vector<std::vector<TokenId>> encode_split(const Dataset& ds, Split split, std::size_t max_seq_len) {
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i : ds.indices(split)) out.push_back(tokenize(ds.samples[i].text, ds.vocab, max_seq_len));
  return out;
}

/// Per-layer argmax accuracy over a split.
inline std::vector<double> layer_accuracy(const MultiExitModel& model, const Dataset& ds, Split split) {
  const auto& idx = ds.indices(split);
  std::vector<double> acc(model.num_layers(), 0.0);
  if (idx.empty()) return acc;
  const auto encoded = encode_split(ds, split, model.config().max_seq_len);
  for (std::size_t s = 0; s < idx.size(); ++s) {
    const auto t = model.forward_all_exits(encoded[s]);
    for (std::size_t m = 0; m < model.num_layers(); ++m) {
      if (t.argmax[m] == ds.samples[idx[s]].label) acc[m] += 1.0;
    }
  }
  for (double& a : acc) a /= static_cast<double>(idx.size());
  return acc;
}

/// Called after each epoch with (epoch index, report so far).
using EpochCallback = std::function<void(std::size_t, const TrainReport&)>;

/// Mini-batch SGD with momentum on the joint loss. Deterministic given the
/// model's initial parameters and cfg.seed. Throws DivergenceError on a
/// non-finite loss.
inline TrainReport train(MultiExitModel& model, const Dataset& ds, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (ds.splits.train.empty()) throw InputError("train: empty train split");
  if (ds.num_classes > model.config().num_classes) throw InputError("train: dataset has more classes than the model");

  const auto params = model.parameters();
  std::vector<Matrix> velocity;
  velocity.reserve(params.size());
  for (Parameter* p : params) velocity.emplace_back(p->value.rows(), p->value.cols());

  const auto encoded = encode_split(ds, Split::Train, model.config().max_seq_len);
  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed);

  TrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      model.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t s = order[b];
        Graph g;
        const auto exits = MultiExitModel::build(model, g, encoded[s]);
        const auto sample_loss = joint_loss(g, exits, ds.samples[ds.splits.train[s]].label, cfg.weight_scheme);
        const double value = g.scalar(sample_loss);
        if (!std::isfinite(value)) {
          throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                ", sample " + std::to_string(ds.splits.train[s]));
        }
        epoch_total += value;
        g.backward(g.scale(sample_loss, inv_batch));
      }
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto v = velocity[k].data();
        auto w = params[k]->value.data();
        const auto gr = params[k]->grad.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = cfg.momentum * v[i] + gr[i];
          w[i] -= cfg.learning_rate * v[i];
        }
        if (!params[k]->value.all_finite()) {
          throw DivergenceError("training diverged: non-finite parameter " + params[k]->name + " at epoch " +
                                std::to_string(epoch + 1));
        }
      }
    }
    report.epoch_loss.push_back(epoch_total / static_cast<double>(order.size()));
    report.dev_accuracy.push_back(layer_accuracy(model, ds, Split::Dev));
    if (on_epoch) on_epoch(epoch, report);
  }
  return report;
}

/// Traces for one split, one sample at a time, in split order. Sample ids
/// are the dataset row indices.
inline std::vector<PredictionTrace> export_traces(const MultiExitModel& model, const Dataset& ds, Split split) {
  std::vector<PredictionTrace> traces;
  const auto& idx = ds.indices(split);
  traces.reserve(idx.size());
  for (std::size_t i : idx) {
    const auto tokens = tokenize(ds.samples[i].text, ds.vocab, model.config().max_seq_len);
    traces.push_back(model.forward_all_exits(tokens, std::to_string(i), ds.samples[i].label));
  }
  return traces;
}

}  // namespace epee
