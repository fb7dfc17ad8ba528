#pragma once

// Transformer encoder classifier with an exit head after every block.
//
// Layout per sample (L content tokens, hidden size d):
//   x_0 = LayerNorm(tok_emb[tokens] + pos_emb[0..L))
//   block m:  a = x + MHSA(x);  a = LayerNorm(a)
//             x_m = LayerNorm(a + W2 relu(W1 a + b1) + b2)
//   exit m:   p_m = softmax(x_m[0] Wh_m + bh_m)
//
// Every head reads only the first-position hidden state of its own block.
// Trailing PAD positions are not executed; PAD keys would be masked out of
// attention anyway, so dropping them leaves every content position exact.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "epee/autodiff.hpp"
#include "epee/data.hpp"
#include "epee/errors.hpp"
#include "epee/rng.hpp"
#include "epee/trace.hpp"

namespace epee {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t num_layers = 6;
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t num_classes = 2;
  std::size_t max_seq_len = 32;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 2) throw InputError("model: vocab_size must be at least 2 (PAD, UNK)");
    if (num_layers < 2) throw InputError("model: num_layers must be at least 2");
    if (num_classes < 2) throw InputError("model: num_classes must be at least 2");
    if (hidden_dim == 0 || num_heads == 0 || hidden_dim % num_heads != 0) {
      throw InputError("model: hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                       std::to_string(num_heads));
    }
    if (ffn_dim == 0 || max_seq_len == 0) throw InputError("model: ffn_dim and max_seq_len must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim},
          {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},       {"num_classes", c.num_classes},
          {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

/// Overlays keys present in `j` onto `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  try {
    if (j.contains("vocab_size")) base.vocab_size = j.at("vocab_size").get<std::size_t>();
    if (j.contains("num_layers")) base.num_layers = j.at("num_layers").get<std::size_t>();
    if (j.contains("hidden_dim")) base.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    if (j.contains("num_heads")) base.num_heads = j.at("num_heads").get<std::size_t>();
    if (j.contains("ffn_dim")) base.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    if (j.contains("num_classes")) base.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("max_seq_len")) base.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed model config: ") + e.what());
  }
  return base;
}

struct TransformerBlock {
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter ln1_gain, ln1_shift;
  Parameter w1, b1, w2, b2;
  Parameter ln2_gain, ln2_shift;
};

struct ExitHead {
  Parameter weight;  // d x K
  Parameter bias;    // 1 x K
};

class MultiExitModel {
 public:
  explicit MultiExitModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const std::size_t d = cfg_.hidden_dim;
    auto weight = [&](const std::string& name, std::size_t r, std::size_t c) {
      Matrix m(r, c);
      for (double& v : m.data()) v = rng.uniform(-0.05, 0.05);
      return Parameter(name, std::move(m));
    };
    auto constant = [](const std::string& name, std::size_t c, double v) { return Parameter(name, Matrix(1, c, v)); };

    token_embedding_ = weight("token_embedding", cfg_.vocab_size, d);
    position_embedding_ = weight("position_embedding", cfg_.max_seq_len, d);
    embed_gain_ = constant("embed_ln.gain", d, 1.0);
    embed_shift_ = constant("embed_ln.shift", d, 0.0);
    blocks_.resize(cfg_.num_layers);
    heads_.resize(cfg_.num_layers);
    for (std::size_t m = 0; m < cfg_.num_layers; ++m) {
      const std::string p = "block" + std::to_string(m + 1) + ".";
      TransformerBlock& b = blocks_[m];
      b.wq = weight(p + "wq", d, d);
      b.bq = constant(p + "bq", d, 0.0);
      b.wk = weight(p + "wk", d, d);
      b.bk = constant(p + "bk", d, 0.0);
      b.wv = weight(p + "wv", d, d);
      b.bv = constant(p + "bv", d, 0.0);
      b.wo = weight(p + "wo", d, d);
      b.bo = constant(p + "bo", d, 0.0);
      b.ln1_gain = constant(p + "ln1.gain", d, 1.0);
      b.ln1_shift = constant(p + "ln1.shift", d, 0.0);
      b.w1 = weight(p + "w1", d, cfg_.ffn_dim);
      b.b1 = constant(p + "b1", cfg_.ffn_dim, 0.0);
      b.w2 = weight(p + "w2", cfg_.ffn_dim, d);
      b.b2 = constant(p + "b2", d, 0.0);
      b.ln2_gain = constant(p + "ln2.gain", d, 1.0);
      b.ln2_shift = constant(p + "ln2.shift", d, 0.0);
      const std::string h = "exit" + std::to_string(m + 1) + ".";
      heads_[m].weight = weight(h + "weight", d, cfg_.num_classes);
      heads_[m].bias = constant(h + "bias", cfg_.num_classes, 0.0);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_layers() const { return cfg_.num_layers; }

  std::vector<ExitHead>& heads() { return heads_; }
  const std::vector<ExitHead>& heads() const { return heads_; }

  /// Every parameter in declaration order (the checkpoint order).
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&token_embedding_, &position_embedding_, &embed_gain_, &embed_shift_};
    for (std::size_t m = 0; m < cfg_.num_layers; ++m) {
      TransformerBlock& b = blocks_[m];
      for (Parameter* p : {&b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln1_gain, &b.ln1_shift,
                           &b.w1, &b.b1, &b.w2, &b.b2, &b.ln2_gain, &b.ln2_shift}) {
        out.push_back(p);
      }
      out.push_back(&heads_[m].weight);
      out.push_back(&heads_[m].bias);
    }
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    auto mut = const_cast<MultiExitModel*>(this)->parameters();
    return {mut.begin(), mut.end()};
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  /// Checks length and vocabulary bounds; throws InputError.
  void validate_tokens(std::span<const TokenId> tokens) const {
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (tokens.size() > cfg_.max_seq_len) {
      throw InputError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                       std::to_string(cfg_.max_seq_len));
    }
    for (TokenId t : tokens) {
      if (t >= cfg_.vocab_size) {
        throw InputError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                         std::to_string(cfg_.vocab_size));
      }
    }
  }

  /// Records one forward pass and returns the per-exit probability nodes.
  /// `Self` is MultiExitModel or const MultiExitModel; only the former lets
  /// gradients reach the parameters.
  template <typename Self>
  static std::vector<Graph::Var> build(Self& self, Graph& g, std::span<const TokenId> tokens) {
    self.validate_tokens(tokens);
    std::size_t length = tokens.size();
    while (length > 1 && tokens[length - 1] == kPadId) --length;
    const auto content = tokens.first(length);
    std::vector<std::size_t> positions(length);
    for (std::size_t i = 0; i < length; ++i) positions[i] = i;

    const std::size_t d = self.cfg_.hidden_dim;
    const std::size_t heads = self.cfg_.num_heads;
    const std::size_t head_dim = d / heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

    Graph::Var x = g.add(g.gather_rows(g.param(self.token_embedding_), content),
                         g.gather_rows(g.param(self.position_embedding_), positions));
    x = g.layer_norm(x, g.param(self.embed_gain_), g.param(self.embed_shift_));

    std::vector<Graph::Var> exits;
    exits.reserve(self.cfg_.num_layers);
    for (std::size_t m = 0; m < self.cfg_.num_layers; ++m) {
      auto& b = self.blocks_[m];
      const auto q = g.add_bias(g.matmul(x, g.param(b.wq)), g.param(b.bq));
      const auto k = g.add_bias(g.matmul(x, g.param(b.wk)), g.param(b.bk));
      const auto v = g.add_bias(g.matmul(x, g.param(b.wv)), g.param(b.bv));
      std::vector<Graph::Var> per_head;
      per_head.reserve(heads);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t lo = h * head_dim;
        const std::size_t hi = lo + head_dim;
        const auto qh = g.slice_cols(q, lo, hi);
        const auto kh = g.slice_cols(k, lo, hi);
        const auto vh = g.slice_cols(v, lo, hi);
        const auto scores = g.scale(g.matmul(qh, g.transpose(kh)), attn_scale);
        per_head.push_back(g.matmul(g.softmax_rows(scores), vh));
      }
      const auto attn = g.add_bias(g.matmul(g.concat_cols(per_head), g.param(b.wo)), g.param(b.bo));
      const auto a = g.layer_norm(g.add(x, attn), g.param(b.ln1_gain), g.param(b.ln1_shift));
      const auto hidden = g.relu(g.add_bias(g.matmul(a, g.param(b.w1)), g.param(b.b1)));
      const auto ffn = g.add_bias(g.matmul(hidden, g.param(b.w2)), g.param(b.b2));
      x = g.layer_norm(g.add(a, ffn), g.param(b.ln2_gain), g.param(b.ln2_shift));

      auto& head = self.heads_[m];
      const auto logits = g.add_bias(g.matmul(g.row(x, 0), g.param(head.weight)), g.param(head.bias));
      exits.push_back(g.softmax_rows(logits));
    }
    return exits;
  }

  /// Per-layer distributions for a single sample (batch size 1).
  PredictionTrace forward_all_exits(std::span<const TokenId> tokens, std::string sample_id = {},
                                    ClassIndex gold = 0) const {
    Graph g;
    const auto exits = build(*this, g, tokens);
    Matrix probs(exits.size(), cfg_.num_classes);
    for (std::size_t m = 0; m < exits.size(); ++m) {
      const auto row = g.value(exits[m]).row(0);
      std::copy(row.begin(), row.end(), probs.row(m).begin());
    }
    return make_trace(std::move(sample_id), gold, std::move(probs));
  }

 private:
  ModelConfig cfg_;
  Parameter token_embedding_;
  Parameter position_embedding_;
  Parameter embed_gain_;
  Parameter embed_shift_;
  std::vector<TransformerBlock> blocks_;
  std::vector<ExitHead> heads_;
};

enum class WeightScheme { LinearCost, Uniform };

inline WeightScheme parse_weight_scheme(const std::string& s) {
  if (s == "linear-cost" || s == "linear_cost") return WeightScheme::LinearCost;
  if (s == "uniform") return WeightScheme::Uniform;
  throw InputError("unknown weight scheme \"" + s + "\" (expected linear-cost|uniform)");
}

inline std::string to_string(WeightScheme w) { return w == WeightScheme::LinearCost ? "linear-cost" : "uniform"; }

/// Exit weights: w_m = m (cost of reaching exit m) or 1.
inline std::vector<double> exit_weights(std::size_t num_layers, WeightScheme scheme) {
  std::vector<double> w(num_layers, 1.0);
  if (scheme == WeightScheme::LinearCost) {
    for (std::size_t m = 0; m < num_layers; ++m) w[m] = static_cast<double>(m + 1);
  }
  return w;
}

/// Weighted average of per-exit cross-entropies for one sample, on the tape.
inline Graph::Var joint_loss(Graph& g, std::span<const Graph::Var> exit_probs, ClassIndex label, WeightScheme scheme) {
  if (exit_probs.empty()) throw InputError("joint_loss: no exits");
  const auto w = exit_weights(exit_probs.size(), scheme);
  double total_w = 0.0;
  for (double v : w) total_w += v;
  Graph::Var loss = g.scale(g.cross_entropy(exit_probs[0], label), w[0] / total_w);
  for (std::size_t m = 1; m < exit_probs.size(); ++m) {
    loss = g.add(loss, g.scale(g.cross_entropy(exit_probs[m], label), w[m] / total_w));
  }
  return loss;
}

/// Batch form over stored traces: sum_m w_m CE(y, p_m) / sum_m w_m, averaged
/// over the batch.
inline double joint_loss(std::span<const PredictionTrace> batch, WeightScheme scheme) {
  if (batch.empty()) throw InputError("joint_loss: empty batch");
  double total = 0.0;
  for (const auto& t : batch) {
    Graph g;
    std::vector<Graph::Var> exits;
    for (std::size_t m = 0; m < t.num_layers(); ++m) exits.push_back(g.input(Matrix::row_vector(t.probs.row(m))));
    total += g.scalar(joint_loss(g, exits, t.gold, scheme));
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace epee
