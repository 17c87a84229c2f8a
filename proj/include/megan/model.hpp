#pragma once

// Decoder-only transformer whose FFN gates take a per-layer beta from the
// condition hypernetwork. Pre-norm residual blocks, RMS normalization, learned
// absolute positions, no biases.

#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "megan/gating.hpp"
#include "megan/hypernet.hpp"
#include "megan/model_config.hpp"
#include "megan/numerics.hpp"

namespace megan {

struct LayerWeights {
  Tensor attn_norm;  // 1 x D
  Tensor w_q, w_k, w_v, w_o;  // D x D
  Tensor ffn_norm;   // 1 x D
  Tensor w_gate, w_up;  // D x C
  Tensor w_down;        // C x D

  FfnBlock ffn() const { return {w_gate.matrix(), w_up.matrix(), w_down.matrix()}; }
};

/// The frozen parameter set w.
struct BaseWeights {
  Tensor token_embedding;     // vocab x D
  Tensor position_embedding;  // max_context x D
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // 1 x D
  Tensor output;      // D x vocab

  static BaseWeights init(const ModelConfig& config, std::mt19937_64& rng);

  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  void set_trainable(bool on);
  /// SHA-256 over every tensor buffer in name order.
  std::string sha256() const;
};

/// One sequence of a packed batch.
struct SequenceInput {
  std::vector<int> tokens;
  /// Leading rows the hypernetwork may read (condition prompt + x).
  std::size_t prefix_len = 0;
  /// Condition for the hypernetwork, or nullptr for beta = 0.
  const ConditionEncoding* condition = nullptr;
};

struct LayerVars {
  Var attn_norm, w_q, w_k, w_v, w_o, ffn_norm, w_gate, w_up, w_down;
};

struct ModelVars {
  Var token_embedding, position_embedding, final_norm, output;
  std::vector<LayerVars> layers;
  std::optional<HypernetVars> hyper;
};

ModelVars bind_model(Graph& g, BaseWeights& base, bool train_base, HypernetParams* hyper,
                     bool train_hyper);

struct GraphForward {
  Var logits;               // total rows x vocab
  std::vector<Var> betas;   // per layer: sequences x C raw beta
  std::vector<Segment> segments;
};

/// Packed forward over several sequences. `fixed_betas`, when given, holds one
/// (sequences x C) matrix per layer and replaces the hypernetwork output.
GraphForward forward_graph(Graph& g, const ModelVars& vars, std::span<const SequenceInput> batch,
                           const ModelConfig& config,
                           std::span<const Matrix> fixed_betas = {});

struct ForwardOutput {
  Matrix logits;  // T x vocab
  Matrix betas;   // L x C
};

ForwardOutput forward(std::span<const int> tokens, const ConditionEncoding* condition,
                      const BaseWeights& base, const HypernetParams* hyper,
                      const ModelConfig& config, std::optional<std::size_t> prefix_len = {});

struct Sampling {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Autoregressive continuation of `prompt_tokens`, stopping at EOS (not
/// returned) or after `max_new` tokens. Beta is computed once from the prompt.
/// Throws ContextOverflowError carrying the partial output when the context fills.
std::vector<int> generate(std::span<const int> prompt_tokens, const ConditionEncoding* condition,
                          const BaseWeights& base, const HypernetParams* hyper,
                          const ModelConfig& config, const Sampling& sampling, int max_new);

}  // namespace megan
