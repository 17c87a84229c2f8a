#pragma once

// Condition hypernetwork: textual condition + layer latent + layer index -> beta.
//
//   q = emb(p(z)) Wq,  k = a_l Wk,  v = a_l Wv           (R columns each)
//   e_z = mean over condition tokens of softmax(q k^T / sqrt(R)) v
//   beta_l = tanh((e_z + layer_emb[l]) Wout)              (C columns)
//
// Only these five tensors are trainable; the condition embeddings are exact
// lookups into the frozen base token table.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "megan/gating.hpp"
#include "megan/model_config.hpp"
#include "megan/numerics.hpp"

namespace megan {

enum class ConditionType { task, domain, persona, style, sentiment, emotion, synthetic };

std::string_view to_string(ConditionType type);
/// Throws ValueError listing the known names for anything else.
ConditionType parse_condition_type(std::string_view name);

/// condition_type -> instruction templates, each holding one "{z}" placeholder.
class TemplateTable {
 public:
  static TemplateTable defaults();
  static TemplateTable from_json(const nlohmann::json& j);
  static TemplateTable load(const std::filesystem::path& path);

  bool contains(ConditionType type) const { return table_.contains(type); }
  /// Throws ValueError naming the known types when `type` has no entry.
  const std::vector<std::string>& templates(ConditionType type) const;
  std::string render(ConditionType type, std::string_view z, std::size_t index = 0) const;
  nlohmann::json to_json() const;

 private:
  std::map<ConditionType, std::vector<std::string>> table_;
};

struct ConditionEncoding {
  std::string text;
  std::vector<int> token_ids;
  Matrix embeddings;  // tokens x D
};

struct EncodeOptions {
  bool raw = false;  // embed z without a template ("w/o p" ablation)
  std::size_t template_index = 0;
};

/// Renders the condition prompt (or raw z) as used by both the hypernetwork and the base context.
std::string render_condition(std::string_view z, ConditionType type, const TemplateTable& templates,
                             const EncodeOptions& options = {});

ConditionEncoding encode_condition(std::string_view z, ConditionType type,
                                   const TemplateTable& templates, const Matrix& base_embedding,
                                   const EncodeOptions& options = {});

struct HypernetParams {
  Tensor w_q;              // D x R
  Tensor w_k;              // D x R
  Tensor w_v;              // D x R
  Tensor layer_embedding;  // L x R
  Tensor w_out;            // R x C, bias-free
  bool use_layer_embedding = true;

  /// q/k/v and the layer table ~ N(0, 0.02); Wout = 0 so beta starts at exactly 0.
  static HypernetParams init(const ModelConfig& config, std::mt19937_64& rng);

  Index reduced() const { return w_q.cols(); }
  Index layers() const { return layer_embedding.rows(); }
  Index intermediate() const { return w_out.cols(); }

  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  /// Tensors that make up theta (the layer table is excluded when disabled).
  std::vector<Tensor*> trainables();
  std::int64_t trainable_count() const;
};

/// (3D + L + C) * R, with L dropped when the layer embedding is disabled.
std::int64_t param_count(const ModelConfig& config);

/// Hypernetwork tensors bound into a graph.
struct HypernetVars {
  Var w_q, w_k, w_v, layer_embedding, w_out;
  bool use_layer_embedding = true;
};

HypernetVars bind_hypernet(Graph& g, HypernetParams& params, bool trainable);

/// 1 x C raw beta for one sequence. `layer_latent` holds the prefix rows of the
/// tensor entering the layer's FFN; `layer_index` is 1-based.
Var generate_beta(const HypernetVars& h, Var condition_embeddings, Var layer_latent, int layer_index);

BetaVector generate_beta(const ConditionEncoding& condition, const Matrix& layer_latent,
                         int layer_index, const HypernetParams& params);

}  // namespace megan
