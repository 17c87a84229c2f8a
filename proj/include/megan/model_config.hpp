#pragma once

#include <cstdint>
#include <optional>

#include "json.hpp"

namespace megan {

/// Architecture hyperparameters of the base transformer and its hypernetwork,
/// plus the ablation switches.
struct ModelConfig {
  int layers = 4;
  int hidden = 64;         // D
  int intermediate = 256;  // C
  int reduced = 16;        // R
  int heads = 4;
  int vocab = 260;
  int max_context = 256;

  bool disable_prompt_template = false;
  bool disable_layer_embedding = false;
  std::optional<double> reg_weight_override;

  /// Throws ValueError on C <= D, D % heads != 0, max_context < 2 or nonpositive sizes.
  void validate() const;

  /// True when both configs describe the same architecture (ablation flags ignored).
  bool same_architecture(const ModelConfig& other) const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

}  // namespace megan
