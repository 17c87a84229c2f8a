#include "megan/model_config.hpp"

#include "megan/error.hpp"

namespace megan {

void ModelConfig::validate() const {
  if (layers < 1 || hidden < 1 || intermediate < 1 || reduced < 1 || heads < 1 || vocab < 1)
    throw ValueError("model config: all sizes must be positive");
  if (intermediate <= hidden)
    throw ValueError("model config: intermediate size C=" + std::to_string(intermediate) +
                     " must exceed hidden size D=" + std::to_string(hidden));
  if (hidden % heads != 0)
    throw ValueError("model config: hidden size " + std::to_string(hidden) +
                     " not divisible by heads " + std::to_string(heads));
  if (max_context < 2) throw ValueError("model config: max_context must be at least 2");
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return layers == o.layers && hidden == o.hidden && intermediate == o.intermediate &&
         reduced == o.reduced && heads == o.heads && vocab == o.vocab && max_context == o.max_context;
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j{{"layers", layers},
                   {"hidden", hidden},
                   {"intermediate", intermediate},
                   {"reduced", reduced},
                   {"heads", heads},
                   {"vocab", vocab},
                   {"max_context", max_context},
                   {"disable_prompt_template", disable_prompt_template},
                   {"disable_layer_embedding", disable_layer_embedding}};
  j["reg_weight_override"] = reg_weight_override ? nlohmann::json(*reg_weight_override) : nlohmann::json();
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.intermediate = j.at("intermediate").get<int>();
    c.reduced = j.at("reduced").get<int>();
    c.heads = j.at("heads").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.max_context = j.at("max_context").get<int>();
    c.disable_prompt_template = j.value("disable_prompt_template", false);
    c.disable_layer_embedding = j.value("disable_layer_embedding", false);
    if (j.contains("reg_weight_override") && !j["reg_weight_override"].is_null())
      c.reg_weight_override = j["reg_weight_override"].get<double>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

}  // namespace megan
