#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "megan/data.hpp"
#include "megan/hypernet.hpp"
#include "megan/model.hpp"

namespace megan {

struct Scores {
  double rouge_l = 0;
  double bleu2 = 0;
  double dist2 = 0;
  double accuracy = 0;
  double exact_match = 0;  // case-sensitive, untrimmed
  std::size_t n_samples = 0;

  nlohmann::json to_json() const;
};

struct EvalReport {
  Scores aggregate;
  std::map<std::string, Scores> per_condition;  // keyed by z
  std::vector<std::string> predictions;

  nlohmann::json to_json() const;
};

Scores score(std::span<const std::string> predictions, std::span<const std::string> references);

/// Greedy decoding of every sample behind its rendered condition prompt. With
/// `hyper` null the prompt is still in context but beta stays 0, which is the
/// frozen base's conditioned behaviour.
EvalReport evaluate(const BaseWeights& base, const HypernetParams* hyper, const ModelConfig& config,
                    const TemplateTable& templates, std::span<const ConditionSample> samples,
                    int max_new = 32);

/// JSON schema that every report written by `evaluate` satisfies.
nlohmann::json eval_report_schema();

/// Checks `report` against `eval_report_schema()`; returns the violations found.
std::vector<std::string> validate_report(const nlohmann::json& report);

}  // namespace megan
