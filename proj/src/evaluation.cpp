#include "megan/evaluation.hpp"

#include "megan/metrics.hpp"

namespace megan {

nlohmann::json Scores::to_json() const {
  return {{"rouge_l", rouge_l}, {"bleu2", bleu2},     {"dist2", dist2},
          {"accuracy", accuracy}, {"exact_match", exact_match}, {"n_samples", n_samples}};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [z, s] : per_condition) per[z] = s.to_json();
  return {{"aggregate", aggregate.to_json()}, {"per_condition", per}};
}

Scores score(std::span<const std::string> predictions, std::span<const std::string> references) {
  Scores s;
  s.n_samples = predictions.size();
  s.accuracy = metrics::accuracy(predictions, references);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    s.rouge_l += metrics::rouge_l(predictions[i], references[i]);
    s.bleu2 += metrics::bleu2(predictions[i], references[i]);
    exact += predictions[i] == references[i] ? 1 : 0;
  }
  const double n = double(predictions.size());
  s.rouge_l /= n;
  s.bleu2 /= n;
  s.exact_match = double(exact) / n;
  s.dist2 = metrics::dist_n(predictions, 2);
  return s;
}

EvalReport evaluate(const BaseWeights& base, const HypernetParams* hyper, const ModelConfig& config,
                    const TemplateTable& templates, std::span<const ConditionSample> samples,
                    int max_new) {
  if (samples.empty()) throw ValueError("evaluate: no samples");
  EncodeOptions opts;
  opts.raw = config.disable_prompt_template;
  EvalReport report;
  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> groups;
  std::vector<std::string> refs;
  for (const ConditionSample& s : samples) {
    const ConditionEncoding cond =
        encode_condition(s.z, s.condition_type, templates, base.token_embedding.matrix(), opts);
    const std::vector<int> prompt = prompt_tokens(cond.text, s.x);
    const int room = std::min<int>(max_new, config.max_context - int(prompt.size()));
    std::vector<int> out;
    try {
      out = generate(prompt, hyper ? &cond : nullptr, base, hyper, config, Sampling{}, room);
    } catch (const ContextOverflowError& e) {
      out = e.partial;
    }
    std::string text = detokenize(out);
    groups[s.z].first.push_back(text);
    groups[s.z].second.push_back(s.y);
    refs.push_back(s.y);
    report.predictions.push_back(std::move(text));
  }
  report.aggregate = score(report.predictions, refs);
  for (const auto& [z, g] : groups) report.per_condition[z] = score(g.first, g.second);
  return report;
}

nlohmann::json eval_report_schema() {
  const nlohmann::json unit{{"type", "number"}, {"minimum", 0}, {"maximum", 1}};
  const nlohmann::json scores{
      {"type", "object"},
      {"required", {"rouge_l", "bleu2", "dist2", "accuracy", "exact_match", "n_samples"}},
      {"properties",
       {{"rouge_l", unit},
        {"bleu2", unit},
        {"dist2", unit},
        {"accuracy", unit},
        {"exact_match", unit},
        {"n_samples", {{"type", "integer"}, {"minimum", 1}}}}}};
  return {{"$schema", "https://json-schema.org/draft/2020-12/schema"},
          {"title", "megan evaluation report"},
          {"type", "object"},
          {"required", {"aggregate", "per_condition"}},
          {"properties",
           {{"aggregate", scores}, {"per_condition", {{"type", "object"}, {"additionalProperties", scores}}}}}};
}

namespace {

void check_scores(const nlohmann::json& j, const nlohmann::json& schema, const std::string& where,
                  std::vector<std::string>& errors) {
  if (!j.is_object()) {
    errors.push_back(where + ": expected an object");
    return;
  }
  for (const auto& key : schema["required"]) {
    const std::string k = key.get<std::string>();
    if (!j.contains(k)) {
      errors.push_back(where + ": missing " + k);
      continue;
    }
    const auto& rule = schema["properties"][k];
    const auto& v = j[k];
    if (rule["type"] == "integer") {
      if (!v.is_number_integer() || v.get<long long>() < rule["minimum"].get<long long>())
        errors.push_back(where + "." + k + ": expected a positive integer");
    } else if (!v.is_number() || v.get<double>() < 0.0 || v.get<double>() > 1.0) {
      errors.push_back(where + "." + k + ": expected a number in [0, 1]");
    }
  }
}

}  // namespace

std::vector<std::string> validate_report(const nlohmann::json& report) {
  const nlohmann::json schema = eval_report_schema();
  const nlohmann::json& scores = schema["properties"]["aggregate"];
  std::vector<std::string> errors;
  if (!report.is_object()) return {"report: expected an object"};
  if (!report.contains("aggregate")) errors.push_back("report: missing aggregate");
  else check_scores(report["aggregate"], scores, "aggregate", errors);
  if (!report.contains("per_condition") || !report["per_condition"].is_object()) {
    errors.push_back("report: missing per_condition object");
  } else {
    for (const auto& [z, s] : report["per_condition"].items()) check_scores(s, scores, "per_condition." + z, errors);
  }
  return errors;
}

}  // namespace megan
