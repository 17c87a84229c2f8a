#include "megan/hypernet.hpp"

#include <array>
#include <cmath>
#include <fstream>

#include "megan/tokenizer.hpp"

namespace megan {

namespace {

constexpr std::array<std::pair<ConditionType, std::string_view>, 7> kTypeNames{{
    {ConditionType::task, "task"},
    {ConditionType::domain, "domain"},
    {ConditionType::persona, "persona"},
    {ConditionType::style, "style"},
    {ConditionType::sentiment, "sentiment"},
    {ConditionType::emotion, "emotion"},
    {ConditionType::synthetic, "synthetic"},
}};

constexpr std::string_view kPlaceholder = "{z}";

Matrix normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

std::string_view to_string(ConditionType type) {
  for (const auto& [t, name] : kTypeNames)
    if (t == type) return name;
  return "unknown";
}

ConditionType parse_condition_type(std::string_view name) {
  for (const auto& [t, n] : kTypeNames)
    if (n == name) return t;
  std::string known;
  for (const auto& [t, n] : kTypeNames) known += (known.empty() ? "" : ", ") + std::string(n);
  throw ValueError("unknown condition_type '" + std::string(name) + "' (known: " + known + ")");
}

TemplateTable TemplateTable::defaults() {
  TemplateTable t;
  t.table_[ConditionType::task] = {"Please complete the task of {z}.", "Task: {z}"};
  t.table_[ConditionType::domain] = {
      "Please provide the summarization on the domain of {z}.",
      "Conduct the summarization based on its specific domains.\ndomain: {z}"};
  t.table_[ConditionType::persona] = {
      "Please provide the response with the knowledge of {z}.",
      "Provide the appropriate response based on the user profiles.\nprofiles: {z}"};
  t.table_[ConditionType::style] = {"Please provide the response with the style of {z}.",
                                    "Please answer the question with the style of {z}.",
                                    "Reply with style: {z}"};
  t.table_[ConditionType::sentiment] = {"Please provide the response with the sentiment of {z}.",
                                        "Please answer the question with the sentiment of {z}.",
                                        "Reply with sentiment: {z}"};
  t.table_[ConditionType::emotion] = {"Please provide the response with the emotion of {z}."};
  t.table_[ConditionType::synthetic] = {"Task: {z}."};
  return t;
}

TemplateTable TemplateTable::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValueError("template table: expected a JSON object");
  TemplateTable t;
  for (const auto& [key, value] : j.items()) {
    const ConditionType type = parse_condition_type(key);
    std::vector<std::string> list;
    if (value.is_string())
      list.push_back(value.get<std::string>());
    else if (value.is_array())
      for (const auto& s : value) list.push_back(s.get<std::string>());
    else
      throw ValueError("template table: entry '" + key + "' must be a string or list of strings");
    if (list.empty()) throw ValueError("template table: entry '" + key + "' has no templates");
    for (const auto& s : list) {
      const auto first = s.find(kPlaceholder);
      if (first == std::string::npos || s.find(kPlaceholder, first + 1) != std::string::npos)
        throw ValueError("template table: '" + s + "' must contain exactly one {z}");
    }
    t.table_[type] = std::move(list);
  }
  return t;
}

TemplateTable TemplateTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open template file " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("template file " + path.string() + ": " + e.what());
  }
}

const std::vector<std::string>& TemplateTable::templates(ConditionType type) const {
  auto it = table_.find(type);
  if (it == table_.end()) {
    std::string known;
    for (const auto& [t, _] : table_) known += (known.empty() ? "" : ", ") + std::string(to_string(t));
    throw ValueError("no template for condition_type '" + std::string(to_string(type)) +
                     "' (known: " + known + ")");
  }
  return it->second;
}

std::string TemplateTable::render(ConditionType type, std::string_view z, std::size_t index) const {
  const auto& list = templates(type);
  std::string s = list[index % list.size()];
  s.replace(s.find(kPlaceholder), kPlaceholder.size(), z);
  return s;
}

nlohmann::json TemplateTable::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [t, list] : table_) j[std::string(to_string(t))] = list;
  return j;
}

std::string render_condition(std::string_view z, ConditionType type, const TemplateTable& templates,
                             const EncodeOptions& options) {
  if (z.empty()) throw ValueError("condition text is empty");
  if (options.raw) {
    templates.templates(type);  // still reject unknown types
    return std::string(z);
  }
  return templates.render(type, z, options.template_index);
}

ConditionEncoding encode_condition(std::string_view z, ConditionType type,
                                   const TemplateTable& templates, const Matrix& base_embedding,
                                   const EncodeOptions& options) {
  ConditionEncoding enc;
  enc.text = render_condition(z, type, templates, options);
  enc.token_ids = tokenize(enc.text);
  enc.embeddings.resize(Index(enc.token_ids.size()), base_embedding.cols());
  for (std::size_t i = 0; i < enc.token_ids.size(); ++i) {
    const int id = enc.token_ids[i];
    if (id >= base_embedding.rows())
      throw ShapeError("encode_condition: token " + std::to_string(id) + " outside embedding table " +
                       shape_string(base_embedding.rows(), base_embedding.cols()));
    enc.embeddings.row(Index(i)) = base_embedding.row(id);
  }
  return enc;
}

HypernetParams HypernetParams::init(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  const Index d = config.hidden, r = config.reduced, c = config.intermediate, l = config.layers;
  HypernetParams p;
  p.w_q = Tensor(normal_matrix(d, r, 0.02, rng), true);
  p.w_k = Tensor(normal_matrix(d, r, 0.02, rng), true);
  p.w_v = Tensor(normal_matrix(d, r, 0.02, rng), true);
  p.layer_embedding = Tensor(normal_matrix(l, r, 0.02, rng), !config.disable_layer_embedding);
  p.w_out = Tensor(Matrix::Zero(r, c), true);
  p.use_layer_embedding = !config.disable_layer_embedding;
  return p;
}

std::vector<std::pair<std::string, Tensor*>> HypernetParams::named() {
  return {{"hyper.w_q", &w_q},
          {"hyper.w_k", &w_k},
          {"hyper.w_v", &w_v},
          {"hyper.layer_embedding", &layer_embedding},
          {"hyper.w_out", &w_out}};
}

std::vector<std::pair<std::string, const Tensor*>> HypernetParams::named() const {
  return {{"hyper.w_q", &w_q},
          {"hyper.w_k", &w_k},
          {"hyper.w_v", &w_v},
          {"hyper.layer_embedding", &layer_embedding},
          {"hyper.w_out", &w_out}};
}

std::vector<Tensor*> HypernetParams::trainables() {
  std::vector<Tensor*> out{&w_q, &w_k, &w_v};
  if (use_layer_embedding) out.push_back(&layer_embedding);
  out.push_back(&w_out);
  return out;
}

std::int64_t HypernetParams::trainable_count() const {
  std::int64_t n = w_q.size() + w_k.size() + w_v.size() + w_out.size();
  if (use_layer_embedding) n += layer_embedding.size();
  return n;
}

std::int64_t param_count(const ModelConfig& config) {
  if (config.layers < 1 || config.hidden < 1 || config.intermediate < 1 || config.reduced < 1)
    throw ValueError("param_count: dimensions must be positive");
  const std::int64_t l = config.disable_layer_embedding ? 0 : config.layers;
  return (3 * std::int64_t(config.hidden) + l + config.intermediate) * config.reduced;
}

HypernetVars bind_hypernet(Graph& g, HypernetParams& params, bool trainable) {
  auto bind = [&](Tensor& t) { return trainable && t.requires_grad() ? g.parameter(t) : g.constant(t.matrix()); };
  HypernetVars h;
  h.w_q = bind(params.w_q);
  h.w_k = bind(params.w_k);
  h.w_v = bind(params.w_v);
  h.layer_embedding = bind(params.layer_embedding);
  h.w_out = bind(params.w_out);
  h.use_layer_embedding = params.use_layer_embedding;
  return h;
}

Var generate_beta(const HypernetVars& h, Var condition_embeddings, Var layer_latent, int layer_index) {
  const Index layers = h.layer_embedding.rows();
  if (layer_index < 1 || layer_index > layers)
    throw ValueError("generate_beta: layer index " + std::to_string(layer_index) + " outside [1, " +
                     std::to_string(layers) + "]");
  if (condition_embeddings.cols() != h.w_q.rows() || layer_latent.cols() != h.w_k.rows())
    throw ShapeError("generate_beta: condition " +
                     shape_string(condition_embeddings.rows(), condition_embeddings.cols()) +
                     " and latent " + shape_string(layer_latent.rows(), layer_latent.cols()) +
                     " vs hidden size " + std::to_string(h.w_q.rows()));
  const double inv_sqrt_r = 1.0 / std::sqrt(double(h.w_q.cols()));
  Var q = matmul(condition_embeddings, h.w_q);
  Var k = matmul(layer_latent, h.w_k);
  Var v = matmul(layer_latent, h.w_v);
  Var attn = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_r));
  Var pooled = mean_rows(matmul(attn, v));
  if (h.use_layer_embedding) pooled = add(pooled, slice_rows(h.layer_embedding, layer_index - 1, 1));
  return clamp(tanh(matmul(pooled, h.w_out)), -1.0 + kBetaClamp, 1.0 - kBetaClamp);
}

BetaVector generate_beta(const ConditionEncoding& condition, const Matrix& layer_latent,
                         int layer_index, const HypernetParams& params) {
  Graph g;
  HypernetVars h;
  h.w_q = g.constant(params.w_q.matrix());
  h.w_k = g.constant(params.w_k.matrix());
  h.w_v = g.constant(params.w_v.matrix());
  h.layer_embedding = g.constant(params.layer_embedding.matrix());
  h.w_out = g.constant(params.w_out.matrix());
  h.use_layer_embedding = params.use_layer_embedding;
  Var beta = generate_beta(h, g.constant(condition.embeddings), g.constant(layer_latent), layer_index);
  return BetaVector(beta.value().row(0));
}

}  // namespace megan
