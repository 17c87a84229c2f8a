#include "megan/model.hpp"

#include <cmath>

#include "megan/hash.hpp"
#include "megan/tokenizer.hpp"

namespace megan {

namespace {

Tensor normal_tensor(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return Tensor(std::move(m));
}

Tensor ones_row(Index cols) { return Tensor(Matrix::Ones(1, cols)); }

}  // namespace

BaseWeights BaseWeights::init(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  const Index d = config.hidden, c = config.intermediate, v = config.vocab;
  // Unit-variance embeddings and fan-in scaled projections. With small uniform
  // scales (0.02) the attention logits start near zero and the copy circuits the
  // synthetic suite needs took many thousands of steps to form.
  const double in_d = 1.0 / std::sqrt(double(d)), in_c = 1.0 / std::sqrt(double(c));
  BaseWeights w;
  w.token_embedding = normal_tensor(v, d, 1.0, rng);
  w.position_embedding = normal_tensor(config.max_context, d, 1.0, rng);
  for (int l = 0; l < config.layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = ones_row(d);
    lw.w_q = normal_tensor(d, d, in_d, rng);
    lw.w_k = normal_tensor(d, d, in_d, rng);
    lw.w_v = normal_tensor(d, d, in_d, rng);
    lw.w_o = normal_tensor(d, d, in_d, rng);
    lw.ffn_norm = ones_row(d);
    lw.w_gate = normal_tensor(d, c, in_d, rng);
    lw.w_up = normal_tensor(d, c, in_d, rng);
    lw.w_down = normal_tensor(c, d, in_c, rng);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = ones_row(d);
  w.output = normal_tensor(d, v, in_d, rng);
  return w;
}

std::vector<std::pair<std::string, Tensor*>> BaseWeights::named() {
  std::vector<std::pair<std::string, Tensor*>> out{{"base.token_embedding", &token_embedding},
                                                   {"base.position_embedding", &position_embedding}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "base.layer" + std::to_string(l) + ".";
    LayerWeights& lw = layers[l];
    out.insert(out.end(), {{p + "attn_norm", &lw.attn_norm},
                           {p + "w_q", &lw.w_q},
                           {p + "w_k", &lw.w_k},
                           {p + "w_v", &lw.w_v},
                           {p + "w_o", &lw.w_o},
                           {p + "ffn_norm", &lw.ffn_norm},
                           {p + "w_gate", &lw.w_gate},
                           {p + "w_up", &lw.w_up},
                           {p + "w_down", &lw.w_down}});
  }
  out.emplace_back("base.final_norm", &final_norm);
  out.emplace_back("base.output", &output);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> BaseWeights::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<BaseWeights*>(this)->named()) out.emplace_back(name, t);
  return out;
}

void BaseWeights::set_trainable(bool on) {
  for (auto& [_, t] : named()) t->set_requires_grad(on);
}

std::string BaseWeights::sha256() const {
  Sha256 h;
  for (const auto& [name, t] : named()) {
    h.update({reinterpret_cast<const unsigned char*>(name.data()), name.size()});
    const auto data = t->data();
    h.update({reinterpret_cast<const unsigned char*>(data.data()), data.size_bytes()});
  }
  return to_hex(h.finish());
}

ModelVars bind_model(Graph& g, BaseWeights& base, bool train_base, HypernetParams* hyper,
                     bool train_hyper) {
  auto bind = [&](Tensor& t) {
    return train_base && t.requires_grad() ? g.parameter(t) : g.constant(t.matrix());
  };
  ModelVars m;
  m.token_embedding = bind(base.token_embedding);
  m.position_embedding = bind(base.position_embedding);
  for (LayerWeights& lw : base.layers) {
    m.layers.push_back({bind(lw.attn_norm), bind(lw.w_q), bind(lw.w_k), bind(lw.w_v), bind(lw.w_o),
                        bind(lw.ffn_norm), bind(lw.w_gate), bind(lw.w_up), bind(lw.w_down)});
  }
  m.final_norm = bind(base.final_norm);
  m.output = bind(base.output);
  if (hyper) m.hyper = bind_hypernet(g, *hyper, train_hyper);
  return m;
}

GraphForward forward_graph(Graph& g, const ModelVars& vars, std::span<const SequenceInput> batch,
                           const ModelConfig& config, std::span<const Matrix> fixed_betas) {
  if (batch.empty()) throw ValueError("forward: empty batch");
  const Index c = config.intermediate;
  const bool use_fixed = !fixed_betas.empty();
  if (use_fixed && fixed_betas.size() != vars.layers.size())
    throw ShapeError("forward: expected " + std::to_string(vars.layers.size()) +
                     " fixed beta matrices, got " + std::to_string(fixed_betas.size()));

  GraphForward out;
  std::vector<int> tokens, positions, row_segment;
  bool any_condition = false;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const SequenceInput& seq = batch[s];
    const auto n = Index(seq.tokens.size());
    if (n == 0) throw ValueError("forward: empty sequence");
    if (n > config.max_context)
      throw ValueError("forward: sequence length " + std::to_string(n) + " exceeds max_context " +
                       std::to_string(config.max_context));
    if (seq.condition) {
      if (!vars.hyper) throw ValueError("forward: condition given without hypernetwork parameters");
      if (seq.prefix_len == 0 || Index(seq.prefix_len) > n)
        throw ValueError("forward: prefix length " + std::to_string(seq.prefix_len) +
                         " outside [1, " + std::to_string(n) + "]");
      if (seq.condition->embeddings.rows() == 0) throw ValueError("forward: empty condition encoding");
      any_condition = true;
    }
    out.segments.push_back({Index(tokens.size()), n});
    for (Index t = 0; t < n; ++t) {
      tokens.push_back(seq.tokens[std::size_t(t)]);
      positions.push_back(int(t));
      row_segment.push_back(int(s));
    }
  }
  if (use_fixed)
    for (const Matrix& b : fixed_betas)
      if (b.rows() != Index(batch.size()) || b.cols() != c)
        throw ShapeError("forward: fixed beta " + shape_string(b.rows(), b.cols()) + " vs expected " +
                         shape_string(Index(batch.size()), c));

  const Index rows = Index(tokens.size());
  Var x = add(gather_rows(vars.token_embedding, tokens), gather_rows(vars.position_embedding, positions));
  std::vector<Var> cond_embeddings(batch.size());
  if (any_condition && !use_fixed)
    for (std::size_t s = 0; s < batch.size(); ++s)
      if (batch[s].condition) cond_embeddings[s] = g.constant(batch[s].condition->embeddings);

  for (std::size_t l = 0; l < vars.layers.size(); ++l) {
    const LayerVars& lv = vars.layers[l];
    Var h = rms_norm(x, lv.attn_norm);
    Var attn = causal_self_attention(matmul(h, lv.w_q), matmul(h, lv.w_k), matmul(h, lv.w_v),
                                     out.segments, config.heads);
    x = add(x, matmul(attn, lv.w_o));
    Var latent = rms_norm(x, lv.ffn_norm);

    Var betas;
    if (use_fixed) {
      betas = g.constant(fixed_betas[l]);
    } else if (any_condition) {
      std::vector<Var> per_seq;
      for (std::size_t s = 0; s < batch.size(); ++s) {
        if (!batch[s].condition) {
          per_seq.push_back(g.constant(Matrix::Zero(1, c)));
          continue;
        }
        Var prefix = slice_rows(latent, out.segments[s].offset, Index(batch[s].prefix_len));
        per_seq.push_back(generate_beta(*vars.hyper, cond_embeddings[s], prefix, int(l) + 1));
      }
      betas = concat_rows(per_seq);
    } else {
      betas = g.constant(Matrix::Zero(Index(batch.size()), c));
    }
    out.betas.push_back(betas);

    Var slopes = (use_fixed || any_condition) ? add_scalar(gather_rows(betas, row_segment), 1.0)
                                              : g.constant(Matrix::Ones(rows, c));
    x = add(x, beta_swiglu(latent, slopes, lv.w_gate, lv.w_up, lv.w_down));
  }
  out.logits = matmul(rms_norm(x, vars.final_norm), vars.output);
  return out;
}

ForwardOutput forward(std::span<const int> tokens, const ConditionEncoding* condition,
                      const BaseWeights& base, const HypernetParams* hyper,
                      const ModelConfig& config, std::optional<std::size_t> prefix_len) {
  if (condition && !hyper) throw ValueError("forward: condition given without hypernetwork parameters");
  Graph g;
  ModelVars vars = bind_model(g, const_cast<BaseWeights&>(base), false,
                              const_cast<HypernetParams*>(hyper), false);
  SequenceInput seq{std::vector<int>(tokens.begin(), tokens.end()), prefix_len.value_or(tokens.size()),
                    condition};
  GraphForward f = forward_graph(g, vars, std::span<const SequenceInput>(&seq, 1), config);
  ForwardOutput out;
  out.logits = f.logits.value();
  out.betas.resize(config.layers, config.intermediate);
  for (int l = 0; l < config.layers; ++l) out.betas.row(l) = f.betas[std::size_t(l)].value().row(0);
  return out;
}

std::vector<int> generate(std::span<const int> prompt_tokens, const ConditionEncoding* condition,
                          const BaseWeights& base, const HypernetParams* hyper,
                          const ModelConfig& config, const Sampling& sampling, int max_new) {
  if (max_new < 0) throw ValueError("generate: max_new must be nonnegative");
  if (prompt_tokens.empty()) throw ValueError("generate: empty prompt");
  if (Index(prompt_tokens.size()) > config.max_context)
    throw ValueError("generate: prompt length " + std::to_string(prompt_tokens.size()) +
                     " exceeds max_context " + std::to_string(config.max_context));
  std::vector<int> produced;
  if (max_new == 0) return produced;
  if (!sampling.greedy && !(sampling.temperature > 0))
    throw ValueError("generate: temperature must be positive");

  Graph g;
  ModelVars vars = bind_model(g, const_cast<BaseWeights&>(base), false,
                              const_cast<HypernetParams*>(hyper), false);
  if (condition && !hyper) throw ValueError("generate: condition given without hypernetwork parameters");

  std::vector<int> context(prompt_tokens.begin(), prompt_tokens.end());
  SequenceInput seq{context, context.size(), condition};
  GraphForward prefill = forward_graph(g, vars, std::span<const SequenceInput>(&seq, 1), config);
  std::vector<Matrix> betas;
  for (Var b : prefill.betas) betas.push_back(b.value());
  RowVector last = prefill.logits.value().bottomRows(1);

  std::mt19937_64 rng(sampling.seed);
  for (int step = 0; step < max_new; ++step) {
    int next = 0;
    if (sampling.greedy) {
      last.maxCoeff(&next);  // first maximal index wins ties
    } else {
      const RowVector z = (last.array() - last.maxCoeff()) / sampling.temperature;
      const RowVector p = z.array().exp();
      std::discrete_distribution<int> dist(p.data(), p.data() + p.size());
      next = dist(rng);
    }
    if (next == kEos) break;
    produced.push_back(next);
    if (step + 1 == max_new) break;
    context.push_back(next);
    if (Index(context.size()) > config.max_context)
      throw ContextOverflowError("generate: context of " + std::to_string(config.max_context) +
                                     " tokens exhausted after " + std::to_string(produced.size()) +
                                     " new tokens",
                                 produced);
    Graph step_graph;
    ModelVars step_vars = bind_model(step_graph, const_cast<BaseWeights&>(base), false,
                                     const_cast<HypernetParams*>(hyper), false);
    SequenceInput s{context, context.size(), nullptr};
    GraphForward f = forward_graph(step_graph, step_vars, std::span<const SequenceInput>(&s, 1),
                                   config, betas);
    last = f.logits.value().bottomRows(1);
  }
  return produced;
}

}  // namespace megan
