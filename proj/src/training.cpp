#include "megan/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "megan/checkpoint.hpp"
#include "megan/log.hpp"

namespace megan {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ValueError("train config: learning_rate must be positive");
  if (batch_size < 1) throw ValueError("train config: batch_size must be at least 1");
  if (epochs < 0) throw ValueError("train config: epochs must be nonnegative");
  if (!(reg_weight >= 0)) throw ValueError("train config: reg_weight must be nonnegative");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1))
    throw ValueError("train config: warmup_fraction must lie in [0, 1)");
  if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1))
    throw ValueError("train config: min_lr_ratio must lie in [0, 1]");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"epochs", epochs},
          {"batch_size", batch_size},       {"reg_weight", reg_weight},
          {"weight_decay", weight_decay},   {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},       {"adam_eps", adam_eps},
          {"warmup_fraction", warmup_fraction}, {"min_lr_ratio", min_lr_ratio},
          {"grad_clip", grad_clip},         {"seed", seed}};
}

double ce_loss(const Matrix& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  Graph g;
  return masked_cross_entropy(g.constant(logits), targets, mask).item();
}

double reg_loss(std::span<const Matrix> profiles) {
  double sq = 0.0;
  Index n = 0;
  for (const Matrix& p : profiles) {
    sq += p.squaredNorm();
    n += p.size();
  }
  return n == 0 ? 0.0 : std::sqrt(sq / double(n));
}

Var reg_loss(std::span<const Var> betas) {
  if (betas.empty()) throw ValueError("reg_loss: no beta matrices");
  if (betas.size() == 1) return rms(betas.front());
  return rms(concat_rows(betas));
}

Var total_loss(Var ce, Var reg, double f) { return add(ce, scale(reg, f)); }

double scheduled_lr(const TrainConfig& c, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return c.learning_rate;
  const auto warmup = std::int64_t(std::ceil(c.warmup_fraction * double(total_steps)));
  if (step < warmup) return c.learning_rate * double(step + 1) / double(warmup);
  const double span = double(std::max<std::int64_t>(1, total_steps - warmup));
  const double progress = std::min(1.0, double(step - warmup) / span);
  const double floor = c.min_lr_ratio * c.learning_rate;
  return floor + 0.5 * (c.learning_rate - floor) * (1.0 + std::cos(M_PI * progress));
}

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor* t : params) sq += t->grad().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (Tensor* t : params) t->grad() *= s;
  }
  return norm;
}

AdamW::AdamW(std::vector<Tensor*> params, const TrainConfig& config)
    : params_(std::move(params)),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      eps_(config.adam_eps),
      weight_decay_(config.weight_decay) {
  for (Tensor* p : params_) {
    if (!p->requires_grad()) throw ValueError("AdamW: parameter without gradient buffer");
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Matrix& w = params_[i]->matrix();
    const Matrix& g = params_[i]->grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    w *= 1.0 - lr * weight_decay_;
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

void AdamW::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

PackedTargets pack_targets(std::span<const std::vector<int>> rows,
                           std::span<const std::vector<std::uint8_t>> target_masks,
                           std::span<const std::size_t> lengths) {
  PackedTargets p;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t n = lengths[r];
    for (std::size_t t = 0; t < n; ++t) {
      const bool has_next = t + 1 < n;
      p.targets.push_back(has_next ? rows[r][t + 1] : 0);
      p.mask.push_back(has_next && target_masks[r][t + 1] ? 1 : 0);
    }
  }
  return p;
}

nlohmann::json StepLog::to_json() const {
  return {{"step", step}, {"ce", ce}, {"reg", reg}, {"total", total}, {"lr", lr}, {"beta_rms", beta_rms}};
}

namespace {

std::vector<SequenceInput> to_inputs(const TokenBatch& batch, std::span<const ConditionEncoding> conditions) {
  std::vector<SequenceInput> inputs;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    SequenceInput s;
    s.tokens.assign(batch.token_ids[r].begin(), batch.token_ids[r].begin() + std::ptrdiff_t(batch.lengths[r]));
    s.prefix_len = batch.prefix_lengths[r];
    s.condition = conditions.empty() ? nullptr : &conditions[r];
    inputs.push_back(std::move(s));
  }
  return inputs;
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw DivergenceError(std::string(what) + " became non-finite");
}

}  // namespace

std::vector<ConditionEncoding> encode_batch_conditions(const TokenBatch& batch, const BaseWeights& base) {
  std::vector<ConditionEncoding> out;
  const Matrix& table = base.token_embedding.matrix();
  for (const std::string& text : batch.condition_texts) {
    ConditionEncoding enc;
    enc.text = text;
    enc.token_ids = tokenize(text);
    enc.embeddings.resize(Index(enc.token_ids.size()), table.cols());
    for (std::size_t i = 0; i < enc.token_ids.size(); ++i) enc.embeddings.row(Index(i)) = table.row(enc.token_ids[i]);
    out.push_back(std::move(enc));
  }
  return out;
}

BatchLoss batch_loss(Graph& g, const ModelVars& vars, const TokenBatch& batch,
                     std::span<const ConditionEncoding> conditions, const ModelConfig& mcfg,
                     double reg_weight) {
  const std::vector<SequenceInput> inputs = to_inputs(batch, conditions);
  GraphForward f = forward_graph(g, vars, inputs, mcfg);
  const PackedTargets t = pack_targets(batch.token_ids, batch.loss_mask, batch.lengths);
  BatchLoss out;
  out.ce = masked_cross_entropy(f.logits, t.targets, t.mask);
  out.reg = reg_loss(f.betas);
  out.total = total_loss(out.ce, out.reg, reg_weight);
  return out;
}

PretrainResult pretrain_base(std::span<const std::vector<int>> corpus, const ModelConfig& mcfg,
                             const TrainConfig& tcfg, const StepCallback& on_step,
                             std::span<const std::vector<std::uint8_t>> loss_masks) {
  mcfg.validate();
  tcfg.validate();
  if (corpus.empty()) throw ValueError("pretrain: corpus is empty");
  if (!loss_masks.empty() && loss_masks.size() != corpus.size())
    throw ValueError("pretrain: " + std::to_string(loss_masks.size()) + " loss masks for " +
                     std::to_string(corpus.size()) + " sequences");
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw ValueError("pretrain: every corpus sequence needs at least 2 tokens");
    if (seq.size() > std::size_t(mcfg.max_context))
      throw ValueError("pretrain: sequence of " + std::to_string(seq.size()) + " tokens exceeds context");
  }

  std::mt19937_64 rng(tcfg.seed);
  PretrainResult result{BaseWeights::init(mcfg, rng), {}};
  BaseWeights& base = result.base;
  base.set_trainable(true);
  std::vector<Tensor*> params;
  for (auto& [_, t] : base.named()) params.push_back(t);
  AdamW opt(params, tcfg);

  const std::size_t b = std::size_t(tcfg.batch_size);
  const std::int64_t steps_per_epoch = std::int64_t((corpus.size() + b - 1) / b);
  const std::int64_t total = steps_per_epoch * tcfg.epochs;
  std::optional<double> initial;
  int above = 0;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto order = shuffled(corpus.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += b, ++step) {
      std::vector<SequenceInput> inputs;
      std::vector<std::vector<int>> rows;
      std::vector<std::vector<std::uint8_t>> masks;
      std::vector<std::size_t> lengths;
      for (std::size_t i = start; i < std::min(order.size(), start + b); ++i) {
        const auto& seq = corpus[order[i]];
        inputs.push_back({seq, seq.size(), nullptr});
        rows.push_back(seq);
        if (loss_masks.empty()) masks.emplace_back(seq.size(), 1);
        else masks.push_back(loss_masks[order[i]]);
        lengths.push_back(seq.size());
      }
      Graph g;
      ModelVars vars = bind_model(g, base, true, nullptr, false);
      GraphForward f = forward_graph(g, vars, inputs, mcfg);
      const PackedTargets t = pack_targets(rows, masks, lengths);
      Var loss = masked_cross_entropy(f.logits, t.targets, t.mask);
      const double lv = loss.item();
      check_finite(lv, "pretraining loss");
      if (!initial) initial = lv;
      above = lv > 10.0 * *initial ? above + 1 : 0;
      if (above >= 100) throw DivergenceError("pretraining loss above 10x its initial value for 100 steps");

      opt.zero_grad();
      g.backward(loss);
      clip_grad_norm(params, tcfg.grad_clip);
      const double lr = scheduled_lr(tcfg, step, total);
      opt.step(lr);
      StepLog entry{step, lv, 0.0, lv, lr, 0.0};
      result.log.push_back(entry);
      if (on_step) on_step(entry);
    }
  }
  base.set_trainable(false);
  return result;
}

double corpus_loss(const BaseWeights& base, std::span<const std::vector<int>> corpus,
                   const ModelConfig& mcfg) {
  if (corpus.empty()) throw ValueError("corpus_loss: corpus is empty");
  double weighted = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < corpus.size(); start += kChunk) {
    std::vector<SequenceInput> inputs;
    std::vector<std::vector<int>> rows;
    std::vector<std::vector<std::uint8_t>> masks;
    std::vector<std::size_t> lengths;
    for (std::size_t i = start; i < std::min(corpus.size(), start + kChunk); ++i) {
      inputs.push_back({corpus[i], corpus[i].size(), nullptr});
      rows.push_back(corpus[i]);
      masks.emplace_back(corpus[i].size(), 1);
      lengths.push_back(corpus[i].size());
    }
    Graph g;
    ModelVars vars = bind_model(g, const_cast<BaseWeights&>(base), false, nullptr, false);
    GraphForward f = forward_graph(g, vars, inputs, mcfg);
    const PackedTargets t = pack_targets(rows, masks, lengths);
    const std::size_t n = std::size_t(std::count(t.mask.begin(), t.mask.end(), 1));
    weighted += masked_cross_entropy(f.logits, t.targets, t.mask).item() * double(n);
    count += n;
  }
  return weighted / double(count);
}

MetaTrainResult meta_train(BaseWeights& base, std::span<const ConditionSample> samples,
                           const TrainConfig& tcfg, const ModelConfig& mcfg,
                           const MetaTrainOptions& options) {
  mcfg.validate();
  tcfg.validate();
  if (samples.empty()) throw ValueError("meta_train: no training samples");
  const TemplateTable fallback = TemplateTable::defaults();
  const TemplateTable& templates = options.templates ? *options.templates : fallback;
  const double f = mcfg.reg_weight_override.value_or(tcfg.reg_weight);

  base.set_trainable(false);
  std::mt19937_64 rng(tcfg.seed);
  MetaTrainResult result{HypernetParams::init(mcfg, rng), {}};
  HypernetParams& hyper = result.hyper;
  std::vector<Tensor*> params = hyper.trainables();
  AdamW opt(params, tcfg);
  std::mt19937_64 template_rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);

  const std::size_t b = std::size_t(tcfg.batch_size);
  const std::int64_t steps_per_epoch = std::int64_t((samples.size() + b - 1) / b);
  const std::int64_t total = steps_per_epoch * tcfg.epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto order = shuffled(samples.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += b, ++step) {
      std::vector<ConditionSample> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + b); ++i) chunk.push_back(samples[order[i]]);
      const TokenBatch batch = build_batch(chunk, templates, mcfg, &template_rng);
      const std::vector<ConditionEncoding> conditions = encode_batch_conditions(batch, base);

      Graph g;
      ModelVars vars = bind_model(g, base, false, &hyper, true);
      BatchLoss loss = batch_loss(g, vars, batch, conditions, mcfg, f);
      const double total_value = loss.total.item();
      if (!std::isfinite(total_value)) {
        if (options.recovery_checkpoint) save_checkpoint(*options.recovery_checkpoint, base, &hyper, mcfg);
        throw DivergenceError("meta-training loss became non-finite at step " + std::to_string(step));
      }
      opt.zero_grad();
      g.backward(loss.total);
      clip_grad_norm(params, tcfg.grad_clip);
      const double lr = scheduled_lr(tcfg, step, total);
      opt.step(lr);

      const double reg_value = loss.reg.item();
      StepLog entry{step, loss.ce.item(), reg_value, total_value, lr, reg_value};
      result.log.push_back(entry);
      if (options.on_step) options.on_step(entry);
    }
  }
  return result;
}

}  // namespace megan
