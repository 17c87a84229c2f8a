#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "megan/data.hpp"
#include "megan/hypernet.hpp"
#include "megan/model.hpp"

namespace megan {

struct TrainConfig {
  double learning_rate = 3e-3;
  int epochs = 3;
  int batch_size = 32;
  double reg_weight = 0.001;  // f
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.03;
  double min_lr_ratio = 0.1;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

// --- losses -----------------------------------------------------------------

/// Mean over masked rows of -log softmax(logits)[target]. Throws on an all-false mask.
double ce_loss(const Matrix& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

/// Root-mean-square of every raw beta across the given profiles.
double reg_loss(std::span<const Matrix> profiles);
Var reg_loss(std::span<const Var> betas);

inline double total_loss(double ce, double reg, double f) { return ce + f * reg; }
Var total_loss(Var ce, Var reg, double f);

// --- optimization -----------------------------------------------------------

/// Linear warmup over the first `warmup_fraction` of steps, then cosine decay
/// from the peak to `min_lr_ratio * peak`.
double scheduled_lr(const TrainConfig& config, std::int64_t step, std::int64_t total_steps);

/// Rescales gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);

class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, const TrainConfig& config);
  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Matrix> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
};

// --- batches ----------------------------------------------------------------

/// Packed next-token targets: row t of each sequence predicts token t + 1.
struct PackedTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

PackedTargets pack_targets(std::span<const std::vector<int>> rows,
                           std::span<const std::vector<std::uint8_t>> target_masks,
                           std::span<const std::size_t> lengths);

// --- pipelines --------------------------------------------------------------

struct StepLog {
  std::int64_t step = 0;
  double ce = 0;
  double reg = 0;
  double total = 0;
  double lr = 0;
  double beta_rms = 0;

  nlohmann::json to_json() const;
};

using StepCallback = std::function<void(const StepLog&)>;

struct PretrainResult {
  BaseWeights base;
  std::vector<StepLog> log;
};

/// Next-token training of every base weight with beta fixed at 0 (plain SiLU).
/// Each corpus entry is a full token sequence. With `loss_masks` empty every
/// position after the first is a target; otherwise only positions whose mask is set.
PretrainResult pretrain_base(std::span<const std::vector<int>> corpus, const ModelConfig& mcfg,
                             const TrainConfig& tcfg, const StepCallback& on_step = {},
                             std::span<const std::vector<std::uint8_t>> loss_masks = {});

/// Mean next-token loss of the base (beta = 0) over the corpus.
double corpus_loss(const BaseWeights& base, std::span<const std::vector<int>> corpus,
                   const ModelConfig& mcfg);

struct MetaTrainOptions {
  const TemplateTable* templates = nullptr;  // defaults() when null
  StepCallback on_step;
  /// Where the last good theta is written if the loss turns non-finite.
  std::optional<std::filesystem::path> recovery_checkpoint;
};

struct MetaTrainResult {
  HypernetParams hyper;
  std::vector<StepLog> log;
};

/// Trains theta only, with the base frozen (its tensors carry no gradient
/// buffers). Loss per batch: masked CE + f * RMS(beta).
MetaTrainResult meta_train(BaseWeights& base, std::span<const ConditionSample> samples,
                           const TrainConfig& tcfg, const ModelConfig& mcfg,
                           const MetaTrainOptions& options = {});

/// Loss pieces of a single batch, for gradient checks.
struct BatchLoss {
  Var ce, reg, total;
};

BatchLoss batch_loss(Graph& g, const ModelVars& vars, const TokenBatch& batch,
                     std::span<const ConditionEncoding> conditions, const ModelConfig& mcfg,
                     double reg_weight);

/// One encoding per batch row, embedded with the (frozen) base token table.
std::vector<ConditionEncoding> encode_batch_conditions(const TokenBatch& batch, const BaseWeights& base);

}  // namespace megan
