#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "megan/hypernet.hpp"
#include "megan/model_config.hpp"
#include "megan/tokenizer.hpp"

namespace megan {

/// One (x, y, z) record.
struct ConditionSample {
  std::string x;
  std::string y;
  std::string z;
  ConditionType condition_type = ConditionType::synthetic;
};

/// One object per line with keys x, y, z, condition_type. Errors cite the line number.
std::vector<ConditionSample> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::filesystem::path& path, std::span<const ConditionSample> samples);

/// Row layout: BOS, condition prompt, x, SEP, y, EOS, PAD...
struct TokenBatch {
  std::vector<std::vector<int>> token_ids;           // B x T, right-padded
  std::vector<std::vector<std::uint8_t>> loss_mask;  // true on y tokens and the closing EOS
  std::vector<std::size_t> lengths;                  // unpadded row lengths
  std::vector<std::size_t> prefix_lengths;           // BOS + prompt + x + SEP
  std::vector<std::string> condition_texts;          // rendered prompts

  std::size_t size() const { return token_ids.size(); }
  std::size_t width() const { return token_ids.empty() ? 0 : token_ids.front().size(); }
};

/// Tokens of BOS, condition prompt, x, SEP: the generation prompt for a sample.
std::vector<int> prompt_tokens(std::string_view condition_text, std::string_view x);

/// `template_rng` picks a template uniformly per row; nullptr uses the first template.
TokenBatch build_batch(std::span<const ConditionSample> samples, const TemplateTable& templates,
                       const ModelConfig& config, std::mt19937_64* template_rng = nullptr);

// --- synthetic conditioned task suite ----------------------------------------

inline constexpr std::string_view kLowResourceTask = "rot13";
inline constexpr std::string_view kUnseenTask = "swapcase";

/// uppercase, reverse, duplicate, identity and rot13, in suite order.
std::span<const std::string_view> synth_meta_conditions();

/// Applies the named string transformation; unknown names raise ValueError.
std::string apply_transform(std::string_view task, std::string_view x);

struct Task {
  std::string name;
  std::vector<ConditionSample> samples;
};

enum class TargetSetting { low_resource, unseen };

struct TargetTask {
  Task task;
  TargetSetting setting = TargetSetting::unseen;
};

struct TaskSplit {
  std::vector<Task> meta_train;
  std::vector<TargetTask> targets;

  std::vector<ConditionSample> meta_train_samples() const;
};

struct SynthOptions {
  std::size_t samples_per_task = 2000;
  std::size_t low_resource_cap = 50;
  std::size_t target_samples = 200;
};

/// Random lowercase strings of length 3..8 under each transformation.
std::vector<ConditionSample> synth_samples(std::string_view task, std::size_t count,
                                           std::mt19937_64& rng);

TaskSplit synth_task_suite(std::uint64_t seed, const SynthOptions& options = {});

/// Fresh samples of the named tasks, disjoint in RNG stream from the suite.
std::vector<ConditionSample> synth_heldout(std::uint64_t seed, std::span<const std::string_view> tasks,
                                           std::size_t per_task);

/// Pretraining corpus: every meta-training transformation, but each row's z is
/// drawn independently of its transformation, so the prompt carries no task signal.
std::vector<ConditionSample> synth_base_corpus(std::uint64_t seed, std::size_t count);

}  // namespace megan
