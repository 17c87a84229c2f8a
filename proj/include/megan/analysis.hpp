#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "megan/data.hpp"
#include "megan/hypernet.hpp"
#include "megan/model.hpp"

namespace megan {

/// Raw beta of one conditioned forward pass, one row per layer.
struct BetaProfile {
  ConditionType condition_type = ConditionType::synthetic;
  std::string z;
  std::string sample_id;
  Matrix betas;  // L x C
};

/// One profile per sample from a forward pass over the rendered prompt and x.
/// Templates follow `config.disable_prompt_template`; the first template is used.
std::vector<BetaProfile> extract_betas(const BaseWeights& base, const HypernetParams& hyper,
                                       const ModelConfig& config, const TemplateTable& templates,
                                       std::span<const ConditionSample> samples);

struct LayerStats {
  std::vector<double> mean;  // per layer, over samples and channels
  std::vector<double> std;   // population standard deviation over the same values
};

LayerStats layer_means(std::span<const BetaProfile> profiles);

/// Five-fold nearest-centroid probe on each profile's per-layer channel means.
/// Classes are the distinct (condition_type, z) pairs; sample i of a class
/// lands in fold i mod 5. Returns the mean accuracy over folds.
double condition_separability(std::span<const BetaProfile> profiles);

/// Rows of condition_type,z,sample_id,layer,channel_mean_beta. With `full`,
/// one column per channel (beta_0..beta_{C-1}) replaces the channel mean.
void export_csv(std::span<const BetaProfile> profiles, const std::filesystem::path& path, bool full = false);

}  // namespace megan
