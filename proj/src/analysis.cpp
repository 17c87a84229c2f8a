#include "megan/analysis.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>

namespace megan {

std::vector<BetaProfile> extract_betas(const BaseWeights& base, const HypernetParams& hyper,
                                       const ModelConfig& config, const TemplateTable& templates,
                                       std::span<const ConditionSample> samples) {
  std::vector<BetaProfile> out;
  out.reserve(samples.size());
  EncodeOptions opts;
  opts.raw = config.disable_prompt_template;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ConditionSample& s = samples[i];
    const ConditionEncoding cond =
        encode_condition(s.z, s.condition_type, templates, base.token_embedding.matrix(), opts);
    const std::vector<int> tokens = prompt_tokens(cond.text, s.x);
    ForwardOutput f = forward(tokens, &cond, base, &hyper, config, tokens.size());
    out.push_back({s.condition_type, s.z, std::to_string(i), std::move(f.betas)});
  }
  return out;
}

LayerStats layer_means(std::span<const BetaProfile> profiles) {
  if (profiles.empty()) throw ValueError("layer_means: no profiles");
  const Index layers = profiles.front().betas.rows();
  LayerStats stats{std::vector<double>(std::size_t(layers), 0.0), std::vector<double>(std::size_t(layers), 0.0)};
  for (const auto& p : profiles)
    if (p.betas.rows() != layers || p.betas.cols() != profiles.front().betas.cols())
      throw ShapeError("layer_means: profile " + p.sample_id + " is " + shape_string(p.betas.rows(), p.betas.cols()));
  const double n = double(profiles.size()) * double(profiles.front().betas.cols());
  for (Index l = 0; l < layers; ++l) {
    double sum = 0.0;
    for (const auto& p : profiles) sum += p.betas.row(l).sum();
    const double mean = sum / n;
    double sq = 0.0;
    for (const auto& p : profiles) sq += (p.betas.row(l).array() - mean).square().sum();
    stats.mean[std::size_t(l)] = mean;
    stats.std[std::size_t(l)] = std::sqrt(sq / n);
  }
  return stats;
}

double condition_separability(std::span<const BetaProfile> profiles) {
  constexpr int kFolds = 5;
  std::map<std::pair<ConditionType, std::string>, std::vector<Eigen::VectorXd>> classes;
  for (const auto& p : profiles)
    classes[{p.condition_type, p.z}].push_back(p.betas.rowwise().mean());
  if (classes.size() < 2) throw ValueError("condition_separability: need at least 2 condition classes");
  for (const auto& [key, members] : classes)
    if (members.size() < 2)
      throw ValueError("condition_separability: class '" + key.second + "' has " +
                       std::to_string(members.size()) + " sample(s), need at least 2");

  double accuracy_sum = 0.0;
  int folds_used = 0;
  for (int fold = 0; fold < kFolds; ++fold) {
    std::vector<Eigen::VectorXd> centroids;
    for (const auto& [key, members] : classes) {
      Eigen::VectorXd c = Eigen::VectorXd::Zero(members.front().size());
      int n = 0;
      for (std::size_t i = 0; i < members.size(); ++i)
        if (int(i % kFolds) != fold) {
          c += members[i];
          ++n;
        }
      centroids.push_back(c / double(n));
    }
    int correct = 0, tested = 0;
    std::size_t label = 0;
    for (const auto& [key, members] : classes) {
      for (std::size_t i = std::size_t(fold); i < members.size(); i += kFolds) {
        std::size_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < centroids.size(); ++c) {
          const double d = (members[i] - centroids[c]).squaredNorm();
          if (d < best_dist) {
            best_dist = d;
            best = c;
          }
        }
        correct += best == label ? 1 : 0;
        ++tested;
      }
      ++label;
    }
    if (tested > 0) {
      accuracy_sum += double(correct) / double(tested);
      ++folds_used;
    }
  }
  return accuracy_sum / double(folds_used);
}

void export_csv(std::span<const BetaProfile> profiles, const std::filesystem::path& path, bool full) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write CSV " + path.string());
  out.precision(12);
  const auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  out << "condition_type,z,sample_id,layer";
  if (full && !profiles.empty()) {
    for (Index c = 0; c < profiles.front().betas.cols(); ++c) out << ",beta_" << c;
  } else if (!full) {
    out << ",channel_mean_beta";
  }
  out << '\n';
  for (const auto& p : profiles) {
    for (Index l = 0; l < p.betas.rows(); ++l) {
      out << to_string(p.condition_type) << ',' << quote(p.z) << ',' << quote(p.sample_id) << ',' << l + 1;
      if (full) {
        for (Index c = 0; c < p.betas.cols(); ++c) out << ',' << p.betas(l, c);
      } else {
        out << ',' << p.betas.row(l).mean();
      }
      out << '\n';
    }
  }
  if (!out) throw IoError("failed writing CSV " + path.string());
}

}  // namespace megan
