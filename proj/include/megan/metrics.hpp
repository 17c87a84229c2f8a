#pragma once

#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace megan::metrics {

using Words = std::vector<std::string>;

/// Lowercases, then splits on whitespace.
Words words(std::string_view text);

/// Clipped unigram and bigram precisions, equal weights, brevity penalty exp(1 - r/c) when c <= r.
double bleu2(const Words& prediction, const Words& reference);
double bleu2(std::string_view prediction, std::string_view reference);

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// LCS F-measure; beta = infinity returns recall exactly.
double rouge_l(const Words& prediction, const Words& reference, double beta = kInfinity);
double rouge_l(std::string_view prediction, std::string_view reference, double beta = kInfinity);

/// Distinct n-grams over all predictions divided by total n-grams.
double dist_n(std::span<const Words> predictions, int n);
double dist_n(std::span<const std::string> predictions, int n);

/// Exact match after trimming and lowercasing. Throws on empty input or a length mismatch.
double accuracy(std::span<const std::string> predictions, std::span<const std::string> golds);

}  // namespace megan::metrics
