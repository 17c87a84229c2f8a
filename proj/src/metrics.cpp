#include "megan/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "megan/error.hpp"

namespace megan::metrics {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = char(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto space = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && space(s.front())) s.remove_prefix(1);
  while (!s.empty() && space(s.back())) s.remove_suffix(1);
  return std::string(s);
}

using Gram = std::vector<std::string>;

std::map<Gram, int> ngram_counts(const Words& w, std::size_t n) {
  std::map<Gram, int> counts;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++counts[Gram(w.begin() + std::ptrdiff_t(i), w.begin() + std::ptrdiff_t(i + n))];
  return counts;
}

double clipped_precision(const Words& pred, const Words& ref, std::size_t n) {
  const auto p = ngram_counts(pred, n);
  const auto r = ngram_counts(ref, n);
  int total = 0, hit = 0;
  for (const auto& [gram, count] : p) {
    total += count;
    const auto it = r.find(gram);
    if (it != r.end()) hit += std::min(count, it->second);
  }
  return total == 0 ? 0.0 : double(hit) / double(total);
}

std::size_t lcs(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (const auto& x : a) {
    for (std::size_t j = 0; j < b.size(); ++j) cur[j + 1] = x == b[j] ? prev[j] + 1 : std::max(prev[j + 1], cur[j]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

Words words(std::string_view text) {
  std::istringstream in(lower(text));
  Words out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

double bleu2(const Words& prediction, const Words& reference) {
  if (prediction.empty() || reference.empty()) return 0.0;
  const double p1 = clipped_precision(prediction, reference, 1);
  const double p2 = clipped_precision(prediction, reference, 2);
  if (p1 == 0.0 || p2 == 0.0) return 0.0;
  const double c = double(prediction.size());
  const double r = double(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(0.5 * std::log(p1) + 0.5 * std::log(p2));
}

double bleu2(std::string_view prediction, std::string_view reference) {
  return bleu2(words(prediction), words(reference));
}

double rouge_l(const Words& prediction, const Words& reference, double beta) {
  if (prediction.empty() || reference.empty()) return 0.0;
  const double l = double(lcs(prediction, reference));
  if (l == 0.0) return 0.0;
  const double recall = l / double(reference.size());
  const double precision = l / double(prediction.size());
  if (std::isinf(beta)) return recall;
  const double b2 = beta * beta;
  return (1.0 + b2) * recall * precision / (recall + b2 * precision);
}

double rouge_l(std::string_view prediction, std::string_view reference, double beta) {
  return rouge_l(words(prediction), words(reference), beta);
}

double dist_n(std::span<const Words> predictions, int n) {
  if (n < 1) throw ValueError("dist_n: n must be positive");
  std::set<Gram> unique;
  std::size_t total = 0;
  for (const Words& w : predictions) {
    for (const auto& [gram, count] : ngram_counts(w, std::size_t(n))) {
      unique.insert(gram);
      total += std::size_t(count);
    }
  }
  return total == 0 ? 0.0 : double(unique.size()) / double(total);
}

double dist_n(std::span<const std::string> predictions, int n) {
  std::vector<Words> split;
  for (const auto& p : predictions) split.push_back(words(p));
  return dist_n(std::span<const Words>(split), n);
}

double accuracy(std::span<const std::string> predictions, std::span<const std::string> golds) {
  if (predictions.size() != golds.size())
    throw ValueError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(golds.size()) + " references");
  if (predictions.empty()) throw ValueError("accuracy: no samples");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    hit += lower(trim(predictions[i])) == lower(trim(golds[i])) ? 1 : 0;
  return double(hit) / double(predictions.size());
}

}  // namespace megan::metrics
