// Expected values come from tests/oracles/metric_values.py.
#include <cmath>
#include <random>

#include "doctest.h"
#include "megan/error.hpp"
#include "megan/metrics.hpp"

using namespace megan::metrics;

TEST_CASE("bleu2") {
  CHECK(bleu2("a b c d", "a b c d") == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(bleu2("a b", "a b c d") - std::exp(-1.0)) < 1e-6);
  CHECK(bleu2("a b", "a b c d") == doctest::Approx(0.36787944117144233).epsilon(1e-14));
  CHECK(bleu2("the cat sat on the mat", "the cat is on the mat") == doctest::Approx(0.70710678118654757).epsilon(1e-14));
  CHECK(bleu2("a b c d e", "a b c") == doctest::Approx(0.54772255750516619).epsilon(1e-14));
  CHECK(bleu2("b a", "a b") == 0.0);
  CHECK(bleu2("", "a b") == 0.0);
  CHECK(bleu2("A B", "a b") == doctest::Approx(1.0));
}

TEST_CASE("rouge_l") {
  CHECK(rouge_l("a b c", "a b c") == 1.0);
  CHECK(rouge_l("a b c", "a b c", 1.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(rouge_l("a c", "a b c", kInfinity) - 2.0 / 3.0) < 1e-9);
  CHECK(rouge_l("a c", "a b c", 1.0) == doctest::Approx(0.8).epsilon(1e-14));
  CHECK(rouge_l("b a c d", "a b c", 2.0) == doctest::Approx(0.625).epsilon(1e-14));
  CHECK(rouge_l("x y", "a b") == 0.0);
  CHECK(rouge_l("", "a b") == 0.0);
  CHECK(rouge_l("a", "") == 0.0);
}

TEST_CASE("dist_n") {
  const std::vector<std::string> one{"a b a b"};
  CHECK(std::abs(dist_n(one, 2) - 2.0 / 3.0) < 1e-9);
  const std::vector<std::string> two{"a b a", "c a"};
  CHECK(dist_n(two, 1) == doctest::Approx(0.6).epsilon(1e-14));
  const std::vector<std::string> three{"x y z", "x y w"};
  CHECK(dist_n(three, 2) == doctest::Approx(0.75).epsilon(1e-14));
  const std::vector<std::string> distinct{"a b c d"};
  CHECK(dist_n(distinct, 1) == 1.0);
  CHECK(dist_n(std::vector<std::string>{}, 2) == 0.0);
  CHECK(dist_n(std::vector<std::string>{"a"}, 2) == 0.0);
}

TEST_CASE("accuracy") {
  const std::vector<std::string> a{"Yes", " no "}, b{"yes", "no"}, c{"yes", "maybe"};
  CHECK(accuracy(a, b) == 1.0);
  CHECK(accuracy(a, c) == 0.5);
  try {
    accuracy(std::vector<std::string>{}, std::vector<std::string>{});
    FAIL("expected an error");
  } catch (const megan::ValueError& e) {
    CHECK(std::string(e.what()).find("no samples") != std::string::npos);
  }
  CHECK_THROWS_AS(accuracy(a, std::vector<std::string>{"x"}), megan::ValueError);
}

TEST_CASE("metric properties on random sentences") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> len(0, 8), word(0, 5);
  auto sentence = [&] {
    std::string s;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) s += std::string(i ? " " : "") + char('a' + word(rng));
    return s;
  };
  std::vector<std::string> preds;
  for (int trial = 0; trial < 300; ++trial) {
    const std::string p = sentence(), r = sentence();
    for (double v : {bleu2(p, r), rouge_l(p, r), rouge_l(p, r, 1.0), rouge_l(p, r, 0.5)}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(std::abs(rouge_l(p, r, 1e6) - rouge_l(p, r, kInfinity)) < 1e-6);
    if (!words(p).empty()) {
      CHECK(bleu2(p, p) == doctest::Approx(words(p).size() >= 2 ? 1.0 : 0.0));
      CHECK(rouge_l(p, p) == 1.0);
    }
    preds.push_back(p);
    const double before = dist_n(preds, 2);
    CHECK(before >= 0.0);
    CHECK(before <= 1.0);
    std::vector<std::string> repeated = preds;
    repeated.push_back(preds[rng() % preds.size()]);
    CHECK(dist_n(repeated, 2) <= before + 1e-15);
  }
}

TEST_CASE("metric tokenization lowercases and splits on whitespace") {
  CHECK(words("  Hello\tWORLD \n x ") == Words{"hello", "world", "x"});
  CHECK(words("").empty());
}
