#include <random>

#include "doctest.h"
#include "megan/hypernet.hpp"
#include "megan/tokenizer.hpp"
#include "oracles.hpp"

using namespace megan;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 3;
  c.hidden = 8;
  c.intermediate = 16;
  c.reduced = 4;
  c.heads = 2;
  c.max_context = 64;
  return c;
}

void randomize(HypernetParams& h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 0.8);
  for (auto& [_, t] : h.named())
    for (double& v : t->data()) v = n(rng);
}

}  // namespace

TEST_CASE("parameter count at 8B scale") {
  ModelConfig c;
  c.layers = 32;
  c.hidden = 4096;
  c.intermediate = 14336;
  c.reduced = 128;
  CHECK(param_count(c) == 3411968);
  CHECK(param_count(c) == 26656 * 128);
  std::mt19937_64 rng(0);
  const HypernetParams h = HypernetParams::init(c, rng);
  CHECK(h.trainable_count() == 3411968);
}

TEST_CASE("parameter count drops the layer table when disabled") {
  ModelConfig c = small_config();
  c.disable_layer_embedding = true;
  CHECK(param_count(c) == (3 * 8 + 16) * 4);
  std::mt19937_64 rng(0);
  HypernetParams h = HypernetParams::init(c, rng);
  CHECK(h.trainable_count() == param_count(c));
  CHECK(h.trainables().size() == 4);
}

TEST_CASE("initial hypernetwork emits beta = 0") {
  const ModelConfig c = small_config();
  std::mt19937_64 rng(1);
  const HypernetParams h = HypernetParams::init(c, rng);
  CHECK(h.w_out.matrix().isZero());
  const Matrix table = Matrix::Random(260, 8);
  const ConditionEncoding cond = encode_condition("formal", ConditionType::style, TemplateTable::defaults(), table);
  for (int l = 1; l <= 3; ++l) CHECK(generate_beta(cond, Matrix::Random(5, 8), l, h).values().isZero());
}

TEST_CASE("generate_beta agrees with the loop oracle and stays inside (-1, 1)") {
  const ModelConfig c = small_config();
  std::mt19937_64 rng(2);
  HypernetParams h = HypernetParams::init(c, rng);
  randomize(h, 9);
  h.w_out.matrix() *= 10.0;  // push some channels into the clamp
  const Matrix table = Matrix::Random(260, 8);
  const ConditionEncoding cond = encode_condition("positive", ConditionType::sentiment, TemplateTable::defaults(), table);
  const Matrix latent = Matrix::Random(7, 8);
  for (int l = 1; l <= 3; ++l) {
    const BetaVector got = generate_beta(cond, latent, l, h);
    const auto want = oracle::generate_beta(cond.embeddings, latent, l, h);
    CHECK(got.size() == 16);
    for (Index j = 0; j < 16; ++j) {
      CHECK(got.values()(j) == doctest::Approx(want[std::size_t(j)]).epsilon(1e-12));
      CHECK(std::abs(got.values()(j)) < 1.0);
    }
  }
  CHECK_THROWS_AS(generate_beta(cond, latent, 0, h), ValueError);
  CHECK_THROWS_AS(generate_beta(cond, latent, 4, h), ValueError);
  CHECK_THROWS_AS(generate_beta(cond, Matrix::Random(7, 5), 1, h), ShapeError);
}

TEST_CASE("layer embedding makes beta depend on the layer index") {
  const ModelConfig c = small_config();
  std::mt19937_64 rng(3);
  HypernetParams h = HypernetParams::init(c, rng);
  randomize(h, 4);
  const Matrix table = Matrix::Random(260, 8);
  const ConditionEncoding cond = encode_condition("x", ConditionType::task, TemplateTable::defaults(), table);
  const Matrix latent = Matrix::Random(4, 8);
  CHECK((generate_beta(cond, latent, 1, h).values() - generate_beta(cond, latent, 2, h).values()).norm() > 1e-6);
  h.use_layer_embedding = false;
  CHECK((generate_beta(cond, latent, 1, h).values() - generate_beta(cond, latent, 2, h).values()).norm() == 0.0);
}

TEST_CASE("condition encoding renders the first template and embeds exact rows") {
  const TemplateTable t = TemplateTable::defaults();
  const Matrix table = Matrix::Random(260, 8);
  const ConditionEncoding e = encode_condition("formal", ConditionType::style, t, table);
  CHECK(e.text == "Please provide the response with the style of formal.");
  CHECK(e.token_ids == tokenize(e.text));
  for (std::size_t i = 0; i < e.token_ids.size(); ++i) CHECK(e.embeddings.row(Index(i)) == table.row(e.token_ids[i]));
  EncodeOptions raw;
  raw.raw = true;
  CHECK(encode_condition("formal", ConditionType::style, t, table, raw).text == "formal");
  CHECK_THROWS_AS(encode_condition("", ConditionType::style, t, table), ValueError);
}

TEST_CASE("template table parsing") {
  const TemplateTable t = TemplateTable::from_json(nlohmann::json{{"style", {"A {z}", "B {z}!"}}, {"task", "do {z}"}});
  CHECK(t.render(ConditionType::style, "calm", 1) == "B calm!");
  CHECK(t.render(ConditionType::task, "sum") == "do sum");
  try {
    t.templates(ConditionType::emotion);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("task") != std::string::npos);
    CHECK(msg.find("style") != std::string::npos);
  }
  CHECK_THROWS_AS(TemplateTable::from_json(nlohmann::json{{"style", "no placeholder"}}), ValueError);
  CHECK_THROWS_AS(TemplateTable::from_json(nlohmann::json{{"style", "{z} and {z}"}}), ValueError);
  CHECK_THROWS_AS(TemplateTable::from_json(nlohmann::json{{"mood", "{z}"}}), ValueError);
  const TemplateTable round = TemplateTable::from_json(TemplateTable::defaults().to_json());
  CHECK(round.to_json() == TemplateTable::defaults().to_json());
}

TEST_CASE("condition type names round-trip") {
  for (auto type : {ConditionType::task, ConditionType::domain, ConditionType::persona, ConditionType::style,
                    ConditionType::sentiment, ConditionType::emotion, ConditionType::synthetic})
    CHECK(parse_condition_type(to_string(type)) == type);
  CHECK_THROWS_AS(parse_condition_type("weather"), ValueError);
}
