#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "megan/checkpoint.hpp"
#include "megan/grad_check.hpp"
#include "megan/training.hpp"

using namespace megan;

namespace {

ModelConfig micro() {
  ModelConfig c;
  c.layers = 1;
  c.hidden = 8;
  c.intermediate = 16;
  c.reduced = 4;
  c.heads = 2;
  c.max_context = 40;
  return c;
}

std::vector<ConditionSample> few_samples(std::size_t per_task, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ConditionSample> out;
  for (auto task : {"uppercase", "reverse"}) {
    auto s = synth_samples(task, per_task, rng);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

void perturb(HypernetParams& h, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, scale);
  for (auto& [_, t] : h.named())
    for (double& v : t->data()) v += n(rng);
}

}  // namespace

TEST_CASE("AdamW step matches a hand-rolled update") {
  TrainConfig cfg;
  Tensor w(Matrix{{1.0, -2.0, 0.5}}, true);
  AdamW opt({&w}, cfg);
  const Matrix g1{{0.5, -0.1, 0.0}}, g2{{0.2, 0.3, -0.4}};
  Matrix ref = w.matrix(), m = Matrix::Zero(1, 3), v = Matrix::Zero(1, 3);
  int t = 0;
  for (const Matrix* g : {&g1, &g2}) {
    w.grad() = *g;
    opt.step(0.01);
    ++t;
    for (Index i = 0; i < 3; ++i) {
      m(0, i) = 0.9 * m(0, i) + 0.1 * (*g)(0, i);
      v(0, i) = 0.999 * v(0, i) + 0.001 * (*g)(0, i) * (*g)(0, i);
      const double mh = m(0, i) / (1 - std::pow(0.9, t)), vh = v(0, i) / (1 - std::pow(0.999, t));
      ref(0, i) = ref(0, i) * (1 - 0.01 * 0.01) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK((w.matrix() - ref).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(opt.steps() == 2);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.learning_rate = 1.0;
  const std::int64_t total = 1000;  // 30 warmup steps
  CHECK(scheduled_lr(c, 0, total) == doctest::Approx(1.0 / 30));
  CHECK(scheduled_lr(c, 29, total) == doctest::Approx(1.0));
  CHECK(scheduled_lr(c, 30, total) == doctest::Approx(1.0));
  CHECK(scheduled_lr(c, 999, total) == doctest::Approx(0.1).epsilon(1e-4));
  double prev = 2;
  for (std::int64_t s = 30; s < total; ++s) {
    const double lr = scheduled_lr(c, s, total);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("gradient clipping rescales to the bound") {
  Tensor a(Matrix{{3.0}}, true), b(Matrix{{4.0}}, true);
  a.grad()(0, 0) = 3.0;
  b.grad()(0, 0) = 4.0;
  Tensor* ps[] = {&a, &b};
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()(0, 0) == doctest::Approx(0.6));
  CHECK(b.grad()(0, 0) == doctest::Approx(0.8));
  CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad()(0, 0) == doctest::Approx(0.6));
}

TEST_CASE("regularizer is the RMS of raw beta") {
  const Matrix p1{{0.5, -0.5}, {0.0, 1.0}}, p2{{0.2, 0.2}};
  const Matrix ps[] = {p1, p2};
  const double want = std::sqrt((0.25 + 0.25 + 0 + 1 + 0.04 + 0.04) / 6);
  CHECK(reg_loss(ps) == doctest::Approx(want).epsilon(1e-15));
  Graph g;
  const Var vs[] = {g.constant(p1), g.constant(p2)};
  CHECK(reg_loss(vs).item() == doctest::Approx(want).epsilon(1e-15));
  CHECK(total_loss(2.0, 3.0, 0.001) == 2.003);

  Tensor zero(Matrix::Zero(2, 3), true);
  Graph g2;
  g2.backward(rms(g2.parameter(zero)));
  CHECK(zero.grad().isZero());
}

TEST_CASE("theta gradient of the total loss matches central differences") {
  const ModelConfig c = micro();
  std::mt19937_64 rng(1);
  BaseWeights base = BaseWeights::init(c, rng);
  HypernetParams hyper = HypernetParams::init(c, rng);
  perturb(hyper, 2, 0.5);
  const auto samples = few_samples(2, 3);
  const TokenBatch batch = build_batch(samples, TemplateTable::defaults(), c);
  const auto conds = encode_batch_conditions(batch, base);
  for (auto& [name, tensor] : hyper.named()) {
    CAPTURE(name);
    Tensor probe(tensor->matrix());
    const double err = finite_difference_check(
        [&, t = tensor](Graph& g, Var p) {
          ModelVars vars = bind_model(g, base, false, &hyper, false);
          HypernetVars& h = *vars.hyper;
          for (auto [slot, owner] : {std::pair{&h.w_q, &hyper.w_q}, std::pair{&h.w_k, &hyper.w_k},
                                     std::pair{&h.w_v, &hyper.w_v}, std::pair{&h.layer_embedding, &hyper.layer_embedding},
                                     std::pair{&h.w_out, &hyper.w_out}})
            if (owner == t) *slot = p;
          return batch_loss(g, vars, batch, conds, c, 0.5).total;
        },
        probe, 1e-5);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("meta-training leaves the base untouched and is reproducible") {
  const ModelConfig c = micro();
  std::mt19937_64 rng(4);
  BaseWeights base = BaseWeights::init(c, rng);
  const std::string before = base.sha256();
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 9;
  const auto samples = few_samples(6, 5);
  std::vector<StepLog> seen;
  MetaTrainOptions opts;
  opts.on_step = [&](const StepLog& s) { seen.push_back(s); };
  const MetaTrainResult a = meta_train(base, samples, tc, c, opts);
  CHECK(base.sha256() == before);
  for (auto& [_, t] : base.named()) CHECK_FALSE(t->requires_grad());
  CHECK(a.log.size() == 6);
  CHECK(seen.size() == 6);
  CHECK_FALSE(a.hyper.w_out.matrix().isZero());

  const MetaTrainResult b = meta_train(base, samples, tc, c);
  for (std::size_t i = 0; i < a.hyper.named().size(); ++i)
    CHECK(a.hyper.named()[i].second->matrix() == b.hyper.named()[i].second->matrix());
}

TEST_CASE("regularization weight: override and zero") {
  const ModelConfig base_cfg = micro();
  std::mt19937_64 rng(6);
  BaseWeights base = BaseWeights::init(base_cfg, rng);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  const auto samples = few_samples(4, 7);

  ModelConfig zero = base_cfg;
  zero.reg_weight_override = 0.0;
  tc.reg_weight = 5.0;
  const MetaTrainResult r = meta_train(base, samples, tc, zero);
  bool logged_reg = false;
  for (const StepLog& s : r.log) {
    CHECK(s.total == s.ce);
    logged_reg = logged_reg || s.reg > 0;
  }
  CHECK(logged_reg);

  tc.reg_weight = 0.5;
  const MetaTrainResult w = meta_train(base, samples, tc, base_cfg);
  for (const StepLog& s : w.log) CHECK(s.total == doctest::Approx(s.ce + 0.5 * s.reg).epsilon(1e-12));
}

TEST_CASE("regularization alone pulls beta toward zero") {
  const ModelConfig c = micro();
  std::mt19937_64 rng(8);
  BaseWeights base = BaseWeights::init(c, rng);
  HypernetParams hyper = HypernetParams::init(c, rng);
  perturb(hyper, 10, 0.3);
  const auto samples = few_samples(4, 11);
  const TokenBatch batch = build_batch(samples, TemplateTable::defaults(), c);
  const auto conds = encode_batch_conditions(batch, base);
  TrainConfig tc;
  tc.weight_decay = 0.0;
  AdamW opt(hyper.trainables(), tc);
  double prev = std::numeric_limits<double>::infinity();
  double first = 0;
  for (int step = 0; step < 30; ++step) {
    Graph g;
    ModelVars vars = bind_model(g, base, false, &hyper, true);
    BatchLoss loss = batch_loss(g, vars, batch, conds, c, 1.0);
    Var reg_only = scale(loss.reg, 1.0);
    const double r = loss.reg.item();
    if (step == 0) first = r;
    CHECK(r <= prev + 1e-6);
    prev = r;
    opt.zero_grad();
    g.backward(reg_only);
    opt.step(1e-3);
  }
  CHECK(prev < first);
}

TEST_CASE("non-finite loss aborts and writes the recovery checkpoint") {
  const ModelConfig c = micro();
  std::mt19937_64 rng(12);
  BaseWeights base = BaseWeights::init(c, rng);
  base.output.matrix()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto path = std::filesystem::temp_directory_path() / "megan_recovery.mgan";
  std::filesystem::remove(path);
  MetaTrainOptions opts;
  opts.recovery_checkpoint = path;
  TrainConfig tc;
  tc.batch_size = 4;
  CHECK_THROWS_AS(meta_train(base, few_samples(2, 1), tc, c, opts), DivergenceError);
  CHECK(std::filesystem::exists(path));
  CHECK(load_checkpoint(path).hyper.has_value());
}

TEST_CASE("pretraining is deterministic and lowers the loss") {
  ModelConfig c = micro();
  std::vector<std::vector<int>> corpus;
  for (int i = 0; i < 16; ++i) corpus.push_back({kBos, 'a', 'b', 'c', 'a', 'b', 'c', kEos});
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 8;
  tc.learning_rate = 1e-2;
  const double initial = [&] {
    std::mt19937_64 rng(tc.seed);
    return corpus_loss(BaseWeights::init(c, rng), corpus, c);
  }();
  const PretrainResult a = pretrain_base(corpus, c, tc);
  const PretrainResult b = pretrain_base(corpus, c, tc);
  CHECK(a.base.sha256() == b.base.sha256());
  CHECK(a.log.size() == 80);
  CHECK(corpus_loss(a.base, corpus, c) < 0.5 * initial);
  for (auto& [_, t] : a.base.named()) CHECK_FALSE(t->requires_grad());

  std::vector<std::vector<std::uint8_t>> masks(corpus.size(), std::vector<std::uint8_t>(8, 0));
  CHECK_THROWS_AS(pretrain_base(corpus, c, tc, {}, std::span(masks).first(3)), ValueError);
  const std::vector<std::vector<int>> too_short{{kBos}};
  CHECK_THROWS_AS(pretrain_base(too_short, c, tc), ValueError);
}

TEST_CASE("target packing shifts by one position") {
  const std::vector<std::vector<int>> rows{{1, 2, 3, 0}, {4, 5, 6, 7}};
  const std::vector<std::vector<std::uint8_t>> masks{{0, 0, 1, 0}, {0, 1, 1, 1}};
  const std::vector<std::size_t> lengths{3, 4};
  const PackedTargets p = pack_targets(rows, masks, lengths);
  CHECK(p.targets == std::vector<int>{2, 3, 0, 5, 6, 7, 0});
  CHECK(p.mask == std::vector<std::uint8_t>{0, 1, 0, 1, 1, 1, 0});
}
