// megan: pretrain a base model, meta-train the condition hypernetwork, evaluate, analyze beta.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "megan/analysis.hpp"
#include "megan/checkpoint.hpp"
#include "megan/data.hpp"
#include "megan/evaluation.hpp"
#include "megan/hash.hpp"
#include "megan/log.hpp"
#include "megan/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace megan;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  Sha256 h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), std::streamsize(buf.size()));
    h.update({reinterpret_cast<const unsigned char*>(buf.data()), std::size_t(in.gcount())});
  }
  return to_hex(h.finish());
}

// Options shared by the training commands.
struct ModelFlags {
  ModelConfig config;
  void add(CLI::App* app) {
    app->add_option("--layers", config.layers, "transformer layers (L)");
    app->add_option("--hidden", config.hidden, "hidden size (D)");
    app->add_option("--intermediate", config.intermediate, "FFN intermediate size (C)");
    app->add_option("--reduced", config.reduced, "hypernetwork reduced size (R)");
    app->add_option("--heads", config.heads, "attention heads");
    app->add_option("--max-context", config.max_context, "context length in tokens");
  }
};

struct TrainFlags {
  TrainConfig config;
  void add(CLI::App* app) {
    app->add_option("--seed", config.seed, "seed for initialization and shuffling");
    app->add_option("--epochs", config.epochs);
    app->add_option("--batch-size", config.batch_size);
    app->add_option("--lr", config.learning_rate, "peak learning rate");
    app->add_option("--weight-decay", config.weight_decay);
    app->add_option("--grad-clip", config.grad_clip);
  }
};

/// Writes one JSON line per training step after a header line with the resolved run config.
class RunLog {
 public:
  RunLog(const std::optional<fs::path>& path, const json& header) {
    if (!path) return;
    out_.open(*path);
    if (!out_) throw IoError("cannot write log " + path->string());
    out_ << json{{"run_config", header}}.dump() << '\n';
  }
  void operator()(const StepLog& s) {
    if (out_.is_open()) out_ << s.to_json().dump() << '\n';
    if (s.step % 50 == 0)
      log::info("step {} ce {:.4f} reg {:.4f} lr {:.2e}", s.step, s.ce, s.reg, s.lr);
  }

 private:
  std::ofstream out_;
};

struct CorpusSequences {
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<std::uint8_t>> target_masks;  // y tokens and EOS
};

// Templates are drawn per row, as in meta-training, so the base sees every prompt layout.
CorpusSequences corpus_sequences(std::span<const ConditionSample> samples, const ModelConfig& config,
                                 std::uint64_t seed) {
  std::mt19937_64 template_rng(seed);
  const TokenBatch batch = build_batch(samples, TemplateTable::defaults(), config, &template_rng);
  CorpusSequences out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto n = std::ptrdiff_t(batch.lengths[i]);
    out.tokens.emplace_back(batch.token_ids[i].begin(), batch.token_ids[i].begin() + n);
    out.target_masks.emplace_back(batch.loss_mask[i].begin(), batch.loss_mask[i].begin() + n);
  }
  return out;
}

void require_path(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

// ---------------------------------------------------------------------------

struct PretrainCommand {
  ModelFlags model;
  TrainFlags train;
  std::string corpus, out, log_path;
  bool target_only = false;

  void add(CLI::App* app) {
    model.add(app);
    train.add(app);
    app->add_flag("--target-only-loss", target_only, "score only y and the closing EOS, not the prompt and x");
    app->add_option("--corpus", corpus, "JSONL corpus of x/y/z samples");
    app->add_option("--out", out, "checkpoint to write");
    app->add_option("--log", log_path, "JSONL training log");
  }

  int run() {
    require_path(corpus, "--corpus");
    require_path(out, "--out");
    model.config.validate();
    train.config.validate();
    const auto samples = load_jsonl(corpus);
    const json header{{"command", "pretrain"},
                      {"model", model.config.to_json()},
                      {"train", train.config.to_json()},
                      {"target_only_loss", target_only},
                      {"inputs", {{"corpus", {{"path", corpus}, {"sha256", file_sha256(corpus)}}}}}};
    RunLog logger(log_path.empty() ? std::nullopt : std::optional<fs::path>(log_path), header);
    const CorpusSequences seqs = corpus_sequences(samples, model.config, train.config.seed);
    PretrainResult r = pretrain_base(seqs.tokens, model.config, train.config, std::ref(logger),
                                     target_only ? std::span(seqs.target_masks)
                                                 : std::span<const std::vector<std::uint8_t>>{});
    save_checkpoint(out, r.base, nullptr, model.config, header);
    log::info("base weights sha256 {}", r.base.sha256());
    return 0;
  }
};

struct MetatrainCommand {
  ModelFlags model;
  TrainFlags train;
  std::string base, data, out, log_path, templates;
  std::optional<std::uint64_t> synth_seed;
  double reg_weight = 0.001;
  bool no_prompt = false, no_layer_emb = false;
  CLI::App* app = nullptr;

  void add(CLI::App* a) {
    app = a;
    model.add(a);
    train.add(a);
    a->add_option("--base", base, "pretrained base checkpoint");
    a->add_option("--data", data, "JSONL meta-training samples");
    a->add_option("--synth-seed", synth_seed, "generate the synthetic task suite instead of --data");
    a->add_option("--out", out, "checkpoint to write (base + hypernetwork)");
    a->add_option("--log", log_path, "JSONL training log");
    a->add_option("--templates", templates, "JSON condition template table");
    a->add_option("--reg-weight", reg_weight, "weight f of the beta regularizer");
    a->add_flag("--no-prompt", no_prompt, "embed raw z without a template");
    a->add_flag("--no-layer-emb", no_layer_emb, "drop the layer embedding from the hypernetwork");
  }

  int run() {
    require_path(base, "--base");
    require_path(out, "--out");
    if (data.empty() == !synth_seed) throw UsageError("exactly one of --data or --synth-seed is required");
    if (reg_weight < 0) throw UsageError("--reg-weight must be nonnegative");

    Checkpoint ck = load_checkpoint(base);
    for (const char* flag : {"--layers", "--hidden", "--intermediate", "--reduced", "--heads", "--max-context"})
      if (app->count(flag) > 0 && !model.config.same_architecture(ck.config))
        throw ValueError(std::string("base checkpoint architecture differs from the configured ") + flag);
    ModelConfig config = ck.config;
    config.disable_prompt_template = no_prompt;
    config.disable_layer_embedding = no_layer_emb;
    config.reg_weight_override = reg_weight;
    train.config.reg_weight = reg_weight;
    train.config.validate();

    const TemplateTable table = templates.empty() ? TemplateTable::defaults() : TemplateTable::load(templates);
    std::vector<ConditionSample> samples;
    json inputs{{"base", {{"path", base}, {"sha256", file_sha256(base)}}}};
    if (synth_seed) {
      samples = synth_task_suite(*synth_seed).meta_train_samples();
      inputs["synth_seed"] = *synth_seed;
    } else {
      samples = load_jsonl(data);
      inputs["data"] = {{"path", data}, {"sha256", file_sha256(data)}};
    }
    if (!templates.empty()) inputs["templates"] = {{"path", templates}, {"sha256", file_sha256(templates)}};

    const json header{{"command", "metatrain"},
                      {"model", config.to_json()},
                      {"train", train.config.to_json()},
                      {"inputs", inputs}};
    RunLog logger(log_path.empty() ? std::nullopt : std::optional<fs::path>(log_path), header);
    const std::string before = ck.base.sha256();
    MetaTrainOptions options{&table, std::ref(logger), fs::path(out + ".recovery")};
    MetaTrainResult r = meta_train(ck.base, samples, train.config, config, options);
    if (ck.base.sha256() != before) throw Error("base weights changed during meta-training");
    save_checkpoint(out, ck.base, &r.hyper, config, header);
    Sha256 theta;
    for (const auto& [name, t] : r.hyper.named()) {
      const auto d = t->data();
      theta.update({reinterpret_cast<const unsigned char*>(d.data()), d.size_bytes()});
    }
    log::info("hypernetwork sha256 {}", to_hex(theta.finish()));
    return 0;
  }
};

struct EvalCommand {
  std::string checkpoint, data, report, templates, predictions;
  int max_new = 32;
  bool frozen_base = false;

  void add(CLI::App* a) {
    a->add_option("--checkpoint", checkpoint);
    a->add_option("--data", data, "JSONL evaluation samples");
    a->add_option("--report", report, "JSON report to write");
    a->add_option("--templates", templates, "JSON condition template table");
    a->add_option("--max-new", max_new, "generation budget per sample");
    a->add_option("--predictions", predictions, "optional JSONL of predictions");
    a->add_flag("--frozen-base", frozen_base, "keep beta at 0 (prompt still in context)");
  }

  int run() {
    require_path(checkpoint, "--checkpoint");
    require_path(data, "--data");
    require_path(report, "--report");
    Checkpoint ck = load_checkpoint(checkpoint);
    const auto samples = load_jsonl(data);
    const TemplateTable table = templates.empty() ? TemplateTable::defaults() : TemplateTable::load(templates);
    const HypernetParams* hyper = frozen_base || !ck.hyper ? nullptr : &*ck.hyper;
    EvalReport r = evaluate(ck.base, hyper, ck.config, table, samples, max_new);
    json j = r.to_json();
    j["inputs"] = {{"checkpoint", {{"path", checkpoint}, {"sha256", file_sha256(checkpoint)}}},
                   {"data", {{"path", data}, {"sha256", file_sha256(data)}}}};
    j["frozen_base"] = hyper == nullptr;
    std::ofstream out(report);
    if (!out) throw IoError("cannot write report " + report);
    out << j.dump(2) << '\n';
    if (!predictions.empty()) {
      std::ofstream p(predictions);
      for (std::size_t i = 0; i < samples.size(); ++i)
        p << json{{"z", samples[i].z}, {"x", samples[i].x}, {"y", samples[i].y}, {"prediction", r.predictions[i]}}
                    .dump(-1, ' ', false, json::error_handler_t::replace)
          << '\n';
    }
    log::info("accuracy {:.4f} exact_match {:.4f} over {} samples", r.aggregate.accuracy, r.aggregate.exact_match,
              r.aggregate.n_samples);
    return 0;
  }
};

struct AnalyzeCommand {
  std::string checkpoint, data, csv, templates, summary;
  bool full = false;

  void add(CLI::App* a) {
    a->add_option("--checkpoint", checkpoint);
    a->add_option("--data", data, "JSONL samples carrying conditions");
    a->add_option("--csv", csv, "CSV of per-layer beta to write");
    a->add_option("--templates", templates, "JSON condition template table");
    a->add_option("--summary", summary, "optional JSON with layer means and separability");
    a->add_flag("--full", full, "write every channel instead of the channel mean");
  }

  int run() {
    require_path(checkpoint, "--checkpoint");
    require_path(data, "--data");
    require_path(csv, "--csv");
    Checkpoint ck = load_checkpoint(checkpoint);
    if (!ck.hyper) throw ValueError("checkpoint " + checkpoint + " holds no hypernetwork");
    const auto samples = load_jsonl(data);
    const TemplateTable table = templates.empty() ? TemplateTable::defaults() : TemplateTable::load(templates);
    const auto profiles = extract_betas(ck.base, *ck.hyper, ck.config, table, samples);
    export_csv(profiles, csv, full);

    const LayerStats stats = layer_means(profiles);
    std::set<std::pair<ConditionType, std::string>> classes;
    for (const auto& p : profiles) classes.insert({p.condition_type, p.z});
    json s{{"layer_mean", stats.mean}, {"layer_std", stats.std}, {"n_profiles", profiles.size()},
           {"n_classes", classes.size()}};
    for (std::size_t l = 0; l < stats.mean.size(); ++l)
      std::cout << "layer " << l + 1 << " mean " << stats.mean[l] << " std " << stats.std[l] << '\n';
    if (classes.size() >= 2) {
      const double sep = condition_separability(profiles);
      const double chance = 1.0 / double(classes.size());
      s["separability"] = sep;
      s["chance"] = chance;
      std::cout << "separability " << sep << " (chance " << chance << ")\n";
    }
    if (!summary.empty()) {
      std::ofstream out(summary);
      if (!out) throw IoError("cannot write summary " + summary);
      out << s.dump(2) << '\n';
    }

    std::size_t outside = 0;
    for (const auto& p : profiles) outside += std::size_t((p.betas.array().abs() >= 1.0).count());
    if (outside > 0) {
      log::error("{} beta values lie outside (-1, 1)", outside);
      return 1;
    }
    return 0;
  }
};

struct SynthCommand {
  std::uint64_t seed = 0;
  std::string out_dir;
  std::size_t corpus_size = 8000, heldout_per_task = 100;

  void add(CLI::App* a) {
    a->add_option("--seed", seed, "suite seed");
    a->add_option("--out-dir", out_dir, "directory for the JSONL files");
    a->add_option("--corpus-size", corpus_size, "pretraining corpus rows");
    a->add_option("--heldout", heldout_per_task, "held-out samples per condition");
  }

  int run() {
    require_path(out_dir, "--out-dir");
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    const TaskSplit split = synth_task_suite(seed);
    save_jsonl(dir / "base_corpus.jsonl", synth_base_corpus(seed, corpus_size));
    save_jsonl(dir / "meta_train.jsonl", split.meta_train_samples());
    std::vector<std::string_view> seen;
    for (auto name : synth_meta_conditions())
      if (name != kLowResourceTask) seen.push_back(name);
    save_jsonl(dir / "heldout_meta.jsonl", synth_heldout(seed, seen, heldout_per_task));
    const std::string_view lr[] = {kLowResourceTask};
    save_jsonl(dir / "heldout_low_resource.jsonl", synth_heldout(seed, lr, heldout_per_task));
    const std::string_view us[] = {kUnseenTask};
    save_jsonl(dir / "heldout_unseen.jsonl", synth_heldout(seed, us, heldout_per_task));
    const auto all = synth_meta_conditions();
    save_jsonl(dir / "analysis.jsonl", synth_heldout(seed + 1, all, heldout_per_task));
    return 0;
  }
};

/// Turns `key = value` lines of the file named by --config into flags placed
/// before the command-line ones, so explicit flags take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& args, CLI::App& app) {
  std::vector<std::string> out;
  std::optional<std::string> config_path;
  std::size_t insert_at = 0;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file path");
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      out.push_back(args[i]);
    }
  }
  if (!config_path) return out;
  if (out.empty()) throw UsageError("--config must follow a subcommand");
  CLI::App* sub = app.get_subcommand_ptr(out.front()).get();
  insert_at = 1;

  std::ifstream in(*config_path);
  if (!in) throw UsageError("cannot read config file " + *config_path);
  std::vector<std::string> injected;
  for (const CLI::ConfigItem& item : CLI::ConfigINI().from_config(in)) {
    std::string key = item.name;
    std::replace(key.begin(), key.end(), '_', '-');
    const CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr) throw UsageError("config file " + *config_path + ": unknown key '" + item.name + "'");
    if (opt->get_type_size() == 0) {
      injected.push_back("--" + key + "=" + (item.inputs.empty() ? "true" : item.inputs.front()));
    } else {
      injected.push_back("--" + key);
      injected.insert(injected.end(), item.inputs.begin(), item.inputs.end());
    }
  }
  out.insert(out.begin() + std::ptrdiff_t(insert_at), injected.begin(), injected.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  log::init();
  CLI::App app{"Meta-gated language model toolkit"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  PretrainCommand pretrain;
  MetatrainCommand metatrain;
  EvalCommand eval;
  AnalyzeCommand analyze;
  SynthCommand synth;
  pretrain.add(app.add_subcommand("pretrain", "train the base model with beta fixed at 0"));
  metatrain.add(app.add_subcommand("metatrain", "train the hypernetwork on a frozen base"));
  eval.add(app.add_subcommand("eval", "greedy generation and metric report"));
  analyze.add(app.add_subcommand("analyze", "beta statistics, separability and CSV export"));
  synth.add(app.add_subcommand("synth", "write the synthetic task suite as JSONL"));
  for (CLI::App* sub : app.get_subcommands({}))
    sub->add_option("--config", "key = value file; flags override its entries");

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(args, app);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (app.got_subcommand("pretrain")) return pretrain.run();
    if (app.got_subcommand("metatrain")) return metatrain.run();
    if (app.got_subcommand("eval")) return eval.run();
    if (app.got_subcommand("analyze")) return analyze.run();
    if (app.got_subcommand("synth")) return synth.run();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    log::error("{}", e.what());
    return 1;
  }
  return 2;
}
