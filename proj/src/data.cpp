#include "megan/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>

#include "json.hpp"
#include "megan/log.hpp"

namespace megan {

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(int(static_cast<unsigned char>(c)));
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string s;
  s.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < 256) {
      s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else {
      log::warn("detokenize: skipping non-byte id {}", id);
    }
  }
  return s;
}

std::vector<ConditionSample> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::vector<ConditionSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValueError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValueError(where + ": expected a JSON object");
    for (const char* key : {"x", "y", "z", "condition_type"})
      if (!j.contains(key) || !j[key].is_string())
        throw ValueError(where + ": missing field " + key);
    ConditionSample s;
    s.x = j["x"].get<std::string>();
    s.y = j["y"].get<std::string>();
    s.z = j["z"].get<std::string>();
    try {
      s.condition_type = parse_condition_type(j["condition_type"].get<std::string>());
    } catch (const ValueError& e) {
      throw ValueError(where + ": " + e.what());
    }
    if (s.x.empty()) throw ValueError(where + ": field x is empty");
    if (s.y.empty()) throw ValueError(where + ": field y is empty");
    if (s.z.empty()) throw ValueError(where + ": field z is empty");
    out.push_back(std::move(s));
  }
  if (out.empty()) log::warn("dataset {} contains no samples", path.string());
  return out;
}

void save_jsonl(const std::filesystem::path& path, std::span<const ConditionSample> samples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset " + path.string());
  for (const auto& s : samples) {
    nlohmann::json j{{"x", s.x}, {"y", s.y}, {"z", s.z},
                     {"condition_type", std::string(to_string(s.condition_type))}};
    out << j.dump() << '\n';
  }
}

std::vector<int> prompt_tokens(std::string_view condition_text, std::string_view x) {
  std::vector<int> ids{kBos};
  for (int t : tokenize(condition_text)) ids.push_back(t);
  for (int t : tokenize(x)) ids.push_back(t);
  ids.push_back(kSep);
  return ids;
}

TokenBatch build_batch(std::span<const ConditionSample> samples, const TemplateTable& templates,
                       const ModelConfig& config, std::mt19937_64* template_rng) {
  TokenBatch b;
  std::size_t width = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ConditionSample& s = samples[i];
    EncodeOptions opts;
    opts.raw = config.disable_prompt_template;
    if (template_rng && !opts.raw) {
      const std::size_t n = templates.templates(s.condition_type).size();
      opts.template_index = std::uniform_int_distribution<std::size_t>(0, n - 1)(*template_rng);
    }
    std::string cond = render_condition(s.z, s.condition_type, templates, opts);
    std::vector<int> row = prompt_tokens(cond, s.x);
    const std::size_t prefix = row.size();
    std::vector<std::uint8_t> mask(prefix, 0);
    for (int t : tokenize(s.y)) {
      row.push_back(t);
      mask.push_back(1);
    }
    row.push_back(kEos);
    mask.push_back(1);
    if (row.size() > std::size_t(config.max_context))
      throw ValueError("build_batch: sample " + std::to_string(i) + " (x=\"" + s.x + "\") needs " +
                       std::to_string(row.size()) + " tokens, context is " +
                       std::to_string(config.max_context));
    width = std::max(width, row.size());
    b.lengths.push_back(row.size());
    b.prefix_lengths.push_back(prefix);
    b.condition_texts.push_back(std::move(cond));
    b.token_ids.push_back(std::move(row));
    b.loss_mask.push_back(std::move(mask));
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    b.token_ids[i].resize(width, kPad);
    b.loss_mask[i].resize(width, 0);
  }
  return b;
}

namespace {

constexpr std::array<std::string_view, 5> kMetaConditions{"uppercase", "reverse", "duplicate",
                                                          "identity", "rot13"};

std::string random_word(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(3, 8), letter(0, 25);
  std::string s(std::size_t(len(rng)), 'a');
  for (char& c : s) c = char('a' + letter(rng));
  return s;
}

// Independent stream per purpose so the suite, held-out sets and corpus never share draws.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(purpose)};
  return std::mt19937_64(seq);
}

}  // namespace

std::span<const std::string_view> synth_meta_conditions() { return kMetaConditions; }

std::string apply_transform(std::string_view task, std::string_view x) {
  std::string s(x);
  if (task == "uppercase") {
    for (char& c : s) c = char(std::toupper(static_cast<unsigned char>(c)));
  } else if (task == "reverse") {
    std::reverse(s.begin(), s.end());
  } else if (task == "duplicate") {
    s += x;
  } else if (task == "identity") {
  } else if (task == "rot13") {
    for (char& c : s) {
      if (c >= 'a' && c <= 'z') c = char('a' + (c - 'a' + 13) % 26);
      else if (c >= 'A' && c <= 'Z') c = char('A' + (c - 'A' + 13) % 26);
    }
  } else if (task == "swapcase") {
    for (char& c : s) {
      const auto u = static_cast<unsigned char>(c);
      c = std::islower(u) ? char(std::toupper(u)) : char(std::tolower(u));
    }
  } else {
    throw ValueError("unknown synthetic task '" + std::string(task) + "'");
  }
  return s;
}

std::vector<ConditionSample> synth_samples(std::string_view task, std::size_t count,
                                           std::mt19937_64& rng) {
  std::vector<ConditionSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::string x = random_word(rng);
    std::string y = apply_transform(task, x);
    out.push_back({std::move(x), std::move(y), std::string(task), ConditionType::synthetic});
  }
  return out;
}

std::vector<ConditionSample> TaskSplit::meta_train_samples() const {
  std::vector<ConditionSample> all;
  for (const Task& t : meta_train) all.insert(all.end(), t.samples.begin(), t.samples.end());
  return all;
}

TaskSplit synth_task_suite(std::uint64_t seed, const SynthOptions& options) {
  std::mt19937_64 rng = stream(seed, 1);
  TaskSplit split;
  for (std::string_view name : kMetaConditions) {
    const std::size_t n = name == kLowResourceTask ? options.low_resource_cap : options.samples_per_task;
    split.meta_train.push_back({std::string(name), synth_samples(name, n, rng)});
  }
  split.targets.push_back({{std::string(kLowResourceTask),
                            synth_samples(kLowResourceTask, options.target_samples, rng)},
                           TargetSetting::low_resource});
  split.targets.push_back({{std::string(kUnseenTask), synth_samples(kUnseenTask, options.target_samples, rng)},
                           TargetSetting::unseen});
  return split;
}

std::vector<ConditionSample> synth_heldout(std::uint64_t seed, std::span<const std::string_view> tasks,
                                           std::size_t per_task) {
  std::mt19937_64 rng = stream(seed, 2);
  std::vector<ConditionSample> out;
  for (std::string_view t : tasks) {
    auto s = synth_samples(t, per_task, rng);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

std::vector<ConditionSample> synth_base_corpus(std::uint64_t seed, std::size_t count) {
  std::mt19937_64 rng = stream(seed, 3);
  std::uniform_int_distribution<std::size_t> pick(0, kMetaConditions.size() - 1);
  std::vector<ConditionSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string_view task = kMetaConditions[pick(rng)];
    std::string x = random_word(rng);
    std::string y = apply_transform(task, x);
    out.push_back({std::move(x), std::move(y), std::string(kMetaConditions[pick(rng)]),
                   ConditionType::synthetic});
  }
  return out;
}

}  // namespace megan
