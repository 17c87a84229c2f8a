#include "megan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "megan/hash.hpp"

namespace megan {

static_assert(std::endian::native == std::endian::little, "checkpoint buffers assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'G', 'A', 'N'};

using Bytes = std::vector<unsigned char>;

template <typename T>
void put(Bytes& out, T value) {
  const auto* p = reinterpret_cast<const unsigned char*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const Bytes& in, std::size_t at) {
  T value;
  std::memcpy(&value, in.data() + at, sizeof(T));
  return value;
}

template <typename Named>
nlohmann::json append_section(Bytes& section, const Named& tensors) {
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, tensor] : tensors) {
    const auto values = tensor->data();
    dir.push_back({{"name", name},
                   {"shape", {tensor->rows(), tensor->cols()}},
                   {"offset", section.size()},
                   {"count", values.size()}});
    const auto* p = reinterpret_cast<const unsigned char*>(values.data());
    section.insert(section.end(), p, p + values.size_bytes());
  }
  return dir;
}

template <typename Named>
void fill_section(const Bytes& section, const nlohmann::json& dir, Named tensors, const char* what) {
  if (dir.size() != tensors.size())
    throw FormatError(std::string(what) + " section lists " + std::to_string(dir.size()) +
                      " tensors, expected " + std::to_string(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = dir[i];
    auto& [name, tensor] = tensors[i];
    if (entry.at("name").get<std::string>() != name)
      throw FormatError("checkpoint tensor " + std::to_string(i) + " is " +
                        entry.at("name").get<std::string>() + ", expected " + name);
    const Index rows = entry.at("shape").at(0).get<Index>();
    const Index cols = entry.at("shape").at(1).get<Index>();
    if (rows != tensor->rows() || cols != tensor->cols())
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_string(rows, cols) +
                        ", config implies " + shape_string(tensor->rows(), tensor->cols()));
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto bytes = std::size_t(rows * cols) * sizeof(double);
    if (offset + bytes > section.size()) throw TruncatedError("checkpoint tensor " + name + " overruns its section");
    std::memcpy(tensor->data().data(), section.data() + offset, bytes);
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const BaseWeights& base,
                     const HypernetParams* hyper, const ModelConfig& config,
                     const nlohmann::json& meta) {
  Bytes base_bytes, hyper_bytes;
  nlohmann::json header{{"config", config.to_json()}, {"meta", meta}};
  header["base"] = append_section(base_bytes, base.named());
  header["has_hyper"] = hyper != nullptr;
  header["hyper"] = hyper ? append_section(hyper_bytes, hyper->named()) : nlohmann::json::array();
  if (hyper) header["use_layer_embedding"] = hyper->use_layer_embedding;
  header["base_bytes"] = base_bytes.size();
  header["hyper_bytes"] = hyper_bytes.size();
  const std::string text = header.dump();
  const Bytes header_bytes(text.begin(), text.end());

  Bytes out(kMagic, kMagic + 4);
  put(out, kCheckpointVersion);
  put(out, std::uint64_t(header_bytes.size()));
  const Bytes* sections[] = {&header_bytes, &base_bytes, &hyper_bytes};
  for (const Bytes* section : sections) out.insert(out.end(), section->begin(), section->end());
  for (const Bytes* section : sections) {
    const Digest d = sha256(*section);
    out.insert(out.end(), d.begin(), d.end());
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
  if (!f) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const Bytes in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string();

  constexpr std::size_t kPreamble = 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, std::min<std::size_t>(4, in.size())) != 0)
    throw FormatError(where + ": not a checkpoint (bad magic)");
  if (in.size() < kPreamble) throw TruncatedError(where + ": truncated preamble");
  const auto version = get<std::uint32_t>(in, 4);
  if (version != kCheckpointVersion)
    throw VersionError(where + ": format version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kCheckpointVersion));
  const auto header_len = get<std::uint64_t>(in, 8);
  if (header_len > in.size() - kPreamble) throw TruncatedError(where + ": truncated header");

  const Bytes header_bytes(in.begin() + kPreamble, in.begin() + std::ptrdiff_t(kPreamble + header_len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const nlohmann::json::exception&) {
    // A damaged header is reported through its digest when the trailer is intact.
    if (in.size() >= kPreamble + header_len + 3 * 32) {
      const std::size_t trailer = in.size() - 3 * 32;
      if (!std::equal(in.begin() + std::ptrdiff_t(trailer), in.begin() + std::ptrdiff_t(trailer + 32),
                      sha256(header_bytes).begin()))
        throw ChecksumError(where + ": header digest mismatch");
    }
    throw FormatError(where + ": header is not valid JSON");
  }

  const auto base_len = header.value("base_bytes", std::size_t{0});
  const auto hyper_len = header.value("hyper_bytes", std::size_t{0});
  const std::size_t expected = kPreamble + header_len + base_len + hyper_len + 3 * 32;
  if (in.size() < expected)
    throw TruncatedError(where + ": " + std::to_string(in.size()) + " bytes, expected " + std::to_string(expected));
  if (in.size() > expected) throw FormatError(where + ": trailing bytes after digests");

  std::size_t at = kPreamble + header_len;
  const Bytes base_bytes(in.begin() + std::ptrdiff_t(at), in.begin() + std::ptrdiff_t(at + base_len));
  at += base_len;
  const Bytes hyper_bytes(in.begin() + std::ptrdiff_t(at), in.begin() + std::ptrdiff_t(at + hyper_len));
  at += hyper_len;
  const char* names[] = {"header", "base", "hyper"};
  const Bytes* sections[] = {&header_bytes, &base_bytes, &hyper_bytes};
  for (int s = 0; s < 3; ++s, at += 32) {
    const Digest d = sha256(*sections[s]);
    if (!std::equal(d.begin(), d.end(), in.begin() + std::ptrdiff_t(at)))
      throw ChecksumError(where + ": " + names[s] + " section digest mismatch");
  }

  Checkpoint ck;
  ck.config = ModelConfig::from_json(header.at("config"));
  ck.config.validate();
  ck.meta = header.value("meta", nlohmann::json::object());
  std::mt19937_64 unused(0);
  ck.base = BaseWeights::init(ck.config, unused);
  fill_section(base_bytes, header.at("base"), ck.base.named(), "base");
  if (header.value("has_hyper", false)) {
    HypernetParams h = HypernetParams::init(ck.config, unused);
    h.use_layer_embedding = header.value("use_layer_embedding", true);
    fill_section(hyper_bytes, header.at("hyper"), h.named(), "hyper");
    ck.hyper = std::move(h);
  }
  ck.base.set_trainable(false);
  return ck;
}

}  // namespace megan
