#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "megan/checkpoint.hpp"

using namespace megan;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.intermediate = 16;
  c.reduced = 4;
  c.heads = 2;
  c.max_context = 16;
  return c;
}

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("megan_ck_" + name); }

std::vector<char> read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

struct Fixture {
  ModelConfig config = tiny();
  BaseWeights base;
  HypernetParams hyper;
  fs::path path = temp_path("roundtrip.mgan");

  Fixture() {
    std::mt19937_64 rng(7);
    base = BaseWeights::init(config, rng);
    hyper = HypernetParams::init(config, rng);
    std::normal_distribution<double> n(0, 1);
    for (double& v : hyper.w_out.data()) v = n(rng);
    save_checkpoint(path, base, &hyper, config, {{"note", "test"}});
  }
};

}  // namespace

TEST_CASE("checkpoint round trip is bitwise exact") {
  Fixture f;
  const Checkpoint ck = load_checkpoint(f.path);
  CHECK(ck.config.to_json() == f.config.to_json());
  CHECK(ck.meta["note"] == "test");
  const auto want = f.base.named();
  const auto got = ck.base.named();
  REQUIRE(want.size() == got.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(got[i].first == want[i].first);
    const auto a = want[i].second->data();
    const auto b = got[i].second->data();
    CHECK(std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
  }
  REQUIRE(ck.hyper.has_value());
  const auto hw = f.hyper.named();
  const auto hg = ck.hyper->named();
  for (std::size_t i = 0; i < hw.size(); ++i) {
    const auto a = hw[i].second->data();
    const auto b = hg[i].second->data();
    CHECK(std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
  }
  CHECK(ck.base.sha256() == f.base.sha256());
}

TEST_CASE("base-only checkpoints load without a hypernetwork") {
  Fixture f;
  const fs::path p = temp_path("base_only.mgan");
  save_checkpoint(p, f.base, nullptr, f.config);
  CHECK_FALSE(load_checkpoint(p).hyper.has_value());
}

TEST_CASE("a flipped byte in the weights is a checksum error") {
  Fixture f;
  auto bytes = read_all(f.path);
  bytes[bytes.size() - 3 * 32 - 100] ^= 0x01;
  const fs::path p = temp_path("corrupt.mgan");
  write_all(p, bytes);
  CHECK_THROWS_AS(load_checkpoint(p), ChecksumError);
}

TEST_CASE("a future version is a version error") {
  Fixture f;
  auto bytes = read_all(f.path);
  bytes[4] = char(kCheckpointVersion + 1);
  const fs::path p = temp_path("future.mgan");
  write_all(p, bytes);
  CHECK_THROWS_AS(load_checkpoint(p), VersionError);
}

TEST_CASE("a cut-off file is a truncation error") {
  Fixture f;
  auto bytes = read_all(f.path);
  for (std::size_t keep : {std::size_t(10), bytes.size() / 2, bytes.size() - 1}) {
    CAPTURE(keep);
    const fs::path p = temp_path("truncated.mgan");
    write_all(p, std::vector<char>(bytes.begin(), bytes.begin() + std::ptrdiff_t(keep)));
    CHECK_THROWS_AS(load_checkpoint(p), TruncatedError);
  }
}

TEST_CASE("checkpoint errors are distinct types") {
  Fixture f;
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.mgan")), IoError);
  const fs::path p = temp_path("garbage.mgan");
  write_all(p, std::vector<char>(64, 'x'));
  CHECK_THROWS_AS(load_checkpoint(p), FormatError);
}
