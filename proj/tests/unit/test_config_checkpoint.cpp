#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "doctest.h"
#include "egrot/checkpoint.hpp"
#include "egrot/config.hpp"
#include "egrot/error.hpp"

using namespace egrot;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("egrot_test_ckpt_" + name); }

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

RunConfig micro_config() {
  RunConfig c;
  c.data.crop = 8;
  c.model.crop = 8;
  c.model.d = 16;
  c.model.heads = 2;
  c.model.depth = 1;
  c.model.encoder_channels = {4, 8};
  c.model.rot_hidden = 8;
  c.model.head_hidden = 8;
  return c;
}

template <typename T>
Checkpoint trained_micro_checkpoint(const RunConfig& cfg) {
  model::Model<T> m(cfg.model, 3);
  ag::OptimizerState<T> opt;
  // Give every parameter a gradient so the optimizer holds moments for all.
  for (auto& p : m.params()) {
    auto g = p.tensor.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = T(0.01) * static_cast<T>(i % 7);
  }
  ag::adamw_step(m.params(), opt);
  return make_checkpoint(cfg, m, opt, 1);
}

}  // namespace

TEST_CASE("default config validates and survives a JSON round trip") {
  const RunConfig c;
  CHECK_NOTHROW(c.validate());
  const nlohmann::json j = c;
  CHECK(j.get<RunConfig>() == c);
  CHECK(parse_run_config("{}") == c);
}

TEST_CASE("unknown keys are rejected and named") {
  CHECK(error_of(R"({"bogus": 1})").find("bogus") != std::string::npos);
  CHECK(error_of(R"({"train": {"stpes": 10}})").find("stpes") != std::string::npos);
  CHECK(error_of(R"({"model": {"depht": 2}})").find("depht") != std::string::npos);
}

TEST_CASE("malformed JSON reports line and column") {
  const auto msg = error_of("{\n  \"train\": {\n    \"steps\": ,\n  }\n}");
  CHECK(msg.find("line 3") != std::string::npos);
  CHECK(msg.find("column") != std::string::npos);
}

TEST_CASE("type errors and range errors name the field") {
  CHECK(error_of(R"({"train": {"steps": "many"}})").find("train.steps") != std::string::npos);
  CHECK(error_of(R"({"train": {"n_ref": 0}})").find("n_ref") != std::string::npos);
  CHECK(error_of(R"({"train": {"lr": 0}})").find("train.lr") != std::string::npos);
  CHECK(error_of(R"({"model": {"crop": 64}})").find("model.crop") != std::string::npos);
  CHECK(error_of(R"({"train": {"precision": "f16"}})").find("f16") != std::string::npos);
}

TEST_CASE("sha256 matches published test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("config hash ignores key order and tracks values") {
  const auto a = parse_run_config(R"({"train": {"lr": 0.001, "seed": 3}, "data": {"seed": 4}})");
  const auto b = parse_run_config(R"({"data": {"seed": 4}, "train": {"seed": 3, "lr": 0.001}})");
  CHECK(config_hash(a) == config_hash(b));
  auto c = a;
  c.train.seed = 5;
  CHECK(config_hash(c) != config_hash(a));
  CHECK(config_hash(a).size() == 64);
}

TEST_CASE("data hash depends on the data section only") {
  RunConfig a, b;
  b.train.steps = 7;
  b.model.depth = 2;
  CHECK(data_hash(a.data) == data_hash(b.data));
  b.data.seed = 9;
  CHECK(data_hash(a.data) != data_hash(b.data));
}

TEST_CASE("checkpoint encode/decode round trip is exact") {
  const auto cfg = micro_config();
  const auto ckpt = trained_micro_checkpoint<double>(cfg);
  const auto bytes = encode_checkpoint(ckpt);
  const auto back = decode_checkpoint(bytes, "memory");
  CHECK(back == ckpt);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.precision == Precision::kF64);
  CHECK(config_from_checkpoint(back) == cfg);
}

TEST_CASE("save, load, save gives byte-identical files") {
  const auto cfg = micro_config();
  for (const auto& ckpt : {trained_micro_checkpoint<float>(cfg), trained_micro_checkpoint<double>(cfg)}) {
    const auto p1 = temp_path("a.egrt"), p2 = temp_path("b.egrt");
    save_checkpoint(ckpt, p1.string());
    save_checkpoint(load_checkpoint(p1.string()), p2.string());
    CHECK(read_bytes(p1) == read_bytes(p2));
    fs::remove(p1);
    fs::remove(p2);
  }
}

TEST_CASE("model and optimizer restore from a checkpoint") {
  const auto cfg = micro_config();
  model::Model<double> m(cfg.model, 3);
  ag::OptimizerState<double> opt;
  for (auto& p : m.params()) {
    auto g = p.tensor.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = 0.02 * static_cast<double>(i % 5) - 0.03;
  }
  ag::adamw_step(m.params(), opt);
  const auto ckpt = decode_checkpoint(encode_checkpoint(make_checkpoint(cfg, m, opt, 1)), "memory");

  const auto m2 = model_from_checkpoint<double>(ckpt);
  REQUIRE(m2.params().size() == m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(m2.params()[i].name == m.params()[i].name);
    const auto a = m.params()[i].tensor.data(), b = m2.params()[i].tensor.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  const auto opt2 = optimizer_from_checkpoint<double>(ckpt, opt.config);
  CHECK(opt2.step == opt.step);
  REQUIRE(opt2.moments.size() == opt.moments.size());
  for (const auto& [name, mom] : opt.moments) {
    CHECK(opt2.moments.at(name).first == mom.first);
    CHECK(opt2.moments.at(name).second == mom.second);
  }
}

TEST_CASE("corrupt checkpoints are rejected as incompatible") {
  const auto bytes = encode_checkpoint(trained_micro_checkpoint<float>(micro_config()));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic, "m"), IncompatibleCheckpoint);

  auto bad_version = bytes;
  bad_version[4] = 99;
  CHECK_THROWS_AS(decode_checkpoint(bad_version, "m"), IncompatibleCheckpoint);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(truncated, "m"), IncompatibleCheckpoint);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(trailing, "m"), IncompatibleCheckpoint);

  CHECK_THROWS_AS(decode_checkpoint({}, "m"), IncompatibleCheckpoint);
}

TEST_CASE("weights that do not fit the stored config are incompatible") {
  auto ckpt = trained_micro_checkpoint<double>(micro_config());
  ckpt.params.pop_back();
  CHECK_THROWS_AS(model_from_checkpoint<double>(ckpt), IncompatibleCheckpoint);
}

TEST_CASE("missing checkpoint file is an I/O failure") {
  CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.egrt").string()), IoFailure);
}
