#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "egrot/dataset.hpp"
#include "egrot/error.hpp"

using namespace egrot;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("egrot_test_dataset_" + name);
}

EpisodeSpec small_spec() {
  EpisodeSpec s;
  s.n_ref_pool = 6;
  s.n_query_pool = 3;
  s.crop = 16;
  s.background = synth::BackgroundPolicy::kNoise;
  return s;
}

}  // namespace

TEST_CASE("single-object dataset round-trips exactly") {
  const auto path = temp_path("roundtrip.egrd");
  const auto ds = generate_dataset(1, small_spec(), 77, {{"config_hash", "abc"}});
  write_dataset(ds, path.string());
  const auto back = load_dataset(path.string());
  REQUIRE(back.objects.size() == 1);
  CHECK(back.manifest == ds.manifest);
  CHECK(back.objects[0].object == ds.objects[0].object);
  CHECK(back.objects[0].ref_pool == ds.objects[0].ref_pool);
  CHECK(back.objects[0].query_pool == ds.objects[0].query_pool);
  CHECK(back.crop() == 16);
  CHECK(back.config_hash() == "abc");
  fs::remove(path);
}

TEST_CASE("same seed and config give byte-identical files") {
  CHECK(encode_dataset(generate_dataset(3, small_spec(), 5)) == encode_dataset(generate_dataset(3, small_spec(), 5)));
  CHECK(encode_dataset(generate_dataset(3, small_spec(), 5)) != encode_dataset(generate_dataset(3, small_spec(), 6)));
}

TEST_CASE("config hash mismatch warns but loads") {
  const auto path = temp_path("hash.egrd");
  build_dataset(1, small_spec(), 1, path.string(), {{"config_hash", "aaaa"}});
  std::string warning;
  const auto ds = load_dataset(path.string(), std::string("bbbb"), [&](const std::string& w) { warning = w; });
  CHECK(ds.objects.size() == 1);
  CHECK(warning.find("aaaa") != std::string::npos);

  warning.clear();
  load_dataset(path.string(), std::string("aaaa"), [&](const std::string& w) { warning = w; });
  CHECK(warning.empty());
  fs::remove(path);
}

TEST_CASE("I/O and format errors") {
  CHECK_THROWS_AS(load_dataset(temp_path("missing.egrd").string()), IoFailure);
  CHECK_THROWS_AS(build_dataset(1, small_spec(), 1, "/nonexistent-dir/x.egrd"), IoFailure);

  const auto path = temp_path("bad.egrd");
  const auto bytes = encode_dataset(generate_dataset(1, small_spec(), 2));
  {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_dataset(path.string()), FormatError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(load_dataset(path.string()), FormatError);
  fs::remove(path);
}
