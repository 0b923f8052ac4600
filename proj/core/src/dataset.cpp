#include "egrot/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <exception>
#include <mutex>
#include <thread>

#include "egrot/binary_io.hpp"
#include "egrot/error.hpp"

namespace egrot {

namespace {

void write_view(io::ByteWriter& w, const synth::View& v) {
  for (double x : v.rotation.data()) w.f64(x);
  w.u32(static_cast<std::uint32_t>(v.image.width));
  w.u32(static_cast<std::uint32_t>(v.image.height));
  for (float p : v.image.pixels) w.u8(static_cast<std::uint8_t>(std::lround(p * 255.0f)));
}

synth::View read_view(io::ByteReader& r) {
  std::array<double, 9> m;
  for (double& x : m) x = r.f64();
  synth::View v;
  v.rotation = so3::RotationMatrix(m);
  if (!so3::is_rotation(v.rotation, 1e-6)) {
    throw FormatError("'" + r.origin() + "': stored rotation fails SO(3) check");
  }
  const std::uint32_t w = r.u32();
  const std::uint32_t h = r.u32();
  if (w == 0 || h == 0 || w > 4096 || h > 4096) {
    throw FormatError("'" + r.origin() + "': implausible image size " + std::to_string(w) + "x" +
                      std::to_string(h));
  }
  const std::size_t n = static_cast<std::size_t>(w) * h * 3;
  const std::uint8_t* px = r.view(n);
  v.image = synth::Image(static_cast<int>(w), static_cast<int>(h));
  for (std::size_t i = 0; i < n; ++i) v.image.pixels[i] = static_cast<float>(px[i]) / 255.0f;
  return v;
}

}  // namespace

std::string Dataset::config_hash() const { return manifest.value("config_hash", std::string()); }

int Dataset::crop() const { return manifest.value("crop", 0); }

Dataset generate_dataset(std::size_t n_objects, const EpisodeSpec& spec, std::uint64_t seed,
                         const nlohmann::json& manifest_extra, std::size_t threads) {
  Dataset ds;
  ds.objects.resize(n_objects);
  std::vector<std::uint64_t> object_seeds(n_objects);
  auto render_object = [&](std::size_t i) {
    object_seeds[i] = derive_seed({seed, i, 0});
    Rng view_rng(derive_seed({seed, i, 1}));
    DatasetObject& entry = ds.objects[i];
    entry.object = synth::generate_object(object_seeds[i]);
    synth::Episode ep = synth::make_episode(entry.object, spec.n_ref_pool, spec.n_query_pool, view_rng,
                                            spec.background, spec.crop);
    entry.ref_pool = std::move(ep.references);
    entry.query_pool = std::move(ep.queries);
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n_objects, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n_objects; ++i) render_object(i);
  } else {
    // Every object has its own seed stream, so the result does not depend on
    // the thread count.
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < n_objects;) {
          try {
            render_object(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }
  nlohmann::json seeds = object_seeds;
  ds.manifest = {{"format", "EGRD"},
                 {"version", kDatasetVersion},
                 {"seed", seed},
                 {"n_objects", n_objects},
                 {"n_ref_pool", spec.n_ref_pool},
                 {"n_query_pool", spec.n_query_pool},
                 {"crop", spec.crop},
                 {"background", synth::to_string(spec.background)},
                 {"object_seeds", seeds}};
  for (const auto& [key, value] : manifest_extra.items()) ds.manifest[key] = value;
  return ds;
}

void build_dataset(std::size_t n_objects, const EpisodeSpec& spec, std::uint64_t seed,
                   const std::string& path, const nlohmann::json& manifest_extra, std::size_t threads) {
  write_dataset(generate_dataset(n_objects, spec, seed, manifest_extra, threads), path);
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.bytes(kDatasetMagic, 4);
  w.u32(kDatasetVersion);
  w.str(ds.manifest.dump());
  w.u32(static_cast<std::uint32_t>(ds.objects.size()));
  for (const auto& entry : ds.objects) {
    w.u64(entry.object.seed);
    w.u64(entry.object.id);
    w.f64(entry.object.bounding_radius);
    w.u32(static_cast<std::uint32_t>(entry.object.triangles.size()));
    for (const auto& tri : entry.object.triangles) {
      for (const auto& v : tri.v) {
        for (double x : v) w.f64(x);
      }
      for (double c : tri.color) w.f64(c);
    }
    w.u32(static_cast<std::uint32_t>(entry.ref_pool.size()));
    w.u32(static_cast<std::uint32_t>(entry.query_pool.size()));
    for (const auto& v : entry.ref_pool) write_view(w, v);
    for (const auto& v : entry.query_pool) write_view(w, v);
  }
  return w.buffer();
}

void write_dataset(const Dataset& ds, const std::string& path) {
  io::ByteWriter w;
  const auto bytes = encode_dataset(ds);
  w.bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

Dataset load_dataset(const std::string& path, const std::optional<std::string>& expected_hash,
                     const WarningSink& warn) {
  io::ByteReader r = io::ByteReader::from_file(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
    throw FormatError("'" + path + "': not a dataset file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("'" + path + "': unsupported dataset version " + std::to_string(version));
  }
  Dataset ds;
  try {
    ds.manifest = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + path + "': manifest is not valid JSON: " + e.what());
  }
  if (expected_hash && ds.config_hash() != *expected_hash && warn) {
    warn("dataset '" + path + "' was generated with config hash " + ds.config_hash() +
         ", current config hash is " + *expected_hash);
  }
  const std::uint32_t n_objects = r.u32();
  for (std::uint32_t i = 0; i < n_objects; ++i) {
    DatasetObject entry;
    entry.object.seed = r.u64();
    entry.object.id = r.u64();
    entry.object.bounding_radius = r.f64();
    const std::uint32_t n_tri = r.u32();
    r.require(static_cast<std::uint64_t>(n_tri) * 12 * 8);
    entry.object.triangles.resize(n_tri);
    for (auto& tri : entry.object.triangles) {
      for (auto& v : tri.v) {
        for (double& x : v) x = r.f64();
      }
      for (double& c : tri.color) c = r.f64();
    }
    const std::uint32_t n_ref = r.u32();
    const std::uint32_t n_query = r.u32();
    // Each view needs at least its rotation and image header.
    r.require((static_cast<std::uint64_t>(n_ref) + n_query) * (9 * 8 + 8));
    entry.ref_pool.reserve(n_ref);
    entry.query_pool.reserve(n_query);
    for (std::uint32_t k = 0; k < n_ref; ++k) entry.ref_pool.push_back(read_view(r));
    for (std::uint32_t k = 0; k < n_query; ++k) entry.query_pool.push_back(read_view(r));
    ds.objects.push_back(std::move(entry));
  }
  if (!r.at_end()) throw FormatError("'" + path + "': trailing bytes after last object");
  return ds;
}

}  // namespace egrot
