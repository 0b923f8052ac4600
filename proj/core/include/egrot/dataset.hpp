#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egrot/synth.hpp"

namespace egrot {

inline constexpr char kDatasetMagic[4] = {'E', 'G', 'R', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

// One object together with its rendered view pools. References for evaluation
// are drawn from `ref_pool`; `query_pool` holds held-out queries.
struct DatasetObject {
  synth::ProceduralObject object;
  std::vector<synth::View> ref_pool;
  std::vector<synth::View> query_pool;
};

struct Dataset {
  nlohmann::json manifest;
  std::vector<DatasetObject> objects;

  std::string config_hash() const;
  int crop() const;
};

struct EpisodeSpec {
  std::size_t n_ref_pool = 64;
  std::size_t n_query_pool = 16;
  int crop = 32;
  synth::BackgroundPolicy background = synth::BackgroundPolicy::kBlack;
};

// Renders `n_objects` objects with per-object seeds derived from `seed`.
// `manifest_extra` is merged into the manifest (config hash, config echo).
// Objects may be rendered on up to `threads` workers; the result is the same.
Dataset generate_dataset(std::size_t n_objects, const EpisodeSpec& spec, std::uint64_t seed,
                         const nlohmann::json& manifest_extra = nlohmann::json::object(), std::size_t threads = 1);

// generate_dataset followed by write_dataset.
void build_dataset(std::size_t n_objects, const EpisodeSpec& spec, std::uint64_t seed,
                   const std::string& path,
                   const nlohmann::json& manifest_extra = nlohmann::json::object(), std::size_t threads = 1);

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
void write_dataset(const Dataset& ds, const std::string& path);

using WarningSink = std::function<void(const std::string&)>;

// Loads and validates a dataset file. When `expected_hash` is given and differs
// from the manifest's config hash, `warn` is called; the load still succeeds.
Dataset load_dataset(const std::string& path, const std::optional<std::string>& expected_hash = std::nullopt,
                     const WarningSink& warn = {});

}  // namespace egrot
