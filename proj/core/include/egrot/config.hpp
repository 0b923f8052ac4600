#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egrot/dataset.hpp"
#include "egrot/model.hpp"

namespace egrot {

enum class Precision { kF32, kF64 };
std::string to_string(Precision p);
Precision parse_precision(const std::string& name);

struct DataConfig {
  std::size_t n_objects = 200;
  int crop = 32;
  std::size_t n_ref_pool = 96;
  std::size_t n_query_pool = 16;
  std::uint64_t seed = 1;
  std::string background = "black";

  EpisodeSpec episode_spec() const;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct TrainConfig {
  std::size_t objects_per_batch = 10;
  std::size_t n_ref = 64;
  std::size_t n_query = 30;
  std::size_t steps = 2000;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 7;
  bool augment = true;
  Precision precision = Precision::kF32;
  std::size_t checkpoint_every = 500;  // 0 disables intermediate checkpoints
  // Encoder parameters stop updating once this many steps are done; -1 never.
  // 0 keeps the random-init encoder fixed and lets training reuse cached latents.
  long long freeze_encoder_after = 0;
  std::size_t val_every = 250;  // 0 disables validation
  std::size_t val_k = 16;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EvalConfig {
  std::vector<std::size_t> k{8, 16, 32, 64};
  std::vector<double> thresholds{5, 10, 15, 30};
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct RunConfig {
  DataConfig data;
  model::ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  // Throws ConfigError naming the offending field.
  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
// Missing sections and keys take defaults; unknown keys throw ConfigError.
void from_json(const nlohmann::json& j, RunConfig& c);

// Parses and validates. Syntax errors are reported with line and column.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Lowercase hex SHA-256 of the compact, key-sorted serialization.
std::string sha256_hex(const std::string& bytes);
std::string canonical_json(const nlohmann::json& j);
std::string config_hash(const nlohmann::json& j);
std::string config_hash(const RunConfig& c);
// Hash stamped into dataset manifests; depends on the data section only.
std::string data_hash(const DataConfig& c);

}  // namespace egrot
