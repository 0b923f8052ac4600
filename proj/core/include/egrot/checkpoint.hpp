#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egrot/config.hpp"
#include "egrot/model.hpp"
#include "egrot/optim.hpp"

namespace egrot {

inline constexpr char kCheckpointMagic[4] = {'E', 'G', 'R', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  ag::Shape shape;
  std::vector<double> values;  // widened; written at the checkpoint precision
  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

// File layout, little-endian throughout:
//   "EGRT" | u32 version | str config_hash | str config_json | u32 precision (4 or 8 bytes per value)
//   | u64 train step | u64 optimizer step | u32 n_params | records | u32 n_moments | records
// where a record is u32 name length, name bytes, u32 rank, rank x u64 extents, values,
// and a str is a u64 length followed by bytes. Moment records are named
// "m/<param>" and "v/<param>".
struct Checkpoint {
  std::string config_hash;
  nlohmann::json config;
  Precision precision = Precision::kF32;
  std::uint64_t step = 0;
  std::uint64_t optimizer_step = 0;
  std::vector<TensorRecord> params;
  std::vector<TensorRecord> moments;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& origin);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// Throws IoFailure, or IncompatibleCheckpoint for bad magic, version, or layout.
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
Checkpoint make_checkpoint(const RunConfig& config, const model::Model<T>& model,
                           const ag::OptimizerState<T>& opt, std::uint64_t step);

// Rebuilds the model from the stored config and weights. Throws
// IncompatibleCheckpoint when names or shapes do not fit the config.
template <typename T>
model::Model<T> model_from_checkpoint(const Checkpoint& ckpt);

template <typename T>
ag::OptimizerState<T> optimizer_from_checkpoint(const Checkpoint& ckpt, const ag::AdamWConfig& hyper);

RunConfig config_from_checkpoint(const Checkpoint& ckpt);

}  // namespace egrot
