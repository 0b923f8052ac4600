#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egrot/config.hpp"
#include "egrot/dataset.hpp"
#include "egrot/model.hpp"
#include "egrot/optim.hpp"

namespace egrot::train {

// One training episode: views point into the dataset, rotations are copies so
// augmentation can rewrite them without touching the data.
struct TrainEpisode {
  std::size_t object_index = 0;  // into Dataset::objects
  std::uint64_t object_id = 0;
  // Indices into the object's views, ref_pool first, then query_pool.
  std::vector<std::size_t> ref_views;
  std::vector<std::size_t> query_views;
  std::vector<const synth::Image*> ref_images;
  std::vector<const synth::Image*> query_images;
  std::vector<so3::RotationMatrix> ref_rotations;
  std::vector<so3::RotationMatrix> query_rotations;
};

using Batch = std::vector<TrainEpisode>;

// Objects are drawn without replacement; per object, n_ref + n_query distinct
// views are drawn from the union of its reference and query pools. The result
// depends only on (seed, step). Throws InsufficientData.
Batch build_batch(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed, std::uint64_t step);

// Right-multiplies every reference and query rotation by one Haar rotation.
// Returns the rotation used.
so3::RotationMatrix augment_rotations(TrainEpisode& episode, Rng& rng);

// Encoder outputs for every view of every object, computed once. Valid only
// while the encoder is frozen.
template <typename T>
struct LatentCache {
  // [object][view], views ordered ref_pool then query_pool
  std::vector<std::vector<std::vector<T>>> latents;
  std::size_t d = 0;
};

template <typename T>
LatentCache<T> encode_dataset(const model::Model<T>& model, const Dataset& data, std::size_t chunk = 64);

template <typename T>
struct StepContext {
  model::Model<T>* model = nullptr;
  ag::OptimizerState<T>* optimizer = nullptr;
  bool freeze_encoder = false;
  const LatentCache<T>* latents = nullptr;  // used when the encoder is frozen
  const Dataset* data = nullptr;            // needed with `latents`
};

// Sum over the six components of the squared difference between each row of
// `pred` (N, 6) and the 6D form of the matching target, averaged over rows.
template <typename T>
ag::Tensor<T> rot6d_loss(const ag::Tensor<T>& pred, std::span<const so3::RotationMatrix> targets);

// Sum over the six components of the squared error, averaged over all queries
// of all episodes. References are never supervised.
template <typename T>
ag::Tensor<T> episode_loss(const model::Model<T>& model, const Batch& batch, const LatentCache<T>* latents = nullptr,
                           const Dataset* data = nullptr);

// Forward, backward, AdamW update, gradient reset. Returns the loss before the
// update.
template <typename T>
double train_step(const Batch& batch, StepContext<T>& ctx);

struct LogRecord {
  std::uint64_t step = 0;
  double loss = 0;
  std::optional<double> val_acc;
  double ms_per_step = 0;
};

nlohmann::json to_json(const LogRecord& r);

struct TrainLog {
  std::vector<LogRecord> records;
};

template <typename T>
struct LoopHooks {
  std::function<void(const LogRecord&)> on_record;
  // Called after step `step` when it is a multiple of checkpoint_every, and
  // after the final step.
  std::function<void(std::uint64_t step, const model::Model<T>&, const ag::OptimizerState<T>&)> on_checkpoint;
  std::function<double(const model::Model<T>&)> validate;  // returns Acc@15°
};

ag::AdamWConfig adamw_config(const TrainConfig& cfg);

// Runs steps start_step+1 .. cfg.steps. `optimizer.step` is expected to equal
// the number of updates already applied.
template <typename T>
TrainLog train_loop(const TrainConfig& cfg, const Dataset& data, model::Model<T>& model,
                    ag::OptimizerState<T>& optimizer, std::uint64_t start_step = 0, const LoopHooks<T>& hooks = {});

}  // namespace egrot::train
