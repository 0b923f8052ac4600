#include "egrot/training.hpp"

#include <algorithm>
#include <chrono>

#include "egrot/error.hpp"

namespace egrot::train {

namespace {

const synth::View& view_at(const DatasetObject& obj, std::size_t i) {
  return i < obj.ref_pool.size() ? obj.ref_pool[i] : obj.query_pool[i - obj.ref_pool.size()];
}

// First `k` entries of a seeded Fisher-Yates shuffle of 0..n-1.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

template <typename T>
ag::Tensor<T> gather_latents(const LatentCache<T>& cache, std::size_t object, const std::vector<std::size_t>& views) {
  std::vector<T> values;
  values.reserve(views.size() * cache.d);
  for (std::size_t v : views) {
    const auto& row = cache.latents[object][v];
    values.insert(values.end(), row.begin(), row.end());
  }
  return ag::Tensor<T>({views.size(), cache.d}, std::move(values));
}

}  // namespace

Batch build_batch(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed, std::uint64_t step) {
  if (cfg.objects_per_batch < 1 || cfg.n_ref < 1 || cfg.n_query < 1) {
    throw InsufficientData("build_batch: counts must be >= 1");
  }
  if (data.objects.size() < cfg.objects_per_batch) {
    throw InsufficientData("build_batch: dataset has " + std::to_string(data.objects.size()) + " objects, batch needs " +
                           std::to_string(cfg.objects_per_batch));
  }
  Rng rng(derive_seed({seed, step}));
  const auto objects = sample_without_replacement(data.objects.size(), cfg.objects_per_batch, rng);
  Batch batch;
  for (std::size_t oi : objects) {
    const auto& obj = data.objects[oi];
    const std::size_t pool = obj.ref_pool.size() + obj.query_pool.size();
    if (pool < cfg.n_ref + cfg.n_query) {
      throw InsufficientData("build_batch: object " + std::to_string(obj.object.id) + " has " + std::to_string(pool) +
                             " views, episode needs " + std::to_string(cfg.n_ref + cfg.n_query));
    }
    const auto views = sample_without_replacement(pool, cfg.n_ref + cfg.n_query, rng);
    TrainEpisode ep;
    ep.object_index = oi;
    ep.object_id = obj.object.id;
    for (std::size_t i = 0; i < views.size(); ++i) {
      const auto& v = view_at(obj, views[i]);
      if (i < cfg.n_ref) {
        ep.ref_views.push_back(views[i]);
        ep.ref_images.push_back(&v.image);
        ep.ref_rotations.push_back(v.rotation);
      } else {
        ep.query_views.push_back(views[i]);
        ep.query_images.push_back(&v.image);
        ep.query_rotations.push_back(v.rotation);
      }
    }
    batch.push_back(std::move(ep));
  }
  return batch;
}

so3::RotationMatrix augment_rotations(TrainEpisode& episode, Rng& rng) {
  const so3::RotationMatrix r = so3::random_rotation(rng);
  episode.ref_rotations = so3::apply_shared_rotation(episode.ref_rotations, r);
  episode.query_rotations = so3::apply_shared_rotation(episode.query_rotations, r);
  return r;
}

template <typename T>
LatentCache<T> encode_dataset(const model::Model<T>& model, const Dataset& data, std::size_t chunk) {
  ag::NoGradGuard no_grad;
  LatentCache<T> cache;
  cache.d = model.config().d;
  for (const auto& obj : data.objects) {
    std::vector<const synth::Image*> images;
    for (const auto& v : obj.ref_pool) images.push_back(&v.image);
    for (const auto& v : obj.query_pool) images.push_back(&v.image);
    auto& rows = cache.latents.emplace_back();
    for (std::size_t start = 0; start < images.size(); start += chunk) {
      const std::size_t n = std::min(chunk, images.size() - start);
      const auto z = model.encode(
          model::images_to_tensor<T>(std::span<const synth::Image* const>(images.data() + start, n),
                                     model.config().crop));
      for (std::size_t i = 0; i < n; ++i) {
        rows.emplace_back(z.data().begin() + static_cast<std::ptrdiff_t>(i * cache.d),
                          z.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * cache.d));
      }
    }
  }
  return cache;
}

template <typename T>
ag::Tensor<T> rot6d_loss(const ag::Tensor<T>& pred, std::span<const so3::RotationMatrix> targets) {
  // mse averages over all 6N elements; the loss sums the six components.
  return ag::scale(ag::mse(pred, model::rotations_to_rot6d<T>(targets)), T(6));
}

template <typename T>
ag::Tensor<T> episode_loss(const model::Model<T>& model, const Batch& batch, const LatentCache<T>* latents,
                           const Dataset* data) {
  if (latents && !data) throw ConfigError("episode_loss: cached latents need the dataset");
  std::vector<model::TokenBatch<T>> episodes;
  std::vector<so3::RotationMatrix> targets;
  for (const auto& ep : batch) {
    ag::Tensor<T> ref_z, query_z;
    if (latents) {
      ref_z = gather_latents(*latents, ep.object_index, ep.ref_views);
      query_z = gather_latents(*latents, ep.object_index, ep.query_views);
    } else {
      std::vector<const synth::Image*> images = ep.ref_images;
      images.insert(images.end(), ep.query_images.begin(), ep.query_images.end());
      const auto z = model.encode(model::images_to_tensor<T>(images, model.config().crop));
      ref_z = ag::slice(z, 0, 0, ep.ref_images.size());
      query_z = ag::slice(z, 0, ep.ref_images.size(), ep.query_images.size());
    }
    episodes.push_back(
        model.assemble_tokens(ref_z, model::rotations_to_rot6d<T>(ep.ref_rotations), query_z));
    targets.insert(targets.end(), ep.query_rotations.begin(), ep.query_rotations.end());
  }
  return rot6d_loss(model.forward(episodes), std::span<const so3::RotationMatrix>(targets));
}

template <typename T>
double train_step(const Batch& batch, StepContext<T>& ctx) {
  auto& model = *ctx.model;
  ag::ParamList<T> trainable;
  for (auto& p : model.params()) {
    const bool frozen = ctx.freeze_encoder && model.is_encoder_param(p.name);
    p.tensor.set_requires_grad(!frozen);
    if (!frozen) trainable.push_back(p);
  }
  const auto loss = episode_loss(model, batch, ctx.freeze_encoder ? ctx.latents : nullptr, ctx.data);
  const double value = static_cast<double>(loss.item());
  loss.backward();
  ag::adamw_step(trainable, *ctx.optimizer);
  ag::zero_grads(model.params());
  return value;
}

nlohmann::json to_json(const LogRecord& r) {
  nlohmann::json j{{"step", r.step}, {"loss", r.loss}, {"ms_per_step", r.ms_per_step}};
  j["val_acc"] = r.val_acc ? nlohmann::json(*r.val_acc) : nlohmann::json(nullptr);
  return j;
}

ag::AdamWConfig adamw_config(const TrainConfig& cfg) {
  return {cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
}

template <typename T>
TrainLog train_loop(const TrainConfig& cfg, const Dataset& data, model::Model<T>& model,
                    ag::OptimizerState<T>& optimizer, std::uint64_t start_step, const LoopHooks<T>& hooks) {
  TrainLog log;
  optimizer.config = adamw_config(cfg);
  std::optional<LatentCache<T>> latents;
  StepContext<T> ctx{&model, &optimizer, false, nullptr, &data};
  for (std::uint64_t step = start_step + 1; step <= cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    ctx.freeze_encoder = cfg.freeze_encoder_after >= 0 && step > static_cast<std::uint64_t>(cfg.freeze_encoder_after);
    if (ctx.freeze_encoder && !latents) {
      latents = encode_dataset(model, data);
      ctx.latents = &*latents;
    }
    Batch batch = build_batch(data, cfg, cfg.seed, step);
    if (cfg.augment) {
      for (std::size_t e = 0; e < batch.size(); ++e) {
        Rng rng(derive_seed({cfg.seed, step, 1, e}));
        augment_rotations(batch[e], rng);
      }
    }
    LogRecord rec;
    rec.step = step;
    rec.loss = train_step(batch, ctx);
    rec.ms_per_step = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.validate && cfg.val_every > 0 && (step % cfg.val_every == 0 || step == cfg.steps)) {
      rec.val_acc = hooks.validate(model);
    }
    log.records.push_back(rec);
    if (hooks.on_record) hooks.on_record(rec);
    if (hooks.on_checkpoint &&
        ((cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.steps)) {
      hooks.on_checkpoint(step, model, optimizer);
    }
  }
  for (auto& p : model.params()) p.tensor.set_requires_grad(true);
  return log;
}

#define EGROT_INSTANTIATE_TRAIN(T)                                                                              \
  template struct LatentCache<T>;                                                                               \
  template ag::Tensor<T> rot6d_loss(const ag::Tensor<T>&, std::span<const so3::RotationMatrix>);               \
  template LatentCache<T> encode_dataset(const model::Model<T>&, const Dataset&, std::size_t);                \
  template ag::Tensor<T> episode_loss(const model::Model<T>&, const Batch&, const LatentCache<T>*,            \
                                      const Dataset*);                                                          \
  template double train_step(const Batch&, StepContext<T>&);                                                   \
  template TrainLog train_loop(const TrainConfig&, const Dataset&, model::Model<T>&, ag::OptimizerState<T>&, \
                               std::uint64_t, const LoopHooks<T>&);

EGROT_INSTANTIATE_TRAIN(float)
EGROT_INSTANTIATE_TRAIN(double)

#undef EGROT_INSTANTIATE_TRAIN

}  // namespace egrot::train
