#include "egrot/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "egrot/error.hpp"
#include "egrot/rng.hpp"

namespace egrot::model {

using ag::Shape;

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const MatR<T>>;

const char* kKnownKeys[] = {"d",           "encoder_channels", "depth",  "heads",
                            "mlp_ratio",   "rot_hidden",       "head_hidden", "attention",
                            "crop",        "qk_identity_gain", "rot_out_scale"};

}  // namespace

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw ConfigError("model.d (" + std::to_string(d) + ") must be a positive multiple of model.heads (" +
                      std::to_string(heads) + ")");
  }
  if (depth < 1) throw ConfigError("model.depth must be >= 1");
  if (encoder_channels.empty()) throw ConfigError("model.encoder_channels must not be empty");
  for (std::size_t c : encoder_channels) {
    if (c == 0) throw ConfigError("model.encoder_channels entries must be >= 1");
  }
  if (mlp_ratio == 0 || rot_hidden == 0 || head_hidden == 0) {
    throw ConfigError("model.mlp_ratio, rot_hidden and head_hidden must be >= 1");
  }
  if (crop < 4) throw ConfigError("model.crop must be >= 4");
}

std::string to_string(AttentionMask mask) { return mask == AttentionMask::kBlocked ? "blocked" : "full"; }

AttentionMask parse_attention(const std::string& name) {
  if (name == "blocked") return AttentionMask::kBlocked;
  if (name == "full") return AttentionMask::kFull;
  throw ConfigError("model.attention: unknown policy '" + name + "' (expected blocked|full)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d", c.d},
       {"encoder_channels", c.encoder_channels},
       {"depth", c.depth},
       {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio},
       {"rot_hidden", c.rot_hidden},
       {"head_hidden", c.head_hidden},
       {"attention", to_string(c.attention)},
       {"crop", c.crop},
       {"qk_identity_gain", c.qk_identity_gain},
       {"rot_out_scale", c.rot_out_scale}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kKnownKeys), std::end(kKnownKeys), key) == std::end(kKnownKeys)) {
      throw ConfigError("model: unknown key '" + key + "'");
    }
  }
  try {
    c.d = j.value("d", c.d);
    c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.rot_hidden = j.value("rot_hidden", c.rot_hidden);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    if (j.contains("attention")) c.attention = parse_attention(j.at("attention").get<std::string>());
    c.crop = j.value("crop", c.crop);
    c.qk_identity_gain = j.value("qk_identity_gain", c.qk_identity_gain);
    c.rot_out_scale = j.value("rot_out_scale", c.rot_out_scale);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

std::size_t encoder_output_size(const ModelConfig& c) {
  std::size_t s = static_cast<std::size_t>(c.crop);
  for (std::size_t i = 0; i < c.encoder_channels.size(); ++i) s = (s + 2 - 3) / 2 + 1;
  return s;
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  build(seed);
  index_params();
}

template <typename T>
Model<T>::Model(ModelConfig config, ag::ParamList<T> params) : config_(std::move(config)) {
  config_.validate();
  build(0);
  if (params.size() != params_.size()) {
    throw ShapeMismatch("model: expected " + std::to_string(params_.size()) + " parameter tensors, got " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != params_[i].name || params[i].tensor.shape() != params_[i].tensor.shape()) {
      throw ShapeMismatch("model: parameter " + std::to_string(i) + " is '" + params[i].name + "' " +
                          ag::to_string(params[i].tensor.shape()) + ", expected '" + params_[i].name + "' " +
                          ag::to_string(params_[i].tensor.shape()));
    }
    params[i].tensor.set_requires_grad(true);
  }
  params_ = std::move(params);
  index_params();
}

template <typename T>
void Model<T>::build(std::uint64_t seed) {
  Rng rng(seed);
  params_.clear();
  auto add = [&](const std::string& name, Shape shape, auto&& fill) {
    std::vector<T> v(ag::numel(shape));
    for (auto& x : v) x = static_cast<T>(fill());
    params_.push_back({name, Tensor<T>(std::move(shape), std::move(v), true)});
  };
  auto zeros = [] { return 0.0; };
  auto ones = [] { return 1.0; };
  // PyTorch's default for linear layers: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  auto uniform_fan = [&](std::size_t fan_in) {
    const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return [&rng, b] { return rng.uniform(-b, b); };
  };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
    auto u = uniform_fan(in);
    add(name + ".weight", {in, out}, [&] { return gain * u(); });
    add(name + ".bias", {out}, [&] { return gain * u(); });
  };

  const ModelConfig& c = config_;
  std::size_t cin = 3;
  for (std::size_t i = 0; i < c.encoder_channels.size(); ++i) {
    const std::size_t cout = c.encoder_channels[i];
    const double std_he = std::sqrt(2.0 / static_cast<double>(cin * 9));
    add("encoder.conv" + std::to_string(i) + ".weight", {cout, cin, 3, 3}, [&] { return std_he * rng.normal(); });
    add("encoder.conv" + std::to_string(i) + ".bias", {cout}, zeros);
    cin = cout;
  }
  const double std_proj = 1.0 / std::sqrt(static_cast<double>(cin));
  add("encoder.proj.weight", {cin, c.d}, [&] { return std_proj * rng.normal(); });
  add("encoder.proj.bias", {c.d}, zeros);

  linear("rot.fc1", 6, c.rot_hidden);
  linear("rot.fc2", c.rot_hidden, c.d, c.rot_out_scale);
  add("mask", {c.d}, [&] { return 0.02 * rng.normal(); });

  for (std::size_t l = 0; l < c.depth; ++l) {
    const std::string b = "block" + std::to_string(l);
    add(b + ".ln1.gamma", {c.d}, ones);
    add(b + ".ln1.beta", {c.d}, zeros);
    for (const char* proj : {"q", "k"}) {
      auto u = uniform_fan(c.d);
      std::size_t idx = 0;
      add(b + "." + proj + ".weight", {c.d, c.d}, [&] {
        const bool diag = idx / c.d == idx % c.d;
        ++idx;
        return (diag ? c.qk_identity_gain : 0.0) + 0.5 * u();
      });
      add(b + "." + proj + ".bias", {c.d}, u);
    }
    linear(b + ".v", c.d, c.d);
    linear(b + ".o", c.d, c.d);
    add(b + ".ln2.gamma", {c.d}, ones);
    add(b + ".ln2.beta", {c.d}, zeros);
    linear(b + ".fc1", c.d, c.mlp_ratio * c.d);
    linear(b + ".fc2", c.mlp_ratio * c.d, c.d);
  }
  add("final_ln.gamma", {c.d}, ones);
  add("final_ln.beta", {c.d}, zeros);
  linear("head.fc1", c.d, c.head_hidden);
  linear("head.fc2", c.head_hidden, 6);
}

template <typename T>
void Model<T>::index_params() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace_back(params_[i].name, i);
  std::sort(index_.begin(), index_.end());
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
const Tensor<T>& Model<T>::param(const std::string& name) const {
  auto it = std::lower_bound(index_.begin(), index_.end(), std::make_pair(name, std::size_t{0}));
  if (it == index_.end() || it->first != name) throw MissingEntity("model: no parameter named '" + name + "'");
  return params_[it->second].tensor;
}

template <typename T>
bool Model<T>::is_encoder_param(const std::string& name) const {
  return name.rfind("encoder.", 0) == 0;
}

template <typename T>
Tensor<T> Model<T>::encode(const Tensor<T>& images) const {
  const auto crop = static_cast<std::size_t>(config_.crop);
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != crop || images.dim(3) != crop) {
    throw ShapeMismatch("encode: expected (B, 3, " + std::to_string(crop) + ", " + std::to_string(crop) +
                        ") images, got " + ag::to_string(images.shape()));
  }
  // Centre pixel values around zero.
  Tensor<T> x = ag::add(images, Tensor<T>::full({crop}, T(-0.5)));
  for (std::size_t i = 0; i < config_.encoder_channels.size(); ++i) {
    const std::string n = "encoder.conv" + std::to_string(i);
    x = ag::gelu(ag::conv2d(x, param(n + ".weight"), param(n + ".bias"), 2, 1));
  }
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> pooled = hw == 1 ? ag::reshape(x, {b, c}) : ag::mean(ag::reshape(x, {b, c, hw}), 2);
  return ag::linear(pooled, param("encoder.proj.weight"), param("encoder.proj.bias"));
}

template <typename T>
Tensor<T> Model<T>::embed_rotation(const Tensor<T>& rot6d) const {
  if (rot6d.rank() != 2 || rot6d.dim(1) != 6) {
    throw ShapeMismatch("embed_rotation: expected (N, 6), got " + ag::to_string(rot6d.shape()));
  }
  Tensor<T> h = ag::gelu(ag::linear(rot6d, param("rot.fc1.weight"), param("rot.fc1.bias")));
  return ag::linear(h, param("rot.fc2.weight"), param("rot.fc2.bias"));
}

template <typename T>
TokenBatch<T> Model<T>::assemble_tokens(const Tensor<T>& ref_latents, const Tensor<T>& ref_rot6d,
                                        const Tensor<T>& query_latents) const {
  if (ref_latents.rank() != 2 || query_latents.rank() != 2 || ref_latents.dim(1) != config_.d ||
      query_latents.dim(1) != config_.d || ref_rot6d.rank() != 2 || ref_rot6d.dim(0) != ref_latents.dim(0)) {
    throw ShapeMismatch("assemble_tokens: refs " + ag::to_string(ref_latents.shape()) + ", rotations " +
                        ag::to_string(ref_rot6d.shape()) + ", queries " + ag::to_string(query_latents.shape()));
  }
  TokenBatch<T> tb;
  tb.n_ref = ref_latents.dim(0);
  tb.n_query = query_latents.dim(0);
  Tensor<T> refs = ag::add(ref_latents, embed_rotation(ref_rot6d));
  Tensor<T> queries = ag::add(query_latents, param("mask"));
  tb.tokens = ag::concat<T>({refs, queries}, 0);
  return tb;
}

template <typename T>
Tensor<T> Model<T>::block_forward(std::size_t layer, const Tensor<T>& x, const std::vector<TokenBatch<T>>& episodes,
                                  AttentionTrace<T>* trace) const {
  const std::string b = "block" + std::to_string(layer);
  auto p = [&](const char* suffix) -> const Tensor<T>& { return param(b + suffix); };
  Tensor<T> y = ag::layernorm(x, p(".ln1.gamma"), p(".ln1.beta"), 1);
  Tensor<T> q = ag::linear(y, p(".q.weight"), p(".q.bias"));
  Tensor<T> k = ag::linear(y, p(".k.weight"), p(".k.bias"));
  Tensor<T> v = ag::linear(y, p(".v.weight"), p(".v.bias"));

  Tensor<T> attended;
  if (episodes.size() == 1) {
    std::vector<T>* probs = nullptr;
    if (trace) probs = &trace->probs[layer].emplace_back();
    attended = ag::attention(q, k, v, config_.heads, config_.attention, episodes[0].n_ref, probs);
  } else {
    std::vector<Tensor<T>> parts;
    std::size_t row = 0;
    for (const auto& ep : episodes) {
      const std::size_t n = ep.n_ref + ep.n_query;
      std::vector<T>* probs = nullptr;
      if (trace) probs = &trace->probs[layer].emplace_back();
      parts.push_back(ag::attention(ag::slice(q, 0, row, n), ag::slice(k, 0, row, n), ag::slice(v, 0, row, n),
                                    config_.heads, config_.attention, ep.n_ref, probs));
      row += n;
    }
    attended = ag::concat(parts, 0);
  }
  Tensor<T> h = ag::add(x, ag::linear(attended, p(".o.weight"), p(".o.bias")));
  Tensor<T> z = ag::layernorm(h, p(".ln2.gamma"), p(".ln2.beta"), 1);
  z = ag::linear(ag::gelu(ag::linear(z, p(".fc1.weight"), p(".fc1.bias"))), p(".fc2.weight"), p(".fc2.bias"));
  return ag::add(h, z);
}

template <typename T>
Tensor<T> Model<T>::forward(const std::vector<TokenBatch<T>>& episodes, AttentionTrace<T>* trace) const {
  if (episodes.empty()) throw EmptyInput("forward: no episodes");
  std::vector<Tensor<T>> all;
  for (const auto& ep : episodes) {
    if (ep.n_ref < 1 || ep.n_query < 1 || ep.tokens.dim(0) != ep.n_ref + ep.n_query ||
        ep.tokens.dim(1) != config_.d) {
      throw ShapeMismatch("forward: token batch " + ag::to_string(ep.tokens.shape()) + " with " +
                          std::to_string(ep.n_ref) + " refs and " + std::to_string(ep.n_query) + " queries");
    }
    all.push_back(ep.tokens);
  }
  Tensor<T> x = all.size() == 1 ? all[0] : ag::concat(all, 0);
  if (trace) trace->probs.assign(config_.depth, {});
  for (std::size_t l = 0; l < config_.depth; ++l) x = block_forward(l, x, episodes, trace);

  std::vector<Tensor<T>> queries;
  std::size_t row = 0;
  for (const auto& ep : episodes) {
    queries.push_back(ag::slice(x, 0, row + ep.n_ref, ep.n_query));
    row += ep.n_ref + ep.n_query;
  }
  Tensor<T> zq = queries.size() == 1 ? queries[0] : ag::concat(queries, 0);
  zq = ag::layernorm(zq, param("final_ln.gamma"), param("final_ln.beta"), 1);
  Tensor<T> h = ag::gelu(ag::linear(zq, param("head.fc1.weight"), param("head.fc1.bias")));
  return ag::linear(h, param("head.fc2.weight"), param("head.fc2.bias"));
}

template <typename T>
Tensor<T> Model<T>::predict_rot6d(std::span<const EpisodeView> episodes, AttentionTrace<T>* trace) const {
  if (episodes.empty()) throw EmptyInput("predict_rot6d: no episodes");
  // Encode every image of every episode in one batch.
  std::vector<const synth::Image*> images;
  for (const auto& ep : episodes) {
    if (ep.ref_images.empty() || ep.query_images.empty()) {
      throw InsufficientReferences("predict_rot6d: an episode needs at least one reference and one query");
    }
    if (ep.ref_images.size() != ep.ref_rotations.size()) {
      throw ShapeMismatch("predict_rot6d: " + std::to_string(ep.ref_images.size()) + " reference images but " +
                          std::to_string(ep.ref_rotations.size()) + " rotations");
    }
    images.insert(images.end(), ep.ref_images.begin(), ep.ref_images.end());
    images.insert(images.end(), ep.query_images.begin(), ep.query_images.end());
  }
  Tensor<T> z = encode(images_to_tensor<T>(images, config_.crop));
  std::vector<TokenBatch<T>> batches;
  std::size_t row = 0;
  for (const auto& ep : episodes) {
    const std::size_t nr = ep.ref_images.size(), nq = ep.query_images.size();
    batches.push_back(assemble_tokens(ag::slice(z, 0, row, nr), rotations_to_rot6d<T>(ep.ref_rotations),
                                      ag::slice(z, 0, row + nr, nq)));
    row += nr + nq;
  }
  return forward(batches, trace);
}

template <typename T>
ReferenceCache<T> Model<T>::onboard(std::span<const synth::Image* const> ref_images,
                                    std::span<const so3::RotationMatrix> ref_rotations, bool with_kv) const {
  if (ref_images.empty() || ref_images.size() != ref_rotations.size()) {
    throw InsufficientReferences("onboard: need matching, non-empty reference images and rotations");
  }
  ag::NoGradGuard no_grad;
  ReferenceCache<T> cache;
  cache.n_ref = ref_images.size();
  cache.tokens = ag::add(encode(images_to_tensor<T>(ref_images, config_.crop)),
                         embed_rotation(rotations_to_rot6d<T>(ref_rotations)));
  if (!with_kv || config_.attention != AttentionMask::kBlocked) return cache;
  Tensor<T> x = cache.tokens;
  const std::vector<TokenBatch<T>> refs_only{{x, cache.n_ref, 0}};
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string b = "block" + std::to_string(l);
    Tensor<T> y = ag::layernorm(x, param(b + ".ln1.gamma"), param(b + ".ln1.beta"), 1);
    cache.keys.push_back(ag::linear(y, param(b + ".k.weight"), param(b + ".k.bias")));
    cache.values.push_back(ag::linear(y, param(b + ".v.weight"), param(b + ".v.bias")));
    x = block_forward(l, x, refs_only, nullptr);
  }
  return cache;
}

template <typename T>
Tensor<T> Model<T>::predict_rot6d_onboarded(const ReferenceCache<T>& cache,
                                            std::span<const synth::Image* const> query_images) const {
  if (cache.n_ref == 0 || !cache.tokens.defined()) throw InsufficientReferences("predict: empty reference cache");
  if (query_images.empty()) throw EmptyInput("predict: no query images");
  ag::NoGradGuard no_grad;
  TokenBatch<T> tb;
  tb.n_ref = cache.n_ref;
  tb.n_query = query_images.size();
  Tensor<T> queries = ag::add(encode(images_to_tensor<T>(query_images, config_.crop)), param("mask"));
  tb.tokens = ag::concat<T>({cache.tokens, queries}, 0);
  return forward({tb});
}

template <typename T>
Tensor<T> Model<T>::predict_rot6d_cached(const ReferenceCache<T>& cache,
                                         std::span<const synth::Image* const> query_images) const {
  if (cache.keys.size() != config_.depth || cache.n_ref == 0) {
    throw ConfigError("predict_rot6d_cached: cache holds no per-layer keys (blocked policy required)");
  }
  if (query_images.empty()) throw EmptyInput("predict_rot6d_cached: no query images");
  ag::NoGradGuard no_grad;
  const std::size_t nq = query_images.size(), nr = cache.n_ref, d = config_.d;
  const std::size_t heads = config_.heads, dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> x = ag::add(encode(images_to_tensor<T>(query_images, config_.crop)), param("mask"));
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string b = "block" + std::to_string(l);
    auto p = [&](const char* suffix) -> const Tensor<T>& { return param(b + suffix); };
    Tensor<T> y = ag::layernorm(x, p(".ln1.gamma"), p(".ln1.beta"), 1);
    Tensor<T> q = ag::linear(y, p(".q.weight"), p(".q.bias"));
    Tensor<T> k = ag::linear(y, p(".k.weight"), p(".k.bias"));
    Tensor<T> v = ag::linear(y, p(".v.weight"), p(".v.bias"));
    CMap<T> qm(q.data().data(), nq, d), km(k.data().data(), nq, d), vm(v.data().data(), nq, d);
    CMap<T> kr(cache.keys[l].data().data(), nr, d), vr(cache.values[l].data().data(), nr, d);
    MatR<T> out(nq, d);
    for (std::size_t h = 0; h < heads; ++h) {
      // Each query sees the cached references plus itself.
      MatR<T> s = (qm.middleCols(h * dh, dh) * kr.middleCols(h * dh, dh).transpose()) * inv_sqrt;
      for (std::size_t i = 0; i < nq; ++i) {
        const T self = qm.row(i).segment(h * dh, dh).dot(km.row(i).segment(h * dh, dh)) * inv_sqrt;
        const T mx = std::max(s.row(i).maxCoeff(), self);
        s.row(i) = (s.row(i).array() - mx).exp().matrix();
        const T e_self = std::exp(self - mx);
        const T total = s.row(i).sum() + e_self;
        out.row(i).segment(h * dh, dh) =
            (s.row(i) * vr.middleCols(h * dh, dh) + e_self * vm.row(i).segment(h * dh, dh)) / total;
      }
    }
    Tensor<T> attended({nq, d}, std::vector<T>(out.data(), out.data() + out.size()));
    Tensor<T> hid = ag::add(x, ag::linear(attended, p(".o.weight"), p(".o.bias")));
    Tensor<T> z = ag::layernorm(hid, p(".ln2.gamma"), p(".ln2.beta"), 1);
    z = ag::linear(ag::gelu(ag::linear(z, p(".fc1.weight"), p(".fc1.bias"))), p(".fc2.weight"), p(".fc2.bias"));
    x = ag::add(hid, z);
  }
  Tensor<T> zq = ag::layernorm(x, param("final_ln.gamma"), param("final_ln.beta"), 1);
  Tensor<T> h = ag::gelu(ag::linear(zq, param("head.fc1.weight"), param("head.fc1.bias")));
  return ag::linear(h, param("head.fc2.weight"), param("head.fc2.bias"));
}

template <typename T>
Tensor<T> images_to_tensor(std::span<const synth::Image* const> images, int crop) {
  if (images.empty()) throw EmptyInput("images_to_tensor: no images");
  const auto s = static_cast<std::size_t>(crop);
  const std::size_t plane = s * s;
  std::vector<T> data(images.size() * 3 * plane);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const synth::Image& img = *images[b];
    if (img.width != crop || img.height != crop) {
      throw ShapeMismatch("images_to_tensor: image is " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) + ", model crop is " + std::to_string(crop));
    }
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t c = 0; c < 3; ++c) data[(b * 3 + c) * plane + i] = static_cast<T>(img.pixels[i * 3 + c]);
    }
  }
  return Tensor<T>({images.size(), 3, s, s}, std::move(data));
}

template <typename T>
Tensor<T> rotations_to_rot6d(std::span<const so3::RotationMatrix> rotations) {
  if (rotations.empty()) throw EmptyInput("rotations_to_rot6d: no rotations");
  std::vector<T> data;
  data.reserve(rotations.size() * 6);
  for (const auto& r : rotations) {
    for (double x : so3::rot6d_from_matrix(r)) data.push_back(static_cast<T>(x));
  }
  return Tensor<T>({rotations.size(), 6}, std::move(data));
}

template <typename T>
std::vector<so3::RotationMatrix> project_predictions(const Tensor<T>& rot6d) {
  if (rot6d.rank() != 2 || rot6d.dim(1) != 6) {
    throw ShapeMismatch("project_predictions: expected (N, 6), got " + ag::to_string(rot6d.shape()));
  }
  std::vector<so3::RotationMatrix> out;
  for (std::size_t i = 0; i < rot6d.dim(0); ++i) {
    so3::Rot6D v;
    for (std::size_t j = 0; j < 6; ++j) v[j] = static_cast<double>(rot6d.at(i * 6 + j));
    out.push_back(so3::project_so3(v));
  }
  return out;
}

template <typename T>
std::vector<so3::RotationMatrix> predict_rotation(const Model<T>& model, const EpisodeView& episode) {
  ag::NoGradGuard no_grad;
  return project_predictions(model.predict_rot6d(std::span<const EpisodeView>(&episode, 1)));
}

template <typename T>
std::vector<std::vector<double>> attention_scores(const Model<T>& model, const EpisodeView& episode,
                                                  std::size_t layer) {
  if (layer >= model.config().depth) {
    throw BadLayer("attention_scores: layer " + std::to_string(layer) + " out of range (depth " +
                   std::to_string(model.config().depth) + ")");
  }
  ag::NoGradGuard no_grad;
  AttentionTrace<T> trace;
  model.predict_rot6d(std::span<const EpisodeView>(&episode, 1), &trace);
  const std::size_t nr = episode.ref_images.size(), nq = episode.query_images.size(), n = nr + nq;
  const auto& probs = trace.probs[layer][0];
  std::vector<std::vector<double>> rows(nq, std::vector<double>(nr));
  for (std::size_t i = 0; i < nq; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < nr; ++j) total += static_cast<double>(probs[(nr + i) * n + j]);
    for (std::size_t j = 0; j < nr; ++j) rows[i][j] = static_cast<double>(probs[(nr + i) * n + j]) / total;
  }
  return rows;
}

#define EGROT_INSTANTIATE_MODEL(T)                                                                            \
  template class Model<T>;                                                                                    \
  template Tensor<T> images_to_tensor<T>(std::span<const synth::Image* const>, int);                          \
  template Tensor<T> rotations_to_rot6d<T>(std::span<const so3::RotationMatrix>);                             \
  template std::vector<so3::RotationMatrix> project_predictions(const Tensor<T>&);                            \
  template std::vector<so3::RotationMatrix> predict_rotation(const Model<T>&, const EpisodeView&);            \
  template std::vector<std::vector<double>> attention_scores(const Model<T>&, const EpisodeView&, std::size_t);

EGROT_INSTANTIATE_MODEL(float)
EGROT_INSTANTIATE_MODEL(double)

#undef EGROT_INSTANTIATE_MODEL

}  // namespace egrot::model
