#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "egrot/ops.hpp"
#include "egrot/optim.hpp"
#include "egrot/so3.hpp"
#include "egrot/synth.hpp"

namespace egrot::model {

using ag::AttentionMask;
using ag::Tensor;

struct ModelConfig {
  std::size_t d = 128;
  std::vector<std::size_t> encoder_channels{32, 64, 64, 128, 128};
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t rot_hidden = 128;
  std::size_t head_hidden = 128;
  AttentionMask attention = AttentionMask::kBlocked;
  int crop = 32;
  // Initialization. Query/key projections start at gain * I plus a half-scale
  // random matrix; the rotation MLP's output layer is scaled by rot_out_scale.
  double qk_identity_gain = 1.0;
  double rot_out_scale = 0.1;

  // Throws ConfigError.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Missing keys keep their defaults; unknown keys throw ConfigError.
void from_json(const nlohmann::json& j, ModelConfig& c);

std::string to_string(AttentionMask mask);
AttentionMask parse_attention(const std::string& name);

// Spatial size after the encoder's stride-2 stack.
std::size_t encoder_output_size(const ModelConfig& c);

// Reference and query tokens of one episode, references first.
template <typename T>
struct TokenBatch {
  Tensor<T> tokens;  // (n_ref + n_query, d)
  std::size_t n_ref = 0;
  std::size_t n_query = 0;
  bool is_query(std::size_t i) const { return i >= n_ref; }
};

// Images and known rotations for one episode. Queries carry no rotation here.
struct EpisodeView {
  std::vector<const synth::Image*> ref_images;
  std::vector<so3::RotationMatrix> ref_rotations;
  std::vector<const synth::Image*> query_images;
};

// Head-averaged post-softmax weights, [layer][episode] -> (T, T) row-major.
template <typename T>
struct AttentionTrace {
  std::vector<std::vector<std::vector<T>>> probs;
};

// Onboarded references: encoded, rotation-enriched tokens, plus per-layer keys
// and values when the policy is blocked (reference tokens never see queries,
// so their states do not depend on the query set).
template <typename T>
struct ReferenceCache {
  std::size_t n_ref = 0;
  Tensor<T> tokens;               // (n_ref, d)
  std::vector<Tensor<T>> keys;    // per layer, (n_ref, d); empty under full attention
  std::vector<Tensor<T>> values;  // per layer, (n_ref, d)
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  // Adopts existing parameters (e.g. from a checkpoint). Names and shapes must
  // match the layout produced by the seeded constructor; throws ShapeMismatch.
  Model(ModelConfig config, ag::ParamList<T> params);

  const ModelConfig& config() const { return config_; }
  ag::ParamList<T>& params() { return params_; }
  const ag::ParamList<T>& params() const { return params_; }
  std::size_t parameter_count() const;
  const Tensor<T>& param(const std::string& name) const;
  // Names of the image-encoder parameters (for freezing).
  bool is_encoder_param(const std::string& name) const;

  // (B, 3, crop, crop) -> (B, d)
  Tensor<T> encode(const Tensor<T>& images) const;
  // (N, 6) -> (N, d)
  Tensor<T> embed_rotation(const Tensor<T>& rot6d) const;
  TokenBatch<T> assemble_tokens(const Tensor<T>& ref_latents, const Tensor<T>& ref_rot6d,
                                const Tensor<T>& query_latents) const;
  // Runs all episodes through the transformer and head; returns the query
  // predictions of every episode stacked in order, shape (sum n_query, 6).
  Tensor<T> forward(const std::vector<TokenBatch<T>>& episodes, AttentionTrace<T>* trace = nullptr) const;

  // encode + assemble + forward for whole episodes in one pass.
  Tensor<T> predict_rot6d(std::span<const EpisodeView> episodes, AttentionTrace<T>* trace = nullptr) const;

  // Encodes and embeds the references once. Key/value caching needs the
  // blocked policy and is skipped otherwise (or when `with_kv` is false).
  ReferenceCache<T> onboard(std::span<const synth::Image* const> ref_images,
                            std::span<const so3::RotationMatrix> ref_rotations, bool with_kv = true) const;
  // Queries against onboarded reference tokens; the transformer still runs
  // over references and queries together.
  Tensor<T> predict_rot6d_onboarded(const ReferenceCache<T>& cache,
                                    std::span<const synth::Image* const> query_images) const;
  // Queries against cached keys and values; only query rows are computed.
  // Throws ConfigError if the cache holds no keys.
  Tensor<T> predict_rot6d_cached(const ReferenceCache<T>& cache,
                                 std::span<const synth::Image* const> query_images) const;

 private:
  void build(std::uint64_t seed);
  void index_params();
  Tensor<T> block_forward(std::size_t layer, const Tensor<T>& x, const std::vector<TokenBatch<T>>& episodes,
                          AttentionTrace<T>* trace) const;

  ModelConfig config_;
  ag::ParamList<T> params_;
  std::vector<std::pair<std::string, std::size_t>> index_;  // sorted by name
};

// Stacks images into a (B, 3, H, W) tensor. Throws ShapeMismatch if any image is
// not crop x crop.
template <typename T>
Tensor<T> images_to_tensor(std::span<const synth::Image* const> images, int crop);

template <typename T>
Tensor<T> rotations_to_rot6d(std::span<const so3::RotationMatrix> rotations);

// Gram-Schmidt projection of each row of an (N, 6) prediction.
template <typename T>
std::vector<so3::RotationMatrix> project_predictions(const Tensor<T>& rot6d);

// Predicted rotation per query (encode -> assemble -> forward -> project).
template <typename T>
std::vector<so3::RotationMatrix> predict_rotation(const Model<T>& model, const EpisodeView& episode);

// Query rows of the head-averaged attention at `layer`, restricted to the
// reference columns and renormalized; (n_query, n_ref). Throws BadLayer.
template <typename T>
std::vector<std::vector<double>> attention_scores(const Model<T>& model, const EpisodeView& episode,
                                                  std::size_t layer);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace egrot::model
