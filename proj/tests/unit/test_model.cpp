#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "egrot/error.hpp"
#include "egrot/gradcheck.hpp"
#include "egrot/model.hpp"

using namespace egrot;
using namespace egrot::model;
using so3::RotationMatrix;

namespace {

synth::Image noise_image(Rng& rng, int crop) {
  synth::Image img(crop, crop);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

struct EpisodeData {
  std::vector<synth::Image> refs, queries;
  std::vector<RotationMatrix> ref_rots;
  EpisodeView view() const {
    EpisodeView v;
    for (const auto& i : refs) v.ref_images.push_back(&i);
    for (const auto& i : queries) v.query_images.push_back(&i);
    v.ref_rotations = ref_rots;
    return v;
  }
};

EpisodeData random_episode(Rng& rng, std::size_t nr, std::size_t nq, int crop) {
  EpisodeData e;
  for (std::size_t i = 0; i < nr; ++i) {
    e.refs.push_back(noise_image(rng, crop));
    e.ref_rots.push_back(so3::random_rotation(rng));
  }
  for (std::size_t i = 0; i < nq; ++i) e.queries.push_back(noise_image(rng, crop));
  return e;
}

template <typename T>
std::vector<T> predict(const Model<T>& m, const EpisodeData& e) {
  ag::NoGradGuard g;
  const EpisodeView v = e.view();
  auto out = m.predict_rot6d(std::span<const EpisodeView>(&v, 1));
  return {out.data().begin(), out.data().end()};
}

ModelConfig small_config() {
  ModelConfig c;
  c.d = 32;
  c.encoder_channels = {8, 16, 16, 32, 32};
  c.depth = 2;
  c.heads = 4;
  c.rot_hidden = 32;
  c.head_hidden = 32;
  return c;
}

// Closed-form parameter count, written out independently of the model code.
std::size_t expected_params(const ModelConfig& c) {
  std::size_t n = 0, cin = 3;
  for (std::size_t cout : c.encoder_channels) {
    n += cout * cin * 9 + cout;
    cin = cout;
  }
  n += cin * c.d + c.d;                                   // encoder projection
  n += 6 * c.rot_hidden + c.rot_hidden;                   // rotation MLP layer 1
  n += c.rot_hidden * c.d + c.d;                          // rotation MLP layer 2
  n += c.d;                                               // mask
  const std::size_t per_block = 2 * c.d                   // ln1
                                + 4 * (c.d * c.d + c.d)   // q, k, v, o
                                + 2 * c.d                 // ln2
                                + c.d * c.mlp_ratio * c.d + c.mlp_ratio * c.d + c.mlp_ratio * c.d * c.d + c.d;
  n += c.depth * per_block;
  n += 2 * c.d;                                           // final layernorm
  n += c.d * c.head_hidden + c.head_hidden + c.head_hidden * 6 + 6;
  return n;
}

}  // namespace

TEST_CASE("config validation and json") {
  ModelConfig c;
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.depth = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  ModelConfig d = small_config();
  d.attention = AttentionMask::kFull;
  nlohmann::json j = d;
  CHECK(j.get<ModelConfig>() == d);
  CHECK_THROWS_AS((nlohmann::json{{"dd", 3}}.get<ModelConfig>()), ConfigError);
  CHECK_THROWS_AS((nlohmann::json{{"attention", "sparse"}}.get<ModelConfig>()), ConfigError);
}

TEST_CASE("parameter count matches the closed form") {
  for (const auto& c : {ModelConfig{}, small_config()}) {
    Model<float> m(c, 1);
    CHECK(m.parameter_count() == expected_params(c));
  }
  ModelConfig c = small_config();
  c.crop = 64;
  c.depth = 3;
  c.mlp_ratio = 2;
  CHECK(Model<float>(c, 2).parameter_count() == expected_params(c));
}

TEST_CASE("seeded construction is deterministic") {
  Model<float> a(small_config(), 5), b(small_config(), 5), c(small_config(), 6);
  CHECK(a.params().size() == b.params().size());
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    auto x = a.params()[i].tensor.data(), y = b.params()[i].tensor.data(), z = c.params()[i].tensor.data();
    all_equal = all_equal && std::equal(x.begin(), x.end(), y.begin());
    any_diff = any_diff || !std::equal(x.begin(), x.end(), z.begin());
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("encode contract") {
  Rng rng(1);
  const auto img = noise_image(rng, 32);
  Model<double> m(ModelConfig{}, 3);
  std::vector<const synth::Image*> two{&img, &img};
  auto z = m.encode(images_to_tensor<double>(two, 32));
  CHECK(z.shape() == ag::Shape{2, 128});
  for (std::size_t i = 0; i < 128; ++i) CHECK(z.at(i) == z.at(128 + i));

  synth::Image zeros(32, 32), ones(32, 32);
  std::fill(ones.pixels.begin(), ones.pixels.end(), 1.0f);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Model<double> mi(ModelConfig{}, seed);
    std::vector<const synth::Image*> pair{&zeros, &ones};
    auto zz = mi.encode(images_to_tensor<double>(pair, 32));
    double dist = 0;
    for (std::size_t i = 0; i < 128; ++i) dist += (zz.at(i) - zz.at(128 + i)) * (zz.at(i) - zz.at(128 + i));
    CHECK(dist > 0.0);
  }

  std::vector<synth::Image> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(noise_image(rng, 32));
  std::vector<const synth::Image*> ptrs;
  for (const auto& b : batch) ptrs.push_back(&b);
  CHECK(m.encode(images_to_tensor<double>(ptrs, 32)).shape() == ag::Shape{5, 128});

  const auto wrong = noise_image(rng, 16);
  std::vector<const synth::Image*> bad{&wrong};
  CHECK_THROWS_AS(images_to_tensor<double>(bad, 32), ShapeMismatch);
  CHECK_THROWS_AS(m.encode(images_to_tensor<double>(bad, 16)), ShapeMismatch);
}

TEST_CASE("rotation embedding and token assembly") {
  Model<double> m(small_config(), 4);
  Rng rng(2);
  const auto r = so3::random_rotation(rng);
  std::vector<RotationMatrix> rs{r, r};
  auto e = m.embed_rotation(rotations_to_rot6d<double>(rs));
  CHECK(e.shape() == ag::Shape{2, 32});
  for (std::size_t i = 0; i < 32; ++i) CHECK(e.at(i) == e.at(32 + i));

  std::vector<RotationMatrix> three{so3::random_rotation(rng), so3::random_rotation(rng), so3::random_rotation(rng)};
  auto rot6 = rotations_to_rot6d<double>(three);
  auto tb = m.assemble_tokens(Tensor<double>::zeros({3, 32}), rot6, Tensor<double>::zeros({2, 32}));
  CHECK(tb.tokens.shape() == ag::Shape{5, 32});
  CHECK(tb.n_ref == 3);
  CHECK(tb.n_query == 2);
  CHECK_FALSE(tb.is_query(2));
  CHECK(tb.is_query(3));
  auto emb = m.embed_rotation(rot6);
  for (std::size_t i = 0; i < 3 * 32; ++i) CHECK(tb.tokens.at(i) == emb.at(i));
  const auto mask = m.param("mask");
  for (std::size_t q = 0; q < 2; ++q)
    for (std::size_t i = 0; i < 32; ++i) CHECK(tb.tokens.at((3 + q) * 32 + i) == mask.at(i));

  // Minimal episode: one reference, one query.
  auto one = m.assemble_tokens(Tensor<double>::zeros({1, 32}), rotations_to_rot6d<double>(std::vector{r}),
                               Tensor<double>::zeros({1, 32}));
  CHECK(one.tokens.dim(0) == 2);
}

TEST_CASE("reference permutation invariance") {
  for (AttentionMask policy : {AttentionMask::kBlocked, AttentionMask::kFull}) {
    ModelConfig c;
    c.attention = policy;
    Rng rng(3);
    double worst32 = 0, worst64 = 0;
    for (int trial = 0; trial < 50; ++trial) {
      Model<float> m32(c, 100 + trial);
      Model<double> m64(c, 100 + trial);
      auto e = random_episode(rng, 2 + rng.below(10), 1 + rng.below(4), 32);
      auto p = e;
      for (std::size_t i = p.refs.size() - 1; i > 0; --i) {
        const std::size_t j = rng.below(i + 1);
        std::swap(p.refs[i], p.refs[j]);
        std::swap(p.ref_rots[i], p.ref_rots[j]);
      }
      auto a32 = predict(m32, e), b32 = predict(m32, p);
      auto a64 = predict(m64, e), b64 = predict(m64, p);
      for (std::size_t i = 0; i < a32.size(); ++i) {
        worst32 = std::max(worst32, static_cast<double>(std::abs(a32[i] - b32[i])));
        worst64 = std::max(worst64, std::abs(a64[i] - b64[i]));
      }
    }
    INFO("policy " << to_string(policy));
    CHECK(worst32 <= 1e-5);
    CHECK(worst64 <= 1e-9);
  }
}

TEST_CASE("blocked queries do not see each other") {
  Rng rng(4);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Model<float> m(ModelConfig{}, 200 + trial);
    auto e = random_episode(rng, 1 + rng.below(12), 1 + rng.below(4), 32);
    auto more = e;
    more.queries.push_back(noise_image(rng, 32));
    auto a = predict(m, e), b = predict(m, more);
    REQUIRE(b.size() == a.size() + 6);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(a[i] - b[i])));
  }
  CHECK(worst <= 1e-6);

  // Full attention is allowed to mix them.
  ModelConfig full;
  full.attention = AttentionMask::kFull;
  Model<float> m(full, 9);
  auto e = random_episode(rng, 4, 1, 32);
  auto more = e;
  more.queries.push_back(noise_image(rng, 32));
  auto a = predict(m, e), b = predict(m, more);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, static_cast<double>(std::abs(a[i] - b[i])));
  CHECK(diff > 1e-6);
}

TEST_CASE("several episodes in one pass equal separate passes") {
  Rng rng(5);
  Model<double> m(small_config(), 10);
  std::vector<EpisodeData> eps{random_episode(rng, 3, 2, 32), random_episode(rng, 5, 1, 32)};
  std::vector<EpisodeView> views{eps[0].view(), eps[1].view()};
  ag::NoGradGuard g;
  auto joint = m.predict_rot6d(views);
  auto a = predict(m, eps[0]), b = predict(m, eps[1]);
  a.insert(a.end(), b.begin(), b.end());
  REQUIRE(joint.numel() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(joint.at(i) - a[i]) <= 1e-12);
}

TEST_CASE("predictions are rotations, even at random init") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    Model<float> m(small_config(), 300 + trial);
    auto e = random_episode(rng, 3, 2, 32);
    for (const auto& r : predict_rotation(m, e.view())) {
      CHECK(so3::orthonormality_error(r) <= 1e-6);
      CHECK(so3::determinant_error(r) <= 1e-6);
    }
  }
  Model<float> m(ModelConfig{}, 1);
  auto big = random_episode(rng, 64, 30, 32);
  CHECK(predict_rotation(m, big.view()).size() == 30);
}

TEST_CASE("attention scores") {
  Rng rng(7);
  Model<double> m(small_config(), 11);
  auto e = random_episode(rng, 6, 3, 32);
  for (std::size_t layer = 0; layer < 2; ++layer) {
    auto rows = attention_scores(m, e.view(), layer);
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) {
      CHECK(r.size() == 6);
      CHECK(std::abs(std::accumulate(r.begin(), r.end(), 0.0) - 1.0) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(attention_scores(m, e.view(), 2), BadLayer);
  auto single = random_episode(rng, 1, 2, 32);
  for (const auto& r : attention_scores(m, single.view(), 1)) CHECK(r[0] == 1.0);
}

TEST_CASE("cached references give the same predictions") {
  Rng rng(8);
  Model<double> m(ModelConfig{}, 12);
  auto e = random_episode(rng, 16, 5, 32);
  const EpisodeView v = e.view();
  auto cache = m.onboard(v.ref_images, v.ref_rotations);
  auto cached = m.predict_rot6d_cached(cache, v.query_images);
  auto full = predict(m, e);
  REQUIRE(cached.numel() == full.size());
  auto onboarded = m.predict_rot6d_onboarded(cache, v.query_images);
  for (std::size_t i = 0; i < full.size(); ++i) {
    CHECK(std::abs(cached.at(i) - full[i]) <= 1e-9);
    CHECK(std::abs(onboarded.at(i) - full[i]) <= 1e-12);
  }

  ModelConfig fc;
  fc.attention = AttentionMask::kFull;
  Model<double> mf(fc, 1);
  auto full_cache = mf.onboard(v.ref_images, v.ref_rotations);
  CHECK(full_cache.keys.empty());
  CHECK_THROWS_AS(mf.predict_rot6d_cached(full_cache, v.query_images), ConfigError);
  auto a = mf.predict_rot6d_onboarded(full_cache, v.query_images);
  auto b = predict(mf, e);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(std::abs(a.at(i) - b[i]) <= 1e-12);
}

TEST_CASE("full micro-model loss passes grad_check") {
  ModelConfig c;
  c.d = 16;
  c.encoder_channels = {4, 8};
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.rot_hidden = 8;
  c.head_hidden = 8;
  c.crop = 8;
  Model<double> m(c, 13);
  Rng rng(9);
  auto e = random_episode(rng, 2, 1, 8);
  const EpisodeView v = e.view();
  const auto target = rotations_to_rot6d<double>(std::vector{so3::random_rotation(rng)});
  std::vector<Tensor<double>> inputs;
  for (const auto& p : m.params()) inputs.push_back(p.tensor);
  auto r = ag::grad_check(
      [&] { return ag::mse(m.predict_rot6d(std::span<const EpisodeView>(&v, 1)), target); }, inputs, 1e-5,
      1e-3);
  INFO("worst input " << m.params()[r.worst_input].name << " analytic " << r.analytic << " numeric "
                      << r.numeric);
  CHECK(r.max_rel_error <= 1e-3);
}
