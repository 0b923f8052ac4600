#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "egrot/rng.hpp"
#include "egrot/so3.hpp"

namespace egrot::synth {

using Rgb = std::array<double, 3>;

struct Triangle {
  // Counter-clockwise seen from outside, so (v1 - v0) x (v2 - v0) is the outward normal.
  std::array<so3::Vec3, 3> v;
  Rgb color;

  friend bool operator==(const Triangle&, const Triangle&) = default;
};

struct ProceduralObject {
  std::uint64_t seed = 0;
  std::uint64_t id = 0;
  std::vector<Triangle> triangles;
  double bounding_radius = 1.0;

  friend bool operator==(const ProceduralObject&, const ProceduralObject&) = default;
};

inline constexpr std::size_t kMinTriangles = 12;
inline constexpr std::size_t kMaxTriangles = 60;
inline constexpr double kAsymmetryThreshold = 0.15;
inline constexpr int kMaxGenerationTries = 100;

// Interleaved RGB, row-major, values in [0, 1]. Renderer output is quantized to
// multiples of 1/255 so the 8-bit dataset encoding is lossless.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0.0f) {}

  float& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

float quantize_u8(double v);

struct BackgroundSpec {
  enum class Kind { kSolid, kNoise };
  Kind kind = Kind::kSolid;
  Rgb color{0.0, 0.0, 0.0};
  std::uint64_t seed = 0;

  static BackgroundSpec solid(const Rgb& c) { return {Kind::kSolid, c, 0}; }
  static BackgroundSpec noise(std::uint64_t s) { return {Kind::kNoise, {0, 0, 0}, s}; }
};

// How make_episode draws a background for each view.
enum class BackgroundPolicy { kBlack, kRandomSolid, kNoise };

BackgroundPolicy parse_background_policy(const std::string& name);
std::string to_string(BackgroundPolicy policy);

struct View {
  Image image;
  so3::RotationMatrix rotation;

  friend bool operator==(const View&, const View&) = default;
};

struct Episode {
  std::uint64_t object_id = 0;
  std::vector<View> references;
  std::vector<View> queries;

  friend bool operator==(const Episode&, const Episode&) = default;
};

// Minimum over the 23 non-identity rotations of the cube group of the mean
// distance from each rotated vertex to the nearest original vertex. Zero for a
// shape symmetric under one of those rotations.
double asymmetry_score(const ProceduralObject& obj);

// The 24 proper rotations mapping the axis-aligned cube onto itself; index 0 is I.
const std::vector<so3::RotationMatrix>& cube_group();

ProceduralObject generate_object(std::uint64_t seed);

// Orthographic render, camera on +z looking down -z, headlight along the view
// axis, object radius mapped to 40% of the crop width.
Image render(const ProceduralObject& obj, const so3::RotationMatrix& r, int size,
             const BackgroundSpec& bg);

Episode make_episode(const ProceduralObject& obj, std::size_t n_ref, std::size_t n_query,
                     Rng& rng, BackgroundPolicy bg_policy, int size);

}  // namespace egrot::synth
