#include "egrot/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "egrot/error.hpp"

namespace egrot::synth {

namespace {

using so3::Vec3;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 mul(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

constexpr double kAmbient = 0.35;
constexpr int kSupersample = 4;
constexpr double kFillFraction = 0.8;
constexpr int kNoiseLattice = 5;

Rgb hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Appends a triangle, flipping its winding if needed so the normal points away
// from `inside`.
void push_oriented(std::vector<Triangle>& out, Vec3 a, Vec3 b, Vec3 c, const Vec3& inside,
                   const Rgb& color) {
  const Vec3 n = cross(sub(b, a), sub(c, a));
  const Vec3 centroid = mul(add(add(a, b), c), 1.0 / 3.0);
  if (dot(n, sub(centroid, inside)) < 0) std::swap(b, c);
  out.push_back(Triangle{{a, b, c}, color});
}

void add_cuboid(std::vector<Triangle>& out, Rng& rng, const Vec3& center,
                const so3::RotationMatrix& orient, const Rgb& color) {
  const Vec3 half{rng.uniform(0.15, 0.5), rng.uniform(0.15, 0.5), rng.uniform(0.15, 0.5)};
  std::array<Vec3, 8> corners;
  for (int i = 0; i < 8; ++i) {
    const Vec3 local{(i & 1 ? 1 : -1) * half[0], (i & 2 ? 1 : -1) * half[1],
                     (i & 4 ? 1 : -1) * half[2]};
    corners[i] = add(center, orient.apply(local));
  }
  // Each face as four corner indices in cyclic order.
  static constexpr int kFaces[6][4] = {{0, 1, 3, 2}, {4, 5, 7, 6}, {0, 1, 5, 4},
                                       {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 3, 7, 5}};
  for (const auto& f : kFaces) {
    push_oriented(out, corners[f[0]], corners[f[1]], corners[f[2]], center, color);
    push_oriented(out, corners[f[0]], corners[f[2]], corners[f[3]], center, color);
  }
}

void add_tetrahedron(std::vector<Triangle>& out, Rng& rng, const Vec3& center, const Rgb& color) {
  std::array<Vec3, 4> p;
  for (;;) {
    for (auto& q : p) {
      Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
      const double n = norm(dir);
      if (n < 1e-9) dir = {1, 0, 0};
      q = add(center, mul(dir, rng.uniform(0.3, 0.6) / std::max(n, 1e-9)));
    }
    const double volume = std::abs(dot(sub(p[1], p[0]), cross(sub(p[2], p[0]), sub(p[3], p[0])))) / 6;
    if (volume > 0.01) break;
  }
  const Vec3 inside = mul(add(add(p[0], p[1]), add(p[2], p[3])), 0.25);
  push_oriented(out, p[0], p[1], p[2], inside, color);
  push_oriented(out, p[0], p[1], p[3], inside, color);
  push_oriented(out, p[0], p[2], p[3], inside, color);
  push_oriented(out, p[1], p[2], p[3], inside, color);
}

ProceduralObject generate_candidate(std::uint64_t seed, Rng& rng) {
  ProceduralObject obj;
  obj.seed = seed;
  obj.id = splitmix64(seed ^ 0x45475244ULL);

  const int n_parts = 3 + static_cast<int>(rng.below(4));
  const double base_hue = rng.uniform();
  for (int part = 0; part < n_parts; ++part) {
    const Vec3 center{rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45)};
    // Spread hues around the wheel so parts stay distinguishable.
    const double hue = base_hue + (part + rng.uniform(-0.25, 0.25)) / n_parts;
    const Rgb color = hsv_to_rgb(hue, rng.uniform(0.55, 1.0), rng.uniform(0.65, 1.0));
    const bool want_cuboid = rng.uniform() < 0.6;
    const std::size_t remaining_parts = static_cast<std::size_t>(n_parts - part - 1);
    const bool fits_cuboid = obj.triangles.size() + 12 + 4 * remaining_parts <= kMaxTriangles;
    if (want_cuboid && fits_cuboid) {
      add_cuboid(obj.triangles, rng, center, so3::random_rotation(rng), color);
    } else {
      add_tetrahedron(obj.triangles, rng, center, color);
    }
  }

  // Center on the bounding box and scale into the unit sphere.
  Vec3 lo{1e9, 1e9, 1e9}, hi{-1e9, -1e9, -1e9};
  for (const auto& t : obj.triangles) {
    for (const auto& v : t.v) {
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(lo[k], v[k]);
        hi[k] = std::max(hi[k], v[k]);
      }
    }
  }
  const Vec3 mid = mul(add(lo, hi), 0.5);
  double radius = 0.0;
  for (const auto& t : obj.triangles) {
    for (const auto& v : t.v) radius = std::max(radius, norm(sub(v, mid)));
  }
  for (auto& t : obj.triangles) {
    for (auto& v : t.v) v = mul(sub(v, mid), 1.0 / radius);
  }
  obj.bounding_radius = 1.0;
  return obj;
}

double value_noise(const std::vector<double>& lattice, double u, double v) {
  const double gx = u * (kNoiseLattice - 1), gy = v * (kNoiseLattice - 1);
  const int x0 = std::min(static_cast<int>(gx), kNoiseLattice - 2);
  const int y0 = std::min(static_cast<int>(gy), kNoiseLattice - 2);
  const double fx = gx - x0, fy = gy - y0;
  auto at = [&](int x, int y) { return lattice[static_cast<std::size_t>(y) * kNoiseLattice + x]; };
  const double top = at(x0, y0) * (1 - fx) + at(x0 + 1, y0) * fx;
  const double bottom = at(x0, y0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1) * fx;
  return top * (1 - fy) + bottom * fy;
}

}  // namespace

float quantize_u8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

BackgroundPolicy parse_background_policy(const std::string& name) {
  if (name == "black") return BackgroundPolicy::kBlack;
  if (name == "solid") return BackgroundPolicy::kRandomSolid;
  if (name == "noise") return BackgroundPolicy::kNoise;
  throw ConfigError("unknown background policy '" + name + "' (expected black|solid|noise)");
}

std::string to_string(BackgroundPolicy policy) {
  switch (policy) {
    case BackgroundPolicy::kBlack: return "black";
    case BackgroundPolicy::kRandomSolid: return "solid";
    case BackgroundPolicy::kNoise: return "noise";
  }
  return "black";
}

const std::vector<so3::RotationMatrix>& cube_group() {
  static const std::vector<so3::RotationMatrix> group = [] {
    std::vector<so3::RotationMatrix> out;
    const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (const auto& p : perms) {
      for (int signs = 0; signs < 8; ++signs) {
        std::array<double, 9> m{};
        for (int r = 0; r < 3; ++r) m[r * 3 + p[r]] = (signs >> r) & 1 ? -1.0 : 1.0;
        so3::RotationMatrix g(m);
        if (g.determinant() > 0) out.push_back(g);
      }
    }
    // perms[0] with signs 0 is the identity and is emitted first.
    return out;
  }();
  return group;
}

double asymmetry_score(const ProceduralObject& obj) {
  std::vector<Vec3> verts;
  for (const auto& t : obj.triangles) {
    for (const auto& v : t.v) verts.push_back(v);
  }
  const auto& group = cube_group();
  double score = std::numeric_limits<double>::infinity();
  for (std::size_t gi = 1; gi < group.size(); ++gi) {
    double total = 0.0;
    for (const auto& v : verts) {
      const Vec3 gv = group[gi].apply(v);
      double best = std::numeric_limits<double>::infinity();
      for (const auto& w : verts) best = std::min(best, norm(sub(gv, w)));
      total += best;
    }
    score = std::min(score, total / static_cast<double>(verts.size()) / obj.bounding_radius);
  }
  return score;
}

ProceduralObject generate_object(std::uint64_t seed) {
  for (int attempt = 0; attempt < kMaxGenerationTries; ++attempt) {
    Rng rng(derive_seed({seed, static_cast<std::uint64_t>(attempt)}));
    ProceduralObject obj = generate_candidate(seed, rng);
    if (asymmetry_score(obj) >= kAsymmetryThreshold) return obj;
  }
  throw GeneratorFailure("generate_object: no asymmetric candidate for seed " +
                         std::to_string(seed) + " after " + std::to_string(kMaxGenerationTries) +
                         " tries");
}

Image render(const ProceduralObject& obj, const so3::RotationMatrix& r, int size,
             const BackgroundSpec& bg) {
  const int hi = size * kSupersample;
  const std::size_t n_samples = static_cast<std::size_t>(hi) * hi;
  std::vector<double> depth(n_samples, -std::numeric_limits<double>::infinity());
  std::vector<Rgb> shade(n_samples, Rgb{0, 0, 0});

  const double center = hi / 2.0;
  const double scale = kFillFraction * hi / 2.0 / obj.bounding_radius;

  for (const auto& tri : obj.triangles) {
    std::array<Vec3, 3> p;
    std::array<double, 3> sx, sy;
    for (int k = 0; k < 3; ++k) {
      p[k] = r.apply(tri.v[k]);
      sx[k] = center + p[k][0] * scale;
      sy[k] = center - p[k][1] * scale;
    }
    Vec3 n = cross(sub(p[1], p[0]), sub(p[2], p[0]));
    const double nn = norm(n);
    if (nn < 1e-15) continue;
    const double lambert = std::max(0.0, n[2] / nn);
    const double intensity = kAmbient + (1.0 - kAmbient) * lambert;

    const double area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sy[1] - sy[0]) * (sx[2] - sx[0]);
    if (std::abs(area) < 1e-12) continue;

    const int x0 = std::max(0, static_cast<int>(std::floor(std::min({sx[0], sx[1], sx[2]}))));
    const int x1 = std::min(hi - 1, static_cast<int>(std::ceil(std::max({sx[0], sx[1], sx[2]}))));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min({sy[0], sy[1], sy[2]}))));
    const int y1 = std::min(hi - 1, static_cast<int>(std::ceil(std::max({sy[0], sy[1], sy[2]}))));
    for (int y = y0; y <= y1; ++y) {
      const double py = y + 0.5;
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5;
        const double w0 = ((sx[1] - px) * (sy[2] - py) - (sy[1] - py) * (sx[2] - px)) / area;
        const double w1 = ((sx[2] - px) * (sy[0] - py) - (sy[2] - py) * (sx[0] - px)) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double z = w0 * p[0][2] + w1 * p[1][2] + w2 * p[2][2];
        const std::size_t idx = static_cast<std::size_t>(y) * hi + x;
        if (z > depth[idx]) {
          depth[idx] = z;
          shade[idx] = {tri.color[0] * intensity, tri.color[1] * intensity,
                        tri.color[2] * intensity};
        }
      }
    }
  }

  std::array<std::vector<double>, 3> lattice;
  if (bg.kind == BackgroundSpec::Kind::kNoise) {
    Rng rng(bg.seed);
    for (auto& channel : lattice) {
      channel.resize(kNoiseLattice * kNoiseLattice);
      for (double& v : channel) v = rng.uniform();
    }
  }

  Image img(size, size);
  const double inv = 1.0 / (kSupersample * kSupersample);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Rgb back = bg.color;
      if (bg.kind == BackgroundSpec::Kind::kNoise) {
        const double u = (x + 0.5) / size, v = (y + 0.5) / size;
        for (int c = 0; c < 3; ++c) back[c] = value_noise(lattice[c], u, v);
      }
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < kSupersample; ++sy) {
        for (int sx = 0; sx < kSupersample; ++sx) {
          const std::size_t idx =
              static_cast<std::size_t>(y * kSupersample + sy) * hi + (x * kSupersample + sx);
          const Rgb& src = std::isfinite(depth[idx]) ? shade[idx] : back;
          for (int c = 0; c < 3; ++c) acc[c] += src[c];
        }
      }
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = quantize_u8(acc[c] * inv);
    }
  }
  return img;
}

Episode make_episode(const ProceduralObject& obj, std::size_t n_ref, std::size_t n_query, Rng& rng,
                     BackgroundPolicy bg_policy, int size) {
  if (n_ref < 1 || n_query < 1) {
    throw BadCount("make_episode: need at least one reference and one query");
  }
  auto draw_background = [&]() -> BackgroundSpec {
    switch (bg_policy) {
      case BackgroundPolicy::kBlack: return BackgroundSpec::solid({0, 0, 0});
      case BackgroundPolicy::kRandomSolid:
        return BackgroundSpec::solid({rng.uniform(), rng.uniform(), rng.uniform()});
      case BackgroundPolicy::kNoise: return BackgroundSpec::noise(rng.next_u64());
    }
    return BackgroundSpec::solid({0, 0, 0});
  };
  Episode ep;
  ep.object_id = obj.id;
  auto fill = [&](std::vector<View>& views, std::size_t n) {
    views.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const so3::RotationMatrix rot = so3::random_rotation(rng);
      const BackgroundSpec bg = draw_background();
      views.push_back(View{render(obj, rot, size, bg), rot});
    }
  };
  fill(ep.references, n_ref);
  fill(ep.queries, n_query);
  return ep;
}

}  // namespace egrot::synth
