#include "egrot/so3.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "egrot/error.hpp"

namespace egrot::so3 {

namespace {

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

}  // namespace

RotationMatrix RotationMatrix::from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
  return RotationMatrix({c0[0], c1[0], c2[0], c0[1], c1[1], c2[1], c0[2], c1[2], c2[2]});
}

RotationMatrix RotationMatrix::transposed() const {
  return RotationMatrix({m_[0], m_[3], m_[6], m_[1], m_[4], m_[7], m_[2], m_[5], m_[8]});
}

double RotationMatrix::determinant() const {
  return m_[0] * (m_[4] * m_[8] - m_[5] * m_[7]) - m_[1] * (m_[3] * m_[8] - m_[5] * m_[6]) +
         m_[2] * (m_[3] * m_[7] - m_[4] * m_[6]);
}

Vec3 RotationMatrix::apply(const Vec3& v) const {
  return {m_[0] * v[0] + m_[1] * v[1] + m_[2] * v[2], m_[3] * v[0] + m_[4] * v[1] + m_[5] * v[2],
          m_[6] * v[0] + m_[7] * v[1] + m_[8] * v[2]};
}

RotationMatrix operator*(const RotationMatrix& a, const RotationMatrix& b) {
  RotationMatrix out;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      out(r, c) = a(r, 0) * b(0, c) + a(r, 1) * b(1, c) + a(r, 2) * b(2, c);
    }
  }
  return out;
}

double orthonormality_error(const RotationMatrix& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += m(k, i) * m(k, j);
      worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

double determinant_error(const RotationMatrix& m) { return std::abs(m.determinant() - 1.0); }

bool is_rotation(const RotationMatrix& m, double tol) {
  for (double x : m.data()) {
    if (!std::isfinite(x)) return false;
  }
  return orthonormality_error(m) <= tol && determinant_error(m) <= tol;
}

Rot6D rot6d_from_matrix(const RotationMatrix& r) {
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

RotationMatrix project_so3(const Rot6D& v) {
  const Vec3 u{v[0], v[1], v[2]};
  const Vec3 w{v[3], v[4], v[5]};
  const double nu = std::sqrt(dot(u, u));
  if (!(nu > kDegenerateNorm)) {
    throw DegenerateInput("project_so3: first column has norm " + std::to_string(nu));
  }
  const Vec3 a1{u[0] / nu, u[1] / nu, u[2] / nu};
  const double proj = dot(a1, w);
  const Vec3 res{w[0] - proj * a1[0], w[1] - proj * a1[1], w[2] - proj * a1[2]};
  const double nr = std::sqrt(dot(res, res));
  if (!(nr > kDegenerateNorm)) {
    throw DegenerateInput("project_so3: second column is collinear with the first (residual norm " +
                          std::to_string(nr) + ")");
  }
  const Vec3 a2{res[0] / nr, res[1] / nr, res[2] / nr};
  return RotationMatrix::from_columns(a1, a2, cross(a1, a2));
}

double geodesic_angle(const RotationMatrix& a, const RotationMatrix& b) {
  // Equals acos(clamp((trace(R) - 1) / 2)) for R = AᵀB, but takes sin θ from the
  // skew part of R so the result keeps full precision near 0 and π.
  const RotationMatrix r = a.transposed() * b;
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double sx = r(2, 1) - r(1, 2), sy = r(0, 2) - r(2, 0), sz = r(1, 0) - r(0, 1);
  const double s = 0.5 * std::sqrt(sx * sx + sy * sy + sz * sz);
  return std::atan2(s, c);
}

double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

RotationMatrix rot_x(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return RotationMatrix({1, 0, 0, 0, c, -s, 0, s, c});
}

RotationMatrix rot_y(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return RotationMatrix({c, 0, s, 0, 1, 0, -s, 0, c});
}

RotationMatrix rot_z(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return RotationMatrix({c, -s, 0, s, c, 0, 0, 0, 1});
}

RotationMatrix axis_angle(const Vec3& axis, double t) {
  const double n = std::sqrt(dot(axis, axis));
  if (!(n > kDegenerateNorm)) throw DegenerateInput("axis_angle: zero axis");
  const double h = 0.5 * t;
  const double s = std::sin(h) / n;
  return quaternion_to_matrix(std::cos(h), axis[0] * s, axis[1] * s, axis[2] * s);
}

RotationMatrix quaternion_to_matrix(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > kDegenerateNorm)) throw DegenerateInput("quaternion_to_matrix: zero quaternion");
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  return RotationMatrix({1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)});
}

RotationMatrix random_rotation(Rng& rng) {
  for (;;) {
    const double w = rng.normal(), x = rng.normal(), y = rng.normal(), z = rng.normal();
    if (w * w + x * x + y * y + z * z > 1e-12) return quaternion_to_matrix(w, x, y, z);
  }
}

std::vector<std::size_t> fps_select(std::span<const RotationMatrix> rots, std::size_t k) {
  if (k < 1 || k > rots.size()) {
    throw BadCount("fps_select: k=" + std::to_string(k) + " outside [1, " +
                   std::to_string(rots.size()) + "]");
  }
  std::vector<std::size_t> picks{0};
  picks.reserve(k);
  std::vector<double> min_dist(rots.size(), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(rots.size(), false);
  taken[0] = true;
  while (picks.size() < k) {
    const RotationMatrix& last = rots[picks.back()];
    std::size_t best = rots.size();
    double best_dist = -1.0;
    for (std::size_t i = 0; i < rots.size(); ++i) {
      if (taken[i]) continue;
      min_dist[i] = std::min(min_dist[i], geodesic_angle(last, rots[i]));
      // Strict comparison keeps the lowest index on ties.
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    taken[best] = true;
    picks.push_back(best);
  }
  return picks;
}

RotationSet apply_shared_rotation(std::span<const RotationMatrix> rots, const RotationMatrix& r) {
  RotationSet out;
  out.reserve(rots.size());
  for (const auto& item : rots) out.push_back(item * r);
  return out;
}

}  // namespace egrot::so3
