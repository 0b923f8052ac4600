#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "egrot/rng.hpp"

namespace egrot::so3 {

using Vec3 = std::array<double, 3>;

// 3x3 rotation matrix stored row-major. Construction does not validate;
// use `is_rotation` when the input is untrusted.
class RotationMatrix {
 public:
  RotationMatrix() : m_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}
  explicit RotationMatrix(const std::array<double, 9>& row_major) : m_(row_major) {}

  static RotationMatrix identity() { return RotationMatrix(); }
  static RotationMatrix from_columns(const Vec3& c0, const Vec3& c1, const Vec3& c2);

  double operator()(std::size_t r, std::size_t c) const { return m_[r * 3 + c]; }
  double& operator()(std::size_t r, std::size_t c) { return m_[r * 3 + c]; }

  const std::array<double, 9>& data() const { return m_; }
  Vec3 column(std::size_t c) const { return {m_[c], m_[3 + c], m_[6 + c]}; }

  RotationMatrix transposed() const;
  double trace() const { return m_[0] + m_[4] + m_[8]; }
  double determinant() const;

  Vec3 apply(const Vec3& v) const;

  friend RotationMatrix operator*(const RotationMatrix& a, const RotationMatrix& b);
  friend bool operator==(const RotationMatrix&, const RotationMatrix&) = default;

 private:
  std::array<double, 9> m_;
};

// Largest |(MᵀM − I)_ij| and |det M − 1|, the two quantities bounded by the
// RotationMatrix invariants.
double orthonormality_error(const RotationMatrix& m);
double determinant_error(const RotationMatrix& m);
bool is_rotation(const RotationMatrix& m, double tol = 1e-6);

// First and second columns, concatenated.
using Rot6D = std::array<double, 6>;

Rot6D rot6d_from_matrix(const RotationMatrix& r);

// Gram-Schmidt projection of an arbitrary 6-vector onto SO(3).
// Throws DegenerateInput when either column collapses (norm <= 1e-12).
RotationMatrix project_so3(const Rot6D& v);

inline constexpr double kDegenerateNorm = 1e-12;

// Angle of R1ᵀR2 in radians, in [0, π].
double geodesic_angle(const RotationMatrix& a, const RotationMatrix& b);

double deg2rad(double deg);
double rad2deg(double rad);

RotationMatrix rot_x(double radians);
RotationMatrix rot_y(double radians);
RotationMatrix rot_z(double radians);
RotationMatrix axis_angle(const Vec3& axis, double radians);

// Haar-uniform sample: normalized 4-Gaussian quaternion mapped to a matrix.
RotationMatrix random_rotation(Rng& rng);
RotationMatrix quaternion_to_matrix(double w, double x, double y, double z);

using RotationSet = std::vector<RotationMatrix>;

// Greedy farthest-point sampling under geodesic_angle. Starts at index 0,
// ties go to the lowest index. Throws BadCount unless 1 <= k <= rots.size().
std::vector<std::size_t> fps_select(std::span<const RotationMatrix> rots, std::size_t k);

// Right-multiplies every element by `r`; relative rotations R_i R_jᵀ are kept.
RotationSet apply_shared_rotation(std::span<const RotationMatrix> rots, const RotationMatrix& r);

}  // namespace egrot::so3
