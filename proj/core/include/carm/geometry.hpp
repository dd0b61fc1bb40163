#pragma once

#include <cmath>

namespace carm {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend Vec3 operator*(Vec3 a, double s) { return s * a; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }

// Detector-centre position in world millimetres. The world origin is the
// top-right corner of the phantom volume: x runs from the patient's right to
// left, y from superior to inferior, z from anterior to posterior.
struct CarmPose {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const CarmPose&, const CarmPose&) = default;
};

inline Vec3 to_vec(const CarmPose& p) { return {p.x, p.y, p.z}; }

struct Ray {
  Vec3 origin;
  Vec3 direction;
};

}  // namespace carm
