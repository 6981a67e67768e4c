#pragma once

#include <cmath>

namespace flowsim {

/// Point or vector in body coordinates, centimetres.
/// x: left-right, y: head-toe, z: anterior(+)/posterior(-).
struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    constexpr bool operator==(const Vec3&) const = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }

constexpr Vec3 lerp(const Vec3& a, const Vec3& b, double t) { return a + (b - a) * t; }

}  // namespace flowsim
