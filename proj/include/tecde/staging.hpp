#pragma once

#include <cmath>
#include <numbers>

namespace tecde::sim {

inline constexpr double kMaxDiameter = 13.0;   // cm
inline constexpr double kMaxVolume = 1150.0;   // cm^3

// Spherical tumor: volume = pi/6 * d^3.
inline double volume_of_diameter(double d) { return std::numbers::pi / 6.0 * d * d * d; }
inline double diameter_of_volume(double v) { return std::cbrt(6.0 * v / std::numbers::pi); }

// AJCC stage index from diameter (cm):
//   0: d <= 3 (S1A, also fully regressed tumors)
//   1: 3 < d <= 4 (S1B)
//   2: 4 < d <= 5 (S2)
//   3: d > 5 (S3 and S4)
// Throws ArgumentError on negative input.
int stage_of_diameter(double d);

inline constexpr int kNumStages = 4;

}  // namespace tecde::sim
