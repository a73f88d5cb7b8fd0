#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "mhcl/angles.hpp"

namespace mhcl {

using SourceId = std::int32_t;

enum class SourceKind : std::uint8_t { agent, anchor };

// Planar pose. theta is kept in (-pi, pi].
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(theta);
  }
};

// Full kinematic state of one agent: position, body-frame velocity, heading.
struct AgentState {
  double x = 0.0;
  double y = 0.0;
  double v_x = 0.0;
  double v_y = 0.0;
  double theta = 0.0;

  Pose pose() const { return Pose{x, y, theta}; }

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(v_x) &&
           std::isfinite(v_y) && std::isfinite(theta);
  }
};

struct ImuInput {
  double a_x = 0.0;
  double a_y = 0.0;
  double omega = 0.0;

  bool finite() const {
    return std::isfinite(a_x) && std::isfinite(a_y) && std::isfinite(omega);
  }
};

// Range / angle-of-arrival / angle-of-departure relative measurement.
struct RfMeasurement {
  SourceId source_id = -1;
  double range = 0.0;
  double aoa = 0.0;
  double aod = 0.0;
  SourceKind source_kind = SourceKind::agent;
};

// Additive adversarial offset injected into relative position quantities.
struct AttackSignal {
  double eps_x = 0.0;
  double eps_y = 0.0;

  bool zero() const { return eps_x == 0.0 && eps_y == 0.0; }
};

// Diagonal noise parameterization shared by the filter and the simulator.
struct NoiseConfig {
  // Per-step process variances [x, y, v_x, v_y, theta].
  std::array<double, 5> process_diag{0.5, 0.5, 1e-4, 1e-4, M_PI / 1800.0};
  // IMU reading variances [a_x, a_y, omega].
  std::array<double, 3> imu_diag{1e-3, 1e-3, 2e-5};
  // RF measurement variances [range, aoa, aod].
  std::array<double, 3> rf_diag{1.0, M_PI / 360.0, M_PI / 360.0};
  double sampling_period = 0.1;

  void check() const {
    for (double v : process_diag)
      if (!(v > 0.0)) throw std::invalid_argument("process variance must be > 0");
    for (double v : imu_diag)
      if (!(v > 0.0)) throw std::invalid_argument("imu variance must be > 0");
    for (double v : rf_diag)
      if (!(v > 0.0)) throw std::invalid_argument("rf variance must be > 0");
    if (!(sampling_period > 0.0))
      throw std::invalid_argument("sampling period must be > 0");
  }
};

}  // namespace mhcl
