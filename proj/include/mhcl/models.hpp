#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "mhcl/types.hpp"

namespace mhcl {

using Matrix5d = Eigen::Matrix<double, 5, 5>;
using Vector5d = Eigen::Matrix<double, 5, 1>;
using Matrix36d = Eigen::Matrix<double, 3, 6>;

inline Vector5d to_vector(const AgentState& s) {
  Vector5d v;
  v << s.x, s.y, s.v_x, s.v_y, s.theta;
  return v;
}

inline AgentState to_state(const Vector5d& v) {
  return AgentState{v(0), v(1), v(2), v(3), v(4)};
}

// One step of the discrete motion model: position advances by the rotated
// body velocity, velocity and heading integrate the IMU input directly.
inline AgentState propagate_state(const AgentState& state, const ImuInput& input,
                                  const NoiseConfig& noise) {
  if (!state.finite() || !input.finite())
    throw std::domain_error("propagate_state: non-finite state or input");
  if (!(noise.sampling_period > 0.0))
    throw std::invalid_argument("propagate_state: sampling period must be > 0");
  const double ts = noise.sampling_period;
  const double c = std::cos(state.theta);
  const double s = std::sin(state.theta);
  AgentState out;
  out.x = state.x + ts * (c * state.v_x - s * state.v_y);
  out.y = state.y + ts * (s * state.v_x + c * state.v_y);
  out.v_x = state.v_x + ts * input.a_x;
  out.v_y = state.v_y + ts * input.a_y;
  out.theta = wrap_angle(state.theta + ts * input.omega);
  return out;
}

// d propagate_state / d state, evaluated analytically.
inline Matrix5d propagation_jacobian(const AgentState& state, const ImuInput& input,
                                     double sampling_period) {
  if (!state.finite() || !input.finite() || !std::isfinite(sampling_period))
    throw std::domain_error("propagation_jacobian: non-finite input");
  const double ts = sampling_period;
  const double c = std::cos(state.theta);
  const double s = std::sin(state.theta);
  Matrix5d f = Matrix5d::Identity();
  f(0, 2) = ts * c;
  f(0, 3) = -ts * s;
  f(0, 4) = ts * (-s * state.v_x - c * state.v_y);
  f(1, 2) = ts * s;
  f(1, 3) = ts * c;
  f(1, 4) = ts * (c * state.v_x - s * state.v_y);
  return f;
}

// Range / AOA / AOD of `target` as seen by `observer`, with the adversarial
// offset applied to the relative position.
inline RfMeasurement predict_measurement(const Pose& observer, const Pose& target,
                                         const AttackSignal& eps = AttackSignal{}) {
  if (!observer.finite() || !target.finite())
    throw std::domain_error("predict_measurement: non-finite pose");
  const double dx = target.x - observer.x + eps.eps_x;
  const double dy = target.y - observer.y + eps.eps_y;
  const double r = std::hypot(dx, dy);
  if (r < 1e-12)
    throw std::domain_error("predict_measurement: coincident positions, bearing undefined");
  const double phi = std::atan2(dy, dx);
  RfMeasurement z;
  z.range = r;
  z.aoa = wrap_angle(M_PI + phi - observer.theta);
  z.aod = wrap_angle(phi - target.theta);
  return z;
}

// d (range, aoa, aod) / d (x_i, y_i, theta_i, x_j, y_j, theta_j), at eps = 0.
inline Matrix36d measurement_jacobian(const Pose& observer, const Pose& target) {
  const double dx = target.x - observer.x;
  const double dy = target.y - observer.y;
  const double r2 = dx * dx + dy * dy;
  const double r = std::sqrt(r2);
  if (r < 1e-12)
    throw std::domain_error("measurement_jacobian: zero range");
  Matrix36d h = Matrix36d::Zero();
  // range row
  h(0, 0) = -dx / r;
  h(0, 1) = -dy / r;
  h(0, 3) = dx / r;
  h(0, 4) = dy / r;
  // bearing terms shared by aoa and aod: d atan2(dy,dx) / d target position
  const double bx = -dy / r2;
  const double by = dx / r2;
  h(1, 0) = -bx;
  h(1, 1) = -by;
  h(1, 2) = -1.0;
  h(1, 3) = bx;
  h(1, 4) = by;
  h(2, 0) = -bx;
  h(2, 1) = -by;
  h(2, 3) = bx;
  h(2, 4) = by;
  h(2, 5) = -1.0;
  return h;
}

}  // namespace mhcl
