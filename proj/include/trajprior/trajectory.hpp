#pragma once

#include <array>
#include <cstddef>

#include "trajprior/metrics.hpp"

namespace trajprior {

struct Waypoint {
    double t = 0.0;  // s
    double x = 0.0;  // m, forward
    double y = 0.0;  // m, left
    double v = 0.0;  // km/h
    friend bool operator==(const Waypoint&, const Waypoint&) = default;
};

/// Six future waypoints at 0.5 s spacing in the ego frame.
struct TrajectoryAnnotation {
    std::array<Waypoint, kFutureSteps> waypoints{};

    /// Throws FormatError unless timestamps are 0.5, 1.0, ... 3.0 and v >= 0.
    void validate() const;
    std::array<Point2, kFutureSteps> points() const;
    friend bool operator==(const TrajectoryAnnotation&, const TrajectoryAnnotation&) = default;
};

/// Constant-velocity continuation: x = vx t, y = vy t, speed in km/h.
TrajectoryAnnotation constant_velocity_trajectory(double vx, double vy);

inline constexpr double kMpsToKmh = 3.6;

} // namespace trajprior
