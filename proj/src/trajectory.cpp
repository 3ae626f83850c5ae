#include "trajprior/trajectory.hpp"

#include <cmath>

#include <fmt/format.h>

namespace trajprior {

void TrajectoryAnnotation::validate() const {
    for (std::size_t i = 0; i < kFutureSteps; ++i) {
        const Waypoint& w = waypoints[i];
        if (std::abs(w.t - 0.5 * static_cast<double>(i + 1)) > 1e-9) {
            throw FormatError(fmt::format("waypoint {} has timestamp {}, expected {}", i, w.t, 0.5 * (i + 1)));
        }
        if (!(w.v >= 0.0)) throw FormatError(fmt::format("waypoint {} has negative speed {}", i, w.v));
        if (!std::isfinite(w.x) || !std::isfinite(w.y)) throw FormatError("waypoint coordinates must be finite");
    }
}

std::array<Point2, kFutureSteps> TrajectoryAnnotation::points() const {
    std::array<Point2, kFutureSteps> p{};
    for (std::size_t i = 0; i < kFutureSteps; ++i) p[i] = {waypoints[i].x, waypoints[i].y};
    return p;
}

TrajectoryAnnotation constant_velocity_trajectory(double vx, double vy) {
    TrajectoryAnnotation a;
    const double speed = std::hypot(vx, vy) * kMpsToKmh;
    for (std::size_t i = 0; i < kFutureSteps; ++i) {
        const double t = 0.5 * static_cast<double>(i + 1);
        a.waypoints[i] = {t, vx * t, vy * t, speed};
    }
    return a;
}

} // namespace trajprior
