#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "trajprior/tape.hpp"

namespace trajprior {

inline constexpr std::size_t kFutureSteps = 6;  // 0.5 s .. 3.0 s

struct Point2 {
    double x = 0.0, y = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

struct TrajectoryPair {
    std::array<Point2, kFutureSteps> predicted{};
    std::array<Point2, kFutureSteps> truth{};
};

enum class Protocol { NoAvg, TemAvg };

Protocol parse_protocol(const std::string& name);
const char* protocol_name(Protocol p);

/// (value at 1 s, 2 s, 3 s, mean of the three).
struct HorizonScores {
    double h1 = 0.0, h2 = 0.0, h3 = 0.0, avg = 0.0;
};

std::array<double, kFutureSteps> per_step_l2(const TrajectoryPair& pair);

/// NoAvg: horizon k s reads step 2k (steps 1..6 at 0.5 s). TemAvg: mean of
/// steps 1..2k. avg is the mean of the three horizon values.
HorizonScores l2_at_horizons(const std::array<double, kFutureSteps>& l, Protocol protocol);
HorizonScores collision_at_horizons(const std::array<int, kFutureSteps>& series, Protocol protocol);

/// Axis-aligned box in the ego frame (x forward, y left), meters.
struct Box {
    double cx = 0.0, cy = 0.0, length = 4.0, width = 1.8;
};

/// Indicator per step: an ego box of the given size centred on each
/// predicted waypoint overlaps the obstacle box. Synthetic-data helper.
std::array<int, kFutureSteps> collision_series(const std::array<Point2, kFutureSteps>& predicted, const Box& obstacle,
                                               double ego_length = 4.0, double ego_width = 1.8);

struct EvalRow {
    Protocol protocol;
    HorizonScores l2;
    HorizonScores collision;  // percent
};

/// Dataset-level report: per-sample horizon scores averaged over samples;
/// collision rates reported in percent.
EvalRow evaluate_dataset(const std::vector<TrajectoryPair>& pairs,
                         const std::vector<std::array<int, kFutureSteps>>& collisions, Protocol protocol);
std::string eval_csv(const std::vector<EvalRow>& rows);

// --- Losses ---------------------------------------------------------------

struct StageASample {
    int alpha = 0, beta = 0, gamma = 0;   // task indicators in {0, 1}
    std::vector<double> probs;            // pi over K classes
    std::vector<double> one_hot;          // eta
    std::array<double, 3> size{}, size_hat{};
    double distance = 0.0, distance_hat = 0.0;
};

struct StageBSample {
    // (x, y, v) at horizons 1, 2, 3 s; predicted and ground truth.
    std::array<std::array<double, 3>, 3> predicted{};
    std::array<std::array<double, 3>, 3> truth{};
};

/// Multi-task loss: (1/B) sum_t [alpha CE + beta (1/3) sum_m (s - s^)^2 + gamma (d - d^)^2],
/// probabilities clamped to >= 1e-12 before the log.
double stage_a_loss(const std::vector<StageASample>& batch);
/// Mean over batch and horizons of (dx^2 + dy^2 + dv^2).
double trajectory_regression_loss(const std::vector<StageBSample>& batch);

/// Tape versions: predictions are parameters named "probs", "size", "distance"
/// (stage A) and "pred" (stage B), so their gradients come out of backpropagate.
template <typename Real>
NodeId build_stage_a_loss(Tape<Real>& tape, const std::vector<StageASample>& batch);
template <typename Real>
NodeId build_regression_loss(Tape<Real>& tape, const std::vector<StageBSample>& batch);

void validate_stage_a(const StageASample& s);

} // namespace trajprior
