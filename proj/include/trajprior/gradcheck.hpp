#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "trajprior/tape.hpp"

namespace trajprior {

struct GradCheckOptions {
    double step = 1e-3;
    // Step is divided by 10 (down to min_step) while the probe disagrees;
    // probes that flip a piecewise branch (ReLU sign, clamp, negative
    // selection) do not count.
    double min_step = 1e-7;
    // Relative error is |a - n| / max(|a|, |n|, floor). Dead units have a true
    // gradient of zero, where the central difference is pure roundoff.
    double denominator_floor = 1e-8;
    // 0 = check every component; otherwise a seeded sample per parameter.
    std::size_t max_components_per_parameter = 0;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t components_checked = 0;
    std::size_t kink_skips = 0;  // components where no kink-free step was found
};

/// Compares backpropagate() against central differences for every trainable
/// parameter of a double-precision tape. Relative error uses the
/// denominator max(|analytic|, |numeric|, 1e-8). Running-stat updates are
/// suspended for the duration of the check and leaf values are restored.
GradCheckReport finite_diff_check(Tape<double>& tape, NodeId loss, const std::map<std::string, BasicTensor<double>>& inputs,
                                  const GradCheckOptions& options = {});

inline double finite_diff_check(Tape<double>& tape, NodeId loss, double step) {
    GradCheckOptions o;
    o.step = step;
    return finite_diff_check(tape, loss, {}, o).max_rel_error;
}

} // namespace trajprior
