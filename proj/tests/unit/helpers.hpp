#pragma once

#include <complex>
#include <random>
#include <vector>

#include "trajprior/gradcheck.hpp"
#include "trajprior/tape.hpp"
#include "trajprior/tensor.hpp"

namespace testutil {

template <typename Real = double>
trajprior::BasicTensor<Real> random_tensor(trajprior::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    trajprior::BasicTensor<Real> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(u(rng));
    return t;
}

// Reduce a tensor node to a scalar with fixed random weights so every output
// component reaches the loss with a distinct coefficient.
inline trajprior::NodeId weighted_sum(trajprior::Tape<double>& tape, trajprior::NodeId x, std::uint64_t seed) {
    auto w = random_tensor<double>(tape.shape(x), seed);
    return tape.sum(tape.mul(x, tape.constant(w)));
}

// Naive O(P^4) DFT, the oracle for fft2d.
inline std::vector<std::complex<double>> naive_dft2(const std::vector<double>& x, std::size_t P) {
    std::vector<std::complex<double>> out(P * P);
    const double two_pi = 2.0 * 3.14159265358979323846;
    for (std::size_t u = 0; u < P; ++u) {
        for (std::size_t v = 0; v < P; ++v) {
            std::complex<double> acc = 0.0;
            for (std::size_t m = 0; m < P; ++m) {
                for (std::size_t n = 0; n < P; ++n) {
                    const double ang = -two_pi * (static_cast<double>(u * m) / P + static_cast<double>(v * n) / P);
                    acc += x[m * P + n] * std::complex<double>(std::cos(ang), std::sin(ang));
                }
            }
            out[u * P + v] = acc;
        }
    }
    return out;
}

inline double check(trajprior::Tape<double>& tape, trajprior::NodeId loss,
                    const std::map<std::string, trajprior::BasicTensor<double>>& inputs = {}, std::size_t sample = 0,
                    std::uint64_t seed = 0) {
    trajprior::GradCheckOptions o;
    o.max_components_per_parameter = sample;
    o.seed = seed;
    return trajprior::finite_diff_check(tape, loss, inputs, o).max_rel_error;
}

} // namespace testutil
