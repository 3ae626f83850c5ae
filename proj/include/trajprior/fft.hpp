#pragma once

#include <cstddef>
#include <span>

#include "trajprior/tensor.hpp"

namespace trajprior {

constexpr bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

/// Unnormalized forward 2D DFT of a real P x P patch (row-major) via
/// radix-2 Cooley-Tukey on rows then columns. Butterflies run in double and
/// the spectrum is rounded to float once at the end.
/// Throws DimensionError unless P is a power of two and patch.size() == P*P.
ComplexMatrix fft2d(std::span<const float> patch, std::size_t P);
ComplexMatrix fft2d(const Tensor& patch);

/// Inverse of fft2d (includes the 1/(rows*cols) factor).
ComplexMatrix ifft2d(const ComplexMatrix& spectrum);

/// Elementwise modulus sqrt(re^2 + im^2), shaped rows x cols.
Tensor amplitude(const ComplexMatrix& spectrum);

} // namespace trajprior
