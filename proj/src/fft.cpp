#include "trajprior/fft.hpp"

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

namespace trajprior {

namespace {

// In-place iterative radix-2 transform of n complex values with the given
// element stride. sign = -1 forward, +1 inverse (unscaled).
void fft1d(double* re, double* im, std::size_t n, std::size_t stride, int sign) {
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i * stride], re[j * stride]);
            std::swap(im[i * stride], im[j * stride]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
        const std::size_t half = len / 2;
        for (std::size_t start = 0; start < n; start += len) {
            for (std::size_t k = 0; k < half; ++k) {
                const double wr = std::cos(angle * static_cast<double>(k));
                const double wi = std::sin(angle * static_cast<double>(k));
                const std::size_t a = (start + k) * stride;
                const std::size_t b = (start + k + half) * stride;
                const double tr = re[b] * wr - im[b] * wi;
                const double ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
    }
}

void transform2d(std::vector<double>& re, std::vector<double>& im, std::size_t rows, std::size_t cols,
                 int sign) {
    for (std::size_t r = 0; r < rows; ++r) fft1d(re.data() + r * cols, im.data() + r * cols, cols, 1, sign);
    for (std::size_t c = 0; c < cols; ++c) fft1d(re.data() + c, im.data() + c, rows, cols, sign);
}

} // namespace

ComplexMatrix fft2d(std::span<const float> patch, std::size_t P) {
    if (!is_power_of_two(P)) {
        throw DimensionError("fft2d: patch size " + std::to_string(P) + " is not a power of two");
    }
    if (patch.size() != P * P) {
        throw DimensionError("fft2d: expected " + std::to_string(P * P) + " values, got " +
                             std::to_string(patch.size()));
    }
    std::vector<double> re(patch.begin(), patch.end());
    std::vector<double> im(P * P, 0.0);
    transform2d(re, im, P, P, -1);
    ComplexMatrix out(P, P);
    for (std::size_t i = 0; i < P * P; ++i) {
        out.re[i] = static_cast<float>(re[i]);
        out.im[i] = static_cast<float>(im[i]);
    }
    return out;
}

ComplexMatrix fft2d(const Tensor& patch) {
    if (patch.rank() != 2 || patch.dim(0) != patch.dim(1)) {
        throw DimensionError("fft2d: expected a square matrix, got " + shape_string(patch.shape()));
    }
    return fft2d(patch.data(), patch.dim(0));
}

ComplexMatrix ifft2d(const ComplexMatrix& spectrum) {
    if (!is_power_of_two(spectrum.rows) || !is_power_of_two(spectrum.cols)) {
        throw DimensionError("ifft2d: dimensions must be powers of two");
    }
    std::vector<double> re(spectrum.re.begin(), spectrum.re.end());
    std::vector<double> im(spectrum.im.begin(), spectrum.im.end());
    transform2d(re, im, spectrum.rows, spectrum.cols, +1);
    const double inv = 1.0 / static_cast<double>(spectrum.rows * spectrum.cols);
    ComplexMatrix out(spectrum.rows, spectrum.cols);
    for (std::size_t i = 0; i < re.size(); ++i) {
        out.re[i] = static_cast<float>(re[i] * inv);
        out.im[i] = static_cast<float>(im[i] * inv);
    }
    return out;
}

Tensor amplitude(const ComplexMatrix& spectrum) {
    if (spectrum.re.size() != spectrum.rows * spectrum.cols || spectrum.im.size() != spectrum.re.size()) {
        throw DimensionError("amplitude: malformed complex matrix");
    }
    Tensor out({spectrum.rows, spectrum.cols});
    for (std::size_t i = 0; i < spectrum.re.size(); ++i) {
        out[i] = std::hypot(spectrum.re[i], spectrum.im[i]);
    }
    return out;
}

} // namespace trajprior
