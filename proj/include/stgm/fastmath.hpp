#pragma once

// In-place array exponential written so the compiler can vectorize it. Agrees with
// std::exp to about one ulp over the normal range; overflow gives inf and
// deep underflow gives zero, both through the two-step scaling.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>

namespace stgm::detail {

inline void exp_inplace(double* v, std::size_t n) {
  constexpr double kLog2e = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShift = 6755399441055744.0;  // 1.5 * 2^52: rounds to an integer held in the low bits
  constexpr double kHi = 710.0, kLo = -746.0;
  // The clamp gets its own pass: fused with the rest, GCC will not vectorize.
  for (std::size_t i = 0; i < n; ++i) v[i] = std::min(std::max(v[i], kLo), kHi);  // NaN passes through
  for (std::size_t i = 0; i < n; ++i) {
    const double xc = v[i];
    const double t = xc * kLog2e + kShift;
    const double k = t - kShift;
    const double r = (xc - k * kLn2Hi) - k * kLn2Lo;  // |r| <= ln2/2
    double p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const std::int64_t ki = std::bit_cast<std::int64_t>(t) - std::bit_cast<std::int64_t>(kShift);
    // 2^ki split in two factors so that neither leaves the normal range.
    // Halving goes through the shift trick too: AVX2 has no 64-bit arithmetic right shift.
    const std::int64_t k1 = std::bit_cast<std::int64_t>(k * 0.5 + kShift) - std::bit_cast<std::int64_t>(kShift);
    const std::int64_t k2 = ki - k1;
    const double s1 = std::bit_cast<double>(static_cast<std::uint64_t>(k1 + 1023) << 52);
    const double s2 = std::bit_cast<double>(static_cast<std::uint64_t>(k2 + 1023) << 52);
    v[i] = (p * s1) * s2;
  }
}

}  // namespace stgm::detail
