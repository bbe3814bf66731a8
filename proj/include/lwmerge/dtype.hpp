#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <string>
#include <string_view>

#include "lwmerge/error.hpp"

namespace lwmerge {

static_assert(std::endian::native == std::endian::little,
              "archive payloads are decoded in place and assume a little-endian host");

enum class DType : std::uint8_t { F16, BF16, F32, F64 };

constexpr std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::F16:
    case DType::BF16: return 2;
    case DType::F32: return 4;
    case DType::F64: return 8;
  }
  return 0;
}

constexpr std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F32: return "F32";
    case DType::F64: return "F64";
  }
  return "?";
}

inline std::optional<DType> parse_dtype(std::string_view name) {
  if (name == "F16") return DType::F16;
  if (name == "BF16") return DType::BF16;
  if (name == "F32") return DType::F32;
  if (name == "F64") return DType::F64;
  return std::nullopt;
}

namespace detail {

// Binary interchange format with `ExpBits` exponent bits and `MantBits`
// stored mantissa bits, packed into the low bits of a uint16.
template <int ExpBits, int MantBits>
struct SmallFloat {
  static constexpr int bias = (1 << (ExpBits - 1)) - 1;
  static constexpr std::uint32_t exp_mask = (1u << ExpBits) - 1;
  static constexpr std::uint32_t mant_mask = (1u << MantBits) - 1;
  static constexpr std::uint32_t sign_bit = 1u << (ExpBits + MantBits);

  static double decode(std::uint16_t bits) {
    const bool negative = bits & sign_bit;
    const std::uint32_t exp = (bits >> MantBits) & exp_mask;
    const std::uint32_t mant = bits & mant_mask;
    double magnitude;
    if (exp == exp_mask) {
      magnitude = mant ? std::numeric_limits<double>::quiet_NaN()
                       : std::numeric_limits<double>::infinity();
    } else if (exp == 0) {
      magnitude = std::ldexp(static_cast<double>(mant), 1 - bias - MantBits);
    } else {
      magnitude = std::ldexp(static_cast<double>(mant | (1u << MantBits)),
                             static_cast<int>(exp) - bias - MantBits);
    }
    return negative ? -magnitude : magnitude;
  }

  // Round-to-nearest-even directly from binary64, so no double rounding
  // through an intermediate float.
  static std::uint16_t encode(double value) {
    const std::uint64_t raw = std::bit_cast<std::uint64_t>(value);
    const std::uint32_t sign = (raw >> 63) ? sign_bit : 0;
    const int raw_exp = static_cast<int>((raw >> 52) & 0x7ff);
    const std::uint64_t raw_mant = raw & ((std::uint64_t{1} << 52) - 1);

    if (raw_exp == 0x7ff) {
      if (raw_mant != 0) {
        return static_cast<std::uint16_t>(sign | (exp_mask << MantBits) |
                                          (1u << (MantBits - 1)));
      }
      return static_cast<std::uint16_t>(sign | (exp_mask << MantBits));
    }
    // binary64 subnormals are far below half the smallest target subnormal
    if (raw_exp == 0) return static_cast<std::uint16_t>(sign);

    const int exponent = raw_exp - 1023;
    const std::uint64_t significand = raw_mant | (std::uint64_t{1} << 52);
    const int min_exponent = 1 - bias;

    int shift = 52 - MantBits;
    if (exponent < min_exponent) shift += min_exponent - exponent;
    if (shift >= 54) return static_cast<std::uint16_t>(sign);

    std::uint64_t quotient = significand >> shift;
    const std::uint64_t remainder = significand & ((std::uint64_t{1} << shift) - 1);
    const std::uint64_t half = std::uint64_t{1} << (shift - 1);
    if (remainder > half || (remainder == half && (quotient & 1))) ++quotient;

    std::uint64_t bits;
    if (exponent < min_exponent) {
      // subnormal; a carry into bit MantBits lands on the smallest normal
      bits = quotient;
    } else {
      // a carry out of the significand bumps the exponent field
      bits = (static_cast<std::uint64_t>(exponent + bias - 1) << MantBits) + quotient;
    }
    if ((bits >> MantBits) >= exp_mask) bits = std::uint64_t{exp_mask} << MantBits;
    return static_cast<std::uint16_t>(sign | bits);
  }
};

using Half = SmallFloat<5, 10>;
using BFloat = SmallFloat<8, 7>;

}  // namespace detail

inline double f16_to_f64(std::uint16_t bits) { return detail::Half::decode(bits); }
inline double bf16_to_f64(std::uint16_t bits) { return detail::BFloat::decode(bits); }
inline std::uint16_t f64_to_f16(double value) { return detail::Half::encode(value); }
inline std::uint16_t f64_to_bf16(double value) { return detail::BFloat::encode(value); }

/// Decode one little-endian element at `src`.
inline double load_element(const std::byte* src, DType dtype) {
  switch (dtype) {
    case DType::F16: {
      std::uint16_t bits;
      std::memcpy(&bits, src, 2);
      return f16_to_f64(bits);
    }
    case DType::BF16: {
      std::uint16_t bits;
      std::memcpy(&bits, src, 2);
      return bf16_to_f64(bits);
    }
    case DType::F32: {
      float value;
      std::memcpy(&value, src, 4);
      return value;
    }
    case DType::F64: {
      double value;
      std::memcpy(&value, src, 8);
      return value;
    }
  }
  throw Error(ErrorKind::DecodeError, "invalid dtype tag");
}

/// Narrow `value` to `dtype` with round-to-nearest-even and store it at `dst`.
inline void store_element(std::byte* dst, DType dtype, double value) {
  switch (dtype) {
    case DType::F16: {
      const std::uint16_t bits = f64_to_f16(value);
      std::memcpy(dst, &bits, 2);
      return;
    }
    case DType::BF16: {
      const std::uint16_t bits = f64_to_bf16(value);
      std::memcpy(dst, &bits, 2);
      return;
    }
    case DType::F32: {
      const float narrowed = static_cast<float>(value);
      std::memcpy(dst, &narrowed, 4);
      return;
    }
    case DType::F64:
      std::memcpy(dst, &value, 8);
      return;
  }
  throw Error(ErrorKind::DecodeError, "invalid dtype tag");
}

/// Raw storage bits of the element at `src`, widened to 64 bits.
inline std::uint64_t load_bits(const std::byte* src, DType dtype) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, src, dtype_size(dtype));
  return bits;
}

/// Distance in units in the last place between two encodings of the same
/// dtype. Signed zeros are 0 apart; any NaN is infinitely far.
inline std::uint64_t ulp_distance(std::uint64_t a_bits, std::uint64_t b_bits, DType dtype) {
  const unsigned width = static_cast<unsigned>(dtype_size(dtype) * 8);
  const std::uint64_t sign = std::uint64_t{1} << (width - 1);
  const std::uint64_t payload_mask = sign - 1;
  auto is_nan = [&](std::uint64_t bits) {
    std::byte buf[8];
    std::memcpy(buf, &bits, 8);
    return std::isnan(load_element(buf, dtype));
  };
  if (is_nan(a_bits) || is_nan(b_bits)) {
    return a_bits == b_bits ? 0 : std::numeric_limits<std::uint64_t>::max();
  }
  // map sign-magnitude onto a monotone signed line
  auto ordinal = [&](std::uint64_t bits) -> __int128 {
    const __int128 magnitude = static_cast<__int128>(bits & payload_mask);
    return (bits & sign) ? -magnitude : magnitude;
  };
  const __int128 diff = ordinal(a_bits) - ordinal(b_bits);
  return static_cast<std::uint64_t>(diff < 0 ? -diff : diff);
}

}  // namespace lwmerge
