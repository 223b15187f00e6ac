#pragma once

#include <cstdint>
#include <numeric>
#include <string>

#include "marq/error.hpp"

namespace marq {

// Exact positive rate in Hz. Frame rates are kept rational so that
// sample_rate / hop is stored without float drift (16000/1024 == 125/8).
struct Rational {
  std::uint64_t num = 1;
  std::uint64_t den = 1;

  Rational() = default;
  Rational(std::uint64_t n, std::uint64_t d) : num(n), den(d) {
    require(d != 0, Errc::invalid_argument, "rational with zero denominator");
    const std::uint64_t g = std::gcd(num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool positive() const { return num > 0; }

  friend bool operator==(const Rational&, const Rational&) = default;

  std::string str() const {
    return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
  }

  // Parses "125/8", "25" or a finite decimal such as "15.625".
  static Rational parse(const std::string& text);
  // Exact conversion of a decimal-representable double (denominator up to 10^6).
  static Rational from_double(double hz);
};

// round(a / b) for non-negative integers, halves away from zero.
inline std::uint64_t round_div(std::uint64_t a, std::uint64_t b) { return (2 * a + b) / (2 * b); }

}  // namespace marq
