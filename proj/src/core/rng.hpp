#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "core/error.hpp"

namespace ssgan {

/// Deterministic random source. All distributions are derived from raw
/// mt19937_64 output with fixed arithmetic, so a serialized engine state
/// reproduces the exact draw sequence (std::*_distribution objects carry
/// unspecified internal state and are avoided).
class Rng {
public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller; no cached spare, so the engine state
  /// alone captures the generator state.
  double gaussian() {
    double u1 = 1.0 - uniform01();  // (0, 1]
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Fair coin mapped to {-1, +1}.
  int bernoulli_pm1() { return (eng_() & 1u) ? 1 : -1; }

  /// Uniform index in [0, n), rejection-sampled to avoid modulo bias.
  std::size_t index(std::size_t n) {
    require(n > 0, ErrCode::invalid_argument, "Rng::index: n must be positive");
    const std::uint64_t span = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= span);
    return static_cast<std::size_t>(x % n);
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    require(!is.fail(), ErrCode::corrupt, "Rng::set_state: malformed engine state");
  }

private:
  std::mt19937_64 eng_;
};

}  // namespace ssgan
