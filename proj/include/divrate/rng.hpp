#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace divrate {

//! Philox4x32-10 counter-based generator; (seed, stream) fully determines the sequence.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed = 0, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (have_ == 0) refill();
    return buf_[--have_];
  }

  //! Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
  }

  double exponential() { return -std::log(uniform()); }

  double normal() {
    // Box-Muller without caching keeps the draw count per call fixed.
    double u1 = uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  //! Independent child stream for sub-tasks.
  RngStream split(std::uint64_t sub) const {
    return RngStream(seed_ ^ (0x9E3779B97F4A7C15ULL * (sub + 1)), stream_ * 0x100000001B3ULL + sub + 1);
  }

 private:
  std::uint64_t seed_, stream_;
  std::uint64_t counter_ = 0;
  std::array<result_type, 2> buf_{};
  int have_ = 0;

  static void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
    std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
  }

  void refill() {
    std::array<std::uint32_t, 4> c = {static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                                       static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    std::array<std::uint32_t, 2> k = {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
    for (int r = 0; r < 10; ++r) {
      std::uint32_t hi0, lo0, hi1, lo1;
      mulhilo(0xD2511F53u, c[0], hi0, lo0);
      mulhilo(0xCD9E8D57u, c[2], hi1, lo1);
      c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
      k[0] += 0x9E3779B9u;
      k[1] += 0xBB67AE85u;
    }
    ++counter_;
    buf_[0] = (static_cast<std::uint64_t>(c[0]) << 32) | c[1];
    buf_[1] = (static_cast<std::uint64_t>(c[2]) << 32) | c[3];
    have_ = 2;
  }
};

}  // namespace divrate
