// random.hpp - seeded random source with platform-independent distributions.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tracer {

// std:: distributions are implementation-defined; these transforms are not,
// so a seed reproduces the same stream on every toolchain.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int64_t integer(int64_t lo, int64_t hi_inclusive) {
        return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi_inclusive - lo + 1));
    }
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }
    uint64_t next() { return engine_(); }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace tracer
