#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <utility>

namespace bens {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Folds a list of tags into one 64-bit stream id.
inline constexpr std::uint64_t stream_id(std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = 0x6A09E667F3BCC908ULL;
    for (auto t : tags) h = splitmix64(h ^ splitmix64(t));
    return h;
}

/// Counter-based generator (Philox4x32-10) keyed by (seed, stream).
///
/// The n-th draw depends only on (seed, stream, n), so the sequence is the same on
/// every host and independent of how work is scheduled across threads.
class RngStream {
   public:
    RngStream() = default;
    RngStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }
    std::uint64_t position() const { return counter_ * 4 + (4 - available_); }

    /// Child stream, independent of this one and of its siblings.
    RngStream derive(std::initializer_list<std::uint64_t> tags) const {
        std::uint64_t h = stream_;
        for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632BE59BD9B4E019ULL));
        return RngStream(seed_, h);
    }

    std::uint32_t next_u32() {
        if (available_ == 0) refill();
        return buffer_[4 - available_--];
    }

    std::uint64_t next_u64() {
        std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Lemire's multiply-shift with rejection.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n <= 1) return 0;
        if (n <= 0xFFFFFFFFULL) {
            auto n32 = static_cast<std::uint32_t>(n);
            std::uint64_t m = std::uint64_t(next_u32()) * n32;
            auto low = static_cast<std::uint32_t>(m);
            if (low < n32) {
                std::uint32_t threshold = static_cast<std::uint32_t>(-n32) % n32;
                while (low < threshold) {
                    m = std::uint64_t(next_u32()) * n32;
                    low = static_cast<std::uint32_t>(m);
                }
            }
            return m >> 32;
        }
        std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Inclusive integer range [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (both values used).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class T>
    void shuffle(std::span<T> values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            std::size_t j = uniform_int(i);
            std::swap(values[i - 1], values[j]);
        }
    }

   private:
    static constexpr std::uint32_t kM0 = 0xD2511F53u;
    static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kW0 = 0x9E3779B9u;
    static constexpr std::uint32_t kW1 = 0xBB67AE85u;

    void refill() {
        std::array<std::uint32_t, 4> c = {static_cast<std::uint32_t>(counter_),
                                          static_cast<std::uint32_t>(counter_ >> 32),
                                          static_cast<std::uint32_t>(stream_),
                                          static_cast<std::uint32_t>(stream_ >> 32)};
        std::uint32_t k0 = static_cast<std::uint32_t>(seed_);
        std::uint32_t k1 = static_cast<std::uint32_t>(seed_ >> 32);
        for (int round = 0; round < 10; ++round) {
            std::uint64_t p0 = std::uint64_t(kM0) * c[0];
            std::uint64_t p1 = std::uint64_t(kM1) * c[2];
            c = {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k0, static_cast<std::uint32_t>(p1),
                 static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k1, static_cast<std::uint32_t>(p0)};
            k0 += kW0;
            k1 += kW1;
        }
        buffer_ = c;
        available_ = 4;
        ++counter_;
    }

    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
    std::array<std::uint32_t, 4> buffer_{};
    int available_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace bens
