// SPDX-License-Identifier: Apache-2.0
//
// Shared numeric aliases, error types and the deterministic random stream
// used across the library.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace partprompt {

using Real = double;
using Index = Eigen::Index;

/// Dense row-major matrix; rows are items (points, tokens, cells).
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// N x 3 coordinates, one point per row.
using Points = Eigen::Matrix<Real, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Vec3 = Eigen::Matrix<Real, 1, 3>;
using IndexList = std::vector<int>;

class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A mask with no background (or no foreground) where one is required.
class DegenerateMask : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file; `position` is a byte offset when known.
class IngestError : public std::runtime_error {
public:
    IngestError(const std::string& what, std::size_t position = npos)
        : std::runtime_error(position == npos ? what : what + " (at byte " + std::to_string(position) + ")"),
          position_(position) {}
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t position() const { return position_; }

private:
    std::size_t position_;
};

/// SplitMix64-seeded xoshiro256** stream. Output is defined bit-for-bit on every
/// platform, unlike the std distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t z = seed;
        for (auto& s : state_) {
            z += 0x9e3779b97f4a7c15ULL;
            std::uint64_t x = z;
            x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
            x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
            s = x ^ (x >> 31);
        }
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    Real uniform() { return static_cast<Real>(next() >> 11) * 0x1.0p-53; }
    Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw InvalidArgument("Rng::below: empty range");
        // Lemire-style rejection keeps the stream unbiased.
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    int range(int lo, int hi) { return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1))); }

    /// Standard normal via Box-Muller (one value per call).
    Real normal() {
        Real u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const Real u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::uint64_t split() { return next() ^ 0xd1b54a32d192ed03ULL; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t state_[4]{};
};

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = rng.below(i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace partprompt
