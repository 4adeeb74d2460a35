#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>

namespace ucap {

// All randomness in the library flows through an explicitly seeded Rng
// passed by reference; nothing touches a global generator.
using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double gaussian(Rng& rng, double mean, double sigma) {
    return std::normal_distribution<double>(mean, sigma)(rng);
}

// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: empty range");
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline bool bernoulli(Rng& rng, double p) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

// Draw an index from a (normalized) discrete distribution by inverse CDF.
// Falls back to the last index if rounding leaves a tail gap.
inline std::size_t sample_index(std::span<const double> probs, Rng& rng) {
    if (probs.empty()) throw std::invalid_argument("sample_index: empty distribution");
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    return probs.size() - 1;
}

inline std::size_t argmax_index(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("argmax_index: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

}  // namespace ucap
