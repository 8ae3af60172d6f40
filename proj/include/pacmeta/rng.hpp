#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace pacmeta {

/// Seeded random stream. Every stochastic step in the library draws from one of
/// these, so a run is a pure function of its seeds.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : Rng({seed}) {}

    /// Stream keyed by several integers, e.g. {seed, task_index, purpose}.
    Rng(std::initializer_list<std::uint64_t> keys) {
        std::vector<std::uint32_t> words;
        for (std::uint64_t k : keys) {
            words.push_back(static_cast<std::uint32_t>(k));
            words.push_back(static_cast<std::uint32_t>(k >> 32));
        }
        std::seed_seq seq(words.begin(), words.end());
        engine_.seed(seq);
    }

    double normal() { return normal_(engine_); }
    double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        std::shuffle(v.begin(), v.end(), engine_);
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace pacmeta
