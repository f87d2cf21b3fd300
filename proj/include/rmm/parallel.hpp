#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "errors.hpp"

namespace rmm {

// ---------------------------------------------------------------- random streams

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Counter-based bit generator: output n is a hash of (seed, replication,
// stream, n), so any draw can be reproduced without replaying the others.
class CounterEngine {
public:
    using result_type = std::uint64_t;

    CounterEngine(std::uint64_t seed, std::uint64_t replication, std::uint64_t stream)
        : key_(splitmix64(splitmix64(splitmix64(seed) ^ replication) ^ stream)) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() { return splitmix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++); }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

// Standard normal draws from one keyed stream.
class GaussianStream {
public:
    GaussianStream(std::uint64_t seed, std::uint64_t replication, std::uint64_t stream)
        : engine_(seed, replication, stream) {}

    double operator()() { return normal_(engine_); }

private:
    CounterEngine engine_;
    std::normal_distribution<double> normal_;
};

// ---------------------------------------------------------------- reductions

// Pairwise summation; the result depends only on the order of `values`.
inline double pairwise_sum(std::span<const double> values) {
    if (values.size() <= 8) {
        double total = 0.0;
        for (double v : values) total += v;
        return total;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

inline double pairwise_mean(std::span<const double> values) {
    return values.empty() ? 0.0 : pairwise_sum(values) / static_cast<double>(values.size());
}

// Mean that is invariant under permutation of the inputs: sorts a copy first.
inline double symmetric_mean(std::span<const double> values, std::vector<double>& scratch) {
    scratch.assign(values.begin(), values.end());
    std::sort(scratch.begin(), scratch.end());
    return pairwise_mean(scratch);
}

struct SampleSummary {
    double mean = 0.0;
    double standard_error = 0.0;
};

inline SampleSummary summarize(std::span<const double> values) {
    SampleSummary s;
    s.mean = pairwise_mean(values);
    if (values.size() < 2) return s;
    std::vector<double> squares(values.size());
    std::transform(values.begin(), values.end(), squares.begin(),
                   [&](double v) { return (v - s.mean) * (v - s.mean); });
    const double variance = pairwise_sum(squares) / static_cast<double>(values.size() - 1);
    s.standard_error = std::sqrt(variance / static_cast<double>(values.size()));
    return s;
}

// ---------------------------------------------------------------- workers

// Worker count: RMM_THREADS if set, otherwise the hardware concurrency.
inline int worker_count(int requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("RMM_THREADS"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || n < 1) throw ConfigError("RMM_THREADS must be a positive integer");
        return static_cast<int>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

// Calls task(i) for i in [0, count) on up to `workers` threads. Tasks write
// only to their own slot, so results do not depend on scheduling. The
// exception from the lowest failing index is rethrown.
template <class Task>
void parallel_for(int count, int workers, Task&& task) {
    workers = std::clamp(workers, 1, std::max(count, 1));
    if (workers == 1) {
        for (int i = 0; i < count; ++i) task(i);
        return;
    }
    std::atomic<int> next{0};
    std::mutex failure_mutex;
    int failed_index = count;
    std::exception_ptr failure;
    auto run = [&] {
        for (int i = next++; i < count; i = next++) {
            try {
                task(i);
            } catch (...) {
                const std::lock_guard lock(failure_mutex);
                if (i < failed_index) {
                    failed_index = i;
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(workers) - 1);
    for (int w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

} // namespace rmm
