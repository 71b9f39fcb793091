#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace verifscope {

// Error taxonomy. Exit codes: 0 ok, 2 config error, 3 dependency error,
// 4 data error, 5 numerical error.
enum class ErrorKind {
    Config,
    Argument,
    Shape,
    Dependency,
    Data,
    Io,
    Numerical,
};

class VsError : public std::runtime_error {
public:
    VsError(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

    int exit_code() const {
        switch (kind_) {
            case ErrorKind::Config:
            case ErrorKind::Argument:
            case ErrorKind::Shape: return 2;
            case ErrorKind::Dependency: return 3;
            case ErrorKind::Data:
            case ErrorKind::Io: return 4;
            case ErrorKind::Numerical: return 5;
        }
        return 1;
    }

private:
    ErrorKind kind_;
};

// Deterministic RNG (splitmix64 core). Self-contained so that seeded runs
// produce identical streams on every platform, unlike the std distributions.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // Uniform integer in [lo, hi], inclusive. Rejection-free Lemire reduction.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        __uint128_t m = static_cast<__uint128_t>(next_u64()) * range;
        return lo + static_cast<int64_t>(m >> 64);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform_float(float lo, float hi) {
        return lo + static_cast<float>(uniform()) * (hi - lo);
    }

    double gaussian() {
        // Box-Muller, no cached spare (keeps the stream position predictable).
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Derive an independent child stream.
    Rng fork(uint64_t tag) { return Rng(next_u64() ^ (tag * 0x9E3779B97F4A7C15ull)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

// Thread cap from VERIFSCOPE_THREADS (defaults to hardware concurrency).
int max_threads();

// Runs fn(i) for i in [0, n). Work is chunked by index; callers needing a
// deterministic result must merge by index after the loop returns.
void parallel_for(int n, const std::function<void(int)>& fn);

// FNV-1a, used for config digests embedded in artifacts.
uint64_t fnv1a(const std::string& s);
std::string digest_hex(const std::string& s);

}  // namespace verifscope
