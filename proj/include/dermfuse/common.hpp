#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dermfuse {

using Shape = std::vector<int64_t>;

/// Shape/rank/broadcast violations and invalid axes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration values (probabilities, extents, unknown keys).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or inconsistent input data (CSV schema, label integrity).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Fewer distinct groups than requested folds.
struct InsufficientGroupsError : std::runtime_error {
    explicit InsufficientGroupsError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite loss during training.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Checkpoint architecture fingerprint does not match the model.
struct FingerprintError : std::runtime_error {
    explicit FingerprintError(const std::string& msg) : std::runtime_error(msg) {}
};

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline void check_shape_positive(const Shape& shape) {
    for (int64_t d : shape) {
        if (d < 1) throw ShapeError("invalid shape " + shape_str(shape) + ": extents must be >= 1");
    }
}

// ---------------------------------------------------------------------------
// Deterministic hashing (seed derivation, structure fingerprints). Not
// cryptographic.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t seed = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), seed);
}

/// Mixes an ordered list of 64-bit values into one seed.
inline uint64_t hash_mix(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x243f6a8885a308d3ULL;
    for (uint64_t p : parts) h = splitmix64(h ^ p);
    return h;
}

/// 32-byte structure fingerprint: four independently seeded FNV-1a lanes,
/// finalized through splitmix64.
inline std::array<uint8_t, 32> fingerprint256(const std::string& text) {
    std::array<uint8_t, 32> out{};
    for (int lane = 0; lane < 4; ++lane) {
        uint64_t h = fnv1a64(text, splitmix64(0x5bd1e995u + uint64_t(lane) * 0x9e3779b9ULL));
        h = splitmix64(h);
        for (int b = 0; b < 8; ++b) out[size_t(lane * 8 + b)] = uint8_t(h >> (8 * b));
    }
    return out;
}

inline std::string hex_string(const std::array<uint8_t, 32>& bytes) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (uint8_t b : bytes) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

}  // namespace dermfuse
