// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace forgetlm {

// Incremental 64-bit FNV-1a over raw bytes.
class Fnv1a64 {
  public:
    static constexpr std::uint64_t kOffsetBasis = 14695981039346656037ULL;
    static constexpr std::uint64_t kPrime = 1099511628211ULL;

    void update(std::span<const std::byte> bytes) noexcept {
        for (std::byte b : bytes) {
            state_ ^= static_cast<std::uint64_t>(b);
            state_ *= kPrime;
        }
    }
    void update(std::string_view text) noexcept { update(std::as_bytes(std::span(text.data(), text.size()))); }
    void update(std::span<const float> values) noexcept { update(std::as_bytes(values)); }

    std::uint64_t digest() const noexcept { return state_; }

  private:
    std::uint64_t state_ = kOffsetBasis;
};

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) noexcept {
    Fnv1a64 h;
    h.update(bytes);
    return h.digest();
}

inline std::uint64_t fnv1a64(std::span<const float> values) noexcept { return fnv1a64(std::as_bytes(values)); }

inline std::uint64_t fnv1a64(std::string_view text) noexcept {
    return fnv1a64(std::as_bytes(std::span(text.data(), text.size())));
}

// Fixed-width lowercase hex, 16 characters.
std::string hex64(std::uint64_t value);

// Independent stream seed for a named purpose (splitmix64 finalizer over seed ^ fnv(tag)).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept {
    std::uint64_t z = seed ^ fnv1a64(tag);
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Inverse of hex64; throws std::invalid_argument on malformed input.
std::uint64_t parse_hex64(std::string_view text);

} // namespace forgetlm
