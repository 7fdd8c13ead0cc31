// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlm/hash.h"

#include <bit>
#include <stdexcept>

namespace forgetlm {

static_assert(std::endian::native == std::endian::little, "checkpoint hashes assume little-endian floats");

std::string hex64(std::uint64_t value) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = kDigits[value & 0xF];
        value >>= 4;
    }
    return out;
}

std::uint64_t parse_hex64(std::string_view text) {
    if (text.size() != 16) throw std::invalid_argument("hex64: expected 16 hex digits");
    std::uint64_t v = 0;
    for (char c : text) {
        v <<= 4;
        if (c >= '0' && c <= '9') {
            v |= static_cast<std::uint64_t>(c - '0');
        } else if (c >= 'a' && c <= 'f') {
            v |= static_cast<std::uint64_t>(c - 'a' + 10);
        } else {
            throw std::invalid_argument("hex64: bad digit");
        }
    }
    return v;
}

} // namespace forgetlm
