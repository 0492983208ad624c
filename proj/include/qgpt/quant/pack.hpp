#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/quant/levels.hpp"

namespace qgpt::quant {

inline std::size_t packed_size(std::size_t count, int bits) {
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

// Codes are level indices in [0, 2k], stored b bits apiece, least significant
// bit first within each byte, bytes in little-endian order.
inline std::vector<std::uint8_t> pack_bits(std::span<const std::uint32_t> codes, int bits) {
    const auto max_code = static_cast<std::uint32_t>(2 * level_k(bits));
    std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
    std::size_t bitpos = 0;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const auto c = codes[i];
        if (c > max_code) {
            throw EncodingError("pack_bits: code " + std::to_string(c) + " at position " + std::to_string(i) +
                                " exceeds " + std::to_string(max_code) + " for " + std::to_string(bits) + "-bit storage");
        }
        for (int b = 0; b < bits; ++b, ++bitpos) {
            if ((c >> b) & 1u) out[bitpos >> 3] |= static_cast<std::uint8_t>(1u << (bitpos & 7));
        }
    }
    return out;
}

inline std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count, int bits) {
    level_k(bits);
    if (bytes.size() != packed_size(count, bits)) {
        throw EncodingError("unpack_bits: expected " + std::to_string(packed_size(count, bits)) + " bytes, got " +
                            std::to_string(bytes.size()));
    }
    std::vector<std::uint32_t> out(count, 0);
    std::size_t bitpos = 0;
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t c = 0;
        for (int b = 0; b < bits; ++b, ++bitpos) {
            c |= static_cast<std::uint32_t>((bytes[bitpos >> 3] >> (bitpos & 7)) & 1u) << b;
        }
        out[i] = c;
    }
    return out;
}

}  // namespace qgpt::quant
