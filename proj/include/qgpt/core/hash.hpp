#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace qgpt {

// 64-bit FNV-1a. Used for config digests and parameter snapshots, not for integrity.
class Fnv1a {
public:
    void update(std::span<const std::byte> bytes) {
        for (auto b : bytes) {
            h_ ^= static_cast<std::uint64_t>(b);
            h_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }

    template <class T>
    void update_values(std::span<const T> v) {
        update(std::as_bytes(v));
    }

    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return h.digest();
}

}  // namespace qgpt
