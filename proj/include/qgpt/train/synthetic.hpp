#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace qgpt::train {

namespace detail {

// Zipf-weighted choice: item i has weight 1/(i+1).
template <std::size_t N, class Rng>
std::string_view zipf_pick(const std::array<std::string_view, N>& words, Rng& rng) {
    static const std::vector<double> w = [] {
        std::vector<double> v(N);
        for (std::size_t i = 0; i < N; ++i) v[i] = 1.0 / static_cast<double>(i + 1);
        return v;
    }();
    std::discrete_distribution<std::size_t> dd(w.begin(), w.end());
    return words[dd(rng)];
}

inline constexpr std::array<std::string_view, 40> kNouns{
    "cat", "house", "river", "teacher", "city", "garden", "child", "road", "window", "market",
    "doctor", "forest", "letter", "horse", "village", "king", "farmer", "bridge", "song", "ship",
    "student", "mountain", "friend", "door", "storm", "painter", "lamp", "bird", "station", "soldier",
    "island", "baker", "book", "mirror", "captain", "field", "clock", "wolf", "tower", "engine"};

inline constexpr std::array<std::string_view, 30> kVerbs{
    "sees", "finds", "builds", "follows", "carries", "remembers", "paints", "opens", "watches", "leaves",
    "answers", "visits", "keeps", "loses", "calls", "reads", "helps", "breaks", "crosses", "holds",
    "forgets", "guards", "teaches", "sells", "climbs", "hears", "writes", "moves", "cleans", "knows"};

inline constexpr std::array<std::string_view, 24> kAdjectives{
    "old", "small", "quiet", "bright", "cold", "green", "young", "tall", "dark", "happy",
    "strange", "heavy", "gentle", "red", "distant", "broken", "warm", "proud", "empty", "clever",
    "silent", "golden", "narrow", "wild"};

inline constexpr std::array<std::string_view, 12> kAdverbs{
    "slowly", "often", "never", "quietly", "again", "always", "suddenly", "carefully",
    "rarely", "gladly", "today", "soon"};

inline constexpr std::array<std::string_view, 10> kPrepositions{
    "near", "behind", "under", "beside", "across", "inside", "beyond", "above", "toward", "around"};

inline constexpr std::array<std::string_view, 6> kNames{"Anna", "Tomas", "Mira", "Oskar", "Lena", "Paul"};

template <class Rng>
bool coin(Rng& rng, double p) {
    return std::bernoulli_distribution(p)(rng);
}

template <class Rng>
std::string noun_phrase(Rng& rng) {
    if (coin(rng, 0.12)) return std::string(zipf_pick(kNames, rng));
    std::string s = coin(rng, 0.6) ? "the " : "a ";
    if (coin(rng, 0.45)) {
        const auto adj = zipf_pick(kAdjectives, rng);
        if (s == "a " && std::string_view("aeiou").find(adj[0]) != std::string_view::npos) s = "an ";
        s += adj;
        s += ' ';
    }
    s += zipf_pick(kNouns, rng);
    if (coin(rng, 0.15)) {
        s += ' ';
        s += zipf_pick(kPrepositions, rng);
        s += " the ";
        s += zipf_pick(kNouns, rng);
    }
    return s;
}

template <class Rng>
std::string clause(Rng& rng) {
    std::string s = noun_phrase(rng);
    if (coin(rng, 0.25)) {
        s += ' ';
        s += zipf_pick(kAdverbs, rng);
    }
    s += ' ';
    s += zipf_pick(kVerbs, rng);
    s += ' ';
    s += noun_phrase(rng);
    return s;
}

template <class Rng>
std::string sentence(Rng& rng) {
    std::string s = clause(rng);
    const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (r < 0.2) {
        s += " and ";
        s += clause(rng);
    } else if (r < 0.3) {
        s += " because ";
        s += clause(rng);
    } else if (r < 0.38) {
        s += " when ";
        s += clause(rng);
    }
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    s += coin(rng, 0.9) ? ". " : "? ";
    return s;
}

}  // namespace detail

// English-like text from a seeded stochastic grammar: Zipf-distributed word
// choice, optional modifiers and subordinate clauses, paragraph breaks.
// Output is exactly `bytes` long and a pure function of (bytes, seed).
inline std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::string out;
    out.reserve(bytes + 256);
    std::size_t in_paragraph = 0;
    while (out.size() < bytes) {
        out += detail::sentence(rng);
        if (++in_paragraph >= 4 && detail::coin(rng, 0.3)) {
            out.back() = '\n';
            out += '\n';
            in_paragraph = 0;
        }
    }
    out.resize(bytes);
    return out;
}

}  // namespace qgpt::train
