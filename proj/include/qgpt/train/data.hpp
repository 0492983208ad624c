#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qgpt/core/error.hpp"

namespace qgpt::train {

enum class VocabKind { byte, word };

inline const char* to_string(VocabKind v) { return v == VocabKind::byte ? "byte" : "word"; }

inline VocabKind parse_vocab(std::string_view s) {
    if (s == "byte") return VocabKind::byte;
    if (s == "word") return VocabKind::word;
    throw ConfigError("data.vocab must be 'byte' or 'word', got '" + std::string(s) + "'");
}

// Byte-level (256 ids) or whitespace-word-level vocabulary. Word vocabularies
// keep the most frequent words; id 0 is the unknown word.
class Tokenizer {
public:
    static Tokenizer bytes() { return Tokenizer(); }

    static Tokenizer words(std::string_view text, std::size_t max_vocab) {
        if (max_vocab < 2) throw ConfigError("word vocabulary needs at least 2 entries");
        std::unordered_map<std::string, std::size_t> counts;
        for (auto& w : split_words(text)) ++counts[w];
        std::vector<std::pair<std::string, std::size_t>> order(counts.begin(), counts.end());
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
            return a.second != b.second ? a.second > b.second : a.first < b.first;
        });
        Tokenizer t;
        t.kind_ = VocabKind::word;
        t.words_.push_back("<unk>");
        for (const auto& [w, _] : order) {
            if (t.words_.size() >= max_vocab) break;
            t.words_.push_back(w);
        }
        for (std::size_t i = 0; i < t.words_.size(); ++i) t.index_[t.words_[i]] = static_cast<std::int32_t>(i);
        return t;
    }

    VocabKind kind() const { return kind_; }
    std::size_t size() const { return kind_ == VocabKind::byte ? 256 : words_.size(); }

    std::vector<std::int32_t> encode(std::string_view text) const {
        std::vector<std::int32_t> out;
        if (kind_ == VocabKind::byte) {
            out.reserve(text.size());
            for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c));
            return out;
        }
        for (auto& w : split_words(text)) {
            auto it = index_.find(w);
            out.push_back(it == index_.end() ? 0 : it->second);
        }
        return out;
    }

    std::string decode(const std::vector<std::int32_t>& ids) const {
        std::string out;
        for (auto id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= size()) throw IndexError("decode: id out of range");
            if (kind_ == VocabKind::byte) {
                out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
            } else {
                if (!out.empty()) out.push_back(' ');
                out += words_[static_cast<std::size_t>(id)];
            }
        }
        return out;
    }

    const std::vector<std::string>& word_list() const { return words_; }

private:
    Tokenizer() = default;

    static std::vector<std::string> split_words(std::string_view text) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : text) {
            if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
                if (!cur.empty()) out.push_back(std::move(cur));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!cur.empty()) out.push_back(std::move(cur));
        return out;
    }

    VocabKind kind_ = VocabKind::byte;
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::int32_t> index_;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read corpus file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct SplitFractions {
    double train = 0.9;
    double val = 0.05;
    double test = 0.05;

    void validate() const {
        if (train <= 0 || val <= 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
            throw ConfigError("data.split fractions must be positive and sum to 1");
        }
    }
};

enum class Split { train, val, test };

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("split must be train, val or test, got '" + std::string(s) + "'");
}

// Token stream cut into contiguous train/val/test spans.
struct Corpus {
    std::vector<std::int32_t> train;
    std::vector<std::int32_t> val;
    std::vector<std::int32_t> test;
    std::size_t vocab_size = 256;

    static Corpus from_tokens(const std::vector<std::int32_t>& ids, std::size_t vocab, SplitFractions f = {}) {
        f.validate();
        Corpus c;
        c.vocab_size = vocab;
        const auto n = ids.size();
        const auto ntr = static_cast<std::size_t>(static_cast<double>(n) * f.train);
        const auto nva = static_cast<std::size_t>(static_cast<double>(n) * f.val);
        c.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(ntr));
        c.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(ntr), ids.begin() + static_cast<std::ptrdiff_t>(ntr + nva));
        c.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(ntr + nva), ids.end());
        return c;
    }

    const std::vector<std::int32_t>& split(Split s) const {
        return s == Split::train ? train : (s == Split::val ? val : test);
    }

    // Occurrence counts over the training split.
    std::vector<std::size_t> frequencies() const {
        std::vector<std::size_t> f(vocab_size, 0);
        for (auto id : train) ++f.at(static_cast<std::size_t>(id));
        return f;
    }
};

// Ids of the k most frequent tokens, most frequent first; ties by id.
inline std::vector<std::int32_t> top_k_tokens(const std::vector<std::size_t>& freq, std::size_t k) {
    if (k > freq.size()) throw ContractError("top_k exceeds vocabulary size");
    std::vector<std::int32_t> ids(freq.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int32_t>(i);
    std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return freq[a] > freq[b]; });
    ids.resize(k);
    return ids;
}

struct Batch {
    std::vector<std::int32_t> inputs;   // batch * seq
    std::vector<std::int32_t> targets;  // next-token ids
    std::size_t batch = 0;
    std::size_t seq = 0;
};

// Non-overlapping windows of seq+1 tokens starting at multiples of seq.
inline std::size_t window_count(std::size_t tokens, std::size_t seq) {
    return tokens > seq ? (tokens - 1) / seq : 0;
}

inline Batch make_batch(const std::vector<std::int32_t>& stream, const std::vector<std::size_t>& windows, std::size_t seq) {
    Batch b;
    b.batch = windows.size();
    b.seq = seq;
    b.inputs.reserve(windows.size() * seq);
    b.targets.reserve(windows.size() * seq);
    for (auto w : windows) {
        const auto start = w * seq;
        b.inputs.insert(b.inputs.end(), stream.begin() + static_cast<std::ptrdiff_t>(start),
                        stream.begin() + static_cast<std::ptrdiff_t>(start + seq));
        b.targets.insert(b.targets.end(), stream.begin() + static_cast<std::ptrdiff_t>(start + 1),
                         stream.begin() + static_cast<std::ptrdiff_t>(start + seq + 1));
    }
    return b;
}

// Window order of one epoch: a permutation that is a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t windows, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(windows);
    for (std::size_t i = 0; i < windows; ++i) order[i] = i;
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
    for (std::size_t i = windows; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> ud(0, i - 1);
        std::swap(order[i - 1], order[ud(rng)]);
    }
    return order;
}

}  // namespace qgpt::train
