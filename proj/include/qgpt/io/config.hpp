#pragma once

#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qgpt/core/error.hpp"
#include "qgpt/core/hash.hpp"
#include "qgpt/distill/objective.hpp"
#include "qgpt/model/config.hpp"
#include "qgpt/quant/spec.hpp"
#include "qgpt/train/data.hpp"
#include "qgpt/train/trainer.hpp"

namespace qgpt::io {

using json = nlohmann::json;

struct QuantConfig {
    quant::BitSpec bits{2, 2, 8};
    quant::Scheme scheme = quant::Scheme::dynamic;
    bool operator==(const QuantConfig& o) const {
        return bits.w == o.bits.w && bits.e == o.bits.e && bits.a == o.bits.a && scheme == o.scheme;
    }
};

struct DataConfig {
    std::string corpus_path;
    train::VocabKind vocab = train::VocabKind::byte;
    train::SplitFractions split;
};

// Everything one CLI run needs. Defaults here are the documented defaults.
struct RunConfig {
    model::ModelConfig model;
    QuantConfig quant;
    distill::DistillConfig distill;
    train::TrainConfig train;
    DataConfig data;

    void validate() const {
        model.validate();
        distill.validate();
        train.validate();
        data.split.validate();
        if (data.vocab == train::VocabKind::byte && model.vocab_size != 256) {
            throw ConfigError("model.vocab_size must be 256 for data.vocab = byte");
        }
    }
};

// ---------------------------------------------------------------------------
// JSON encoding

namespace detail {

inline json bits_json(const std::optional<int>& b) { return b ? json(*b) : json("fp"); }

// Strict view of one object: every key must be consumed, types are checked.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    template <class F>
    void opt(const std::string& key, F&& f) {
        seen_.insert(key);
        if (auto it = j_.find(key); it != j_.end()) f(*it, path_ + "." + key);
    }

    void finish() const {
        for (const auto& [k, _] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError("unknown key '" + path_ + "." + k + "'");
        }
    }

private:
    std::string where() const { return path_.empty() ? "<root>" : path_; }
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline std::size_t as_size(const json& v, const std::string& p) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
        throw ConfigError(p + ": expected a non-negative integer, got " + v.dump());
    }
    return v.get<std::size_t>();
}

inline double as_real(const json& v, const std::string& p) {
    if (!v.is_number()) throw ConfigError(p + ": expected a number, got " + v.dump());
    return v.get<double>();
}

inline bool as_bool(const json& v, const std::string& p) {
    if (!v.is_boolean()) throw ConfigError(p + ": expected true or false, got " + v.dump());
    return v.get<bool>();
}

inline std::string as_string(const json& v, const std::string& p) {
    if (!v.is_string()) throw ConfigError(p + ": expected a string, got " + v.dump());
    return v.get<std::string>();
}

inline std::optional<int> as_bits(const json& v, const std::string& p) {
    if (v.is_string() && v.get<std::string>() == "fp") return std::nullopt;
    if (v.is_number_integer()) {
        const auto b = v.get<long long>();
        if (b == 2 || b == 4 || b == 8) return static_cast<int>(b);
    }
    throw ConfigError(p + ": expected 2, 4, 8 or \"fp\", got " + v.dump());
}

template <class F>
auto wrap(const std::string& p, F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError(p + ": " + e.what());
    }
}

}  // namespace detail

inline json to_json(const model::ModelConfig& m) {
    return json{{"vocab_size", m.vocab_size}, {"n_layers", m.n_layers},       {"d_model", m.d_model},
                {"n_heads", m.n_heads},       {"d_ff", m.d_ff},               {"max_seq_len", m.max_seq_len},
                {"tie_embeddings", m.tie_embeddings}};
}

inline json to_json(const QuantConfig& q) {
    return json{{"w_bits", detail::bits_json(q.bits.w)},
                {"e_bits", detail::bits_json(q.bits.e)},
                {"a_bits", detail::bits_json(q.bits.a)},
                {"scheme", std::string(quant::to_string(q.scheme))}};
}

inline json to_json(const RunConfig& c) {
    const auto& d = c.distill;
    const auto& t = c.train;
    json j;
    j["model"] = to_json(c.model);
    j["quant"] = to_json(c.quant);
    j["distill"] = json{{"lambda", d.lambda},
                        {"tau", d.tau},
                        {"momentum", d.momentum},
                        {"negatives", d.negatives},
                        {"strategy", std::string(distill::to_string(d.strategy))},
                        {"anchor", distill::to_string(d.anchor)},
                        {"contrast_layer", d.contrast_first_layer ? "first" : "last"}};
    j["train"] = json{{"lr_backbone", t.lr_backbone},
                      {"lr_clip", t.lr_clip},
                      {"batch_size", t.batch_size},
                      {"epochs", t.epochs},
                      {"seed", t.seed},
                      {"weight_decay", t.weight_decay},
                      {"grad_clip_norm", t.grad_clip_norm ? json(*t.grad_clip_norm) : json(nullptr)},
                      {"max_steps", t.max_steps},
                      {"eval_every", t.eval_every},
                      {"eval_windows", t.eval_windows},
                      {"gamma_grad", train::to_string(t.gamma_grad)}};
    j["data"] = json{{"corpus_path", c.data.corpus_path},
                     {"vocab", train::to_string(c.data.vocab)},
                     {"split", json{{"train", c.data.split.train}, {"val", c.data.split.val}, {"test", c.data.split.test}}}};
    return j;
}

inline model::ModelConfig model_from_json(const json& j, const std::string& path = "model") {
    using namespace detail;
    model::ModelConfig m;
    Reader r(j, path);
    r.opt("vocab_size", [&](const json& v, const std::string& p) { m.vocab_size = as_size(v, p); });
    r.opt("n_layers", [&](const json& v, const std::string& p) { m.n_layers = as_size(v, p); });
    r.opt("d_model", [&](const json& v, const std::string& p) { m.d_model = as_size(v, p); });
    r.opt("n_heads", [&](const json& v, const std::string& p) { m.n_heads = as_size(v, p); });
    r.opt("d_ff", [&](const json& v, const std::string& p) { m.d_ff = as_size(v, p); });
    r.opt("max_seq_len", [&](const json& v, const std::string& p) { m.max_seq_len = as_size(v, p); });
    r.opt("tie_embeddings", [&](const json& v, const std::string& p) { m.tie_embeddings = as_bool(v, p); });
    r.finish();
    return m;
}

inline QuantConfig quant_from_json(const json& j, const std::string& path = "quant") {
    using namespace detail;
    QuantConfig q;
    Reader r(j, path);
    r.opt("w_bits", [&](const json& v, const std::string& p) { q.bits.w = as_bits(v, p); });
    r.opt("e_bits", [&](const json& v, const std::string& p) { q.bits.e = as_bits(v, p); });
    r.opt("a_bits", [&](const json& v, const std::string& p) { q.bits.a = as_bits(v, p); });
    r.opt("scheme", [&](const json& v, const std::string& p) {
        q.scheme = wrap(p, [&] { return quant::parse_scheme(as_string(v, p)); });
    });
    r.finish();
    return q;
}

// Missing sections and keys keep their defaults; unknown keys are errors.
inline RunConfig from_json(const json& j) {
    using namespace detail;
    RunConfig c;
    Reader root(j, "");
    auto section = [&](const std::string& name, const std::function<void(const json&)>& f) {
        root.opt(name, [&](const json& v, const std::string&) { f(v); });
    };
    section("model", [&](const json& v) { c.model = model_from_json(v); });
    section("quant", [&](const json& v) { c.quant = quant_from_json(v); });
    section("distill", [&](const json& v) {
        auto& d = c.distill;
        Reader r(v, "distill");
        r.opt("lambda", [&](const json& x, const std::string& p) { d.lambda = as_real(x, p); });
        r.opt("tau", [&](const json& x, const std::string& p) { d.tau = as_real(x, p); });
        r.opt("momentum", [&](const json& x, const std::string& p) { d.momentum = as_real(x, p); });
        r.opt("negatives", [&](const json& x, const std::string& p) { d.negatives = as_size(x, p); });
        r.opt("strategy", [&](const json& x, const std::string& p) {
            d.strategy = wrap(p, [&] { return distill::parse_strategy(as_string(x, p)); });
        });
        r.opt("anchor", [&](const json& x, const std::string& p) {
            d.anchor = wrap(p, [&] { return distill::parse_anchor(as_string(x, p)); });
        });
        r.opt("contrast_layer", [&](const json& x, const std::string& p) {
            const auto s = as_string(x, p);
            if (s != "first" && s != "last") throw ConfigError(p + ": expected \"first\" or \"last\", got " + x.dump());
            d.contrast_first_layer = s == "first";
        });
        r.finish();
    });
    section("train", [&](const json& v) {
        auto& t = c.train;
        Reader r(v, "train");
        r.opt("lr_backbone", [&](const json& x, const std::string& p) { t.lr_backbone = as_real(x, p); });
        r.opt("lr_clip", [&](const json& x, const std::string& p) { t.lr_clip = as_real(x, p); });
        r.opt("batch_size", [&](const json& x, const std::string& p) { t.batch_size = as_size(x, p); });
        r.opt("epochs", [&](const json& x, const std::string& p) { t.epochs = as_size(x, p); });
        r.opt("seed", [&](const json& x, const std::string& p) { t.seed = as_size(x, p); });
        r.opt("weight_decay", [&](const json& x, const std::string& p) { t.weight_decay = as_real(x, p); });
        r.opt("grad_clip_norm", [&](const json& x, const std::string& p) {
            if (x.is_null()) t.grad_clip_norm.reset();
            else t.grad_clip_norm = as_real(x, p);
        });
        r.opt("max_steps", [&](const json& x, const std::string& p) { t.max_steps = as_size(x, p); });
        r.opt("eval_every", [&](const json& x, const std::string& p) { t.eval_every = as_size(x, p); });
        r.opt("eval_windows", [&](const json& x, const std::string& p) { t.eval_windows = as_size(x, p); });
        r.opt("gamma_grad", [&](const json& x, const std::string& p) {
            t.gamma_grad = wrap(p, [&] { return train::parse_gamma_grad(as_string(x, p)); });
        });
        r.finish();
    });
    section("data", [&](const json& v) {
        auto& d = c.data;
        Reader r(v, "data");
        r.opt("corpus_path", [&](const json& x, const std::string& p) { d.corpus_path = as_string(x, p); });
        r.opt("vocab", [&](const json& x, const std::string& p) {
            d.vocab = wrap(p, [&] { return train::parse_vocab(as_string(x, p)); });
        });
        r.opt("split", [&](const json& x, const std::string&) {
            Reader s(x, "data.split");
            s.opt("train", [&](const json& y, const std::string& p) { d.split.train = as_real(y, p); });
            s.opt("val", [&](const json& y, const std::string& p) { d.split.val = as_real(y, p); });
            s.opt("test", [&](const json& y, const std::string& p) { d.split.test = as_real(y, p); });
            s.finish();
        });
        r.finish();
    });
    root.finish();
    c.validate();
    return c;
}

// Canonical text: sorted keys, two-space indent, trailing newline.
inline std::string serialize(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline std::string canonical_model_json(const model::ModelConfig& m) { return to_json(m).dump(); }

inline std::uint64_t model_digest(const model::ModelConfig& m) { return fnv1a64(canonical_model_json(m)); }

// Digest of everything except the seed, which names the run directory separately.
inline std::uint64_t config_digest(const RunConfig& c) {
    auto j = to_json(c);
    j["train"].erase("seed");
    return fnv1a64(j.dump());
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline json parse_json_text(const std::string& text, const std::string& origin) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON");
    }
}

// Applies "a.b.c=value". The value is read as JSON when it parses, else as a string.
inline void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    const auto key = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (!node->is_object()) {
            if (!node->is_null()) throw ConfigError("override key '" + key + "' descends into a non-object");
            *node = json::object();
        }
        if (dot == std::string::npos) {
            (*node)[part] = std::move(value);
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

// File text (may be empty for all defaults) plus overrides applied in order.
inline RunConfig load_config(const std::string& text, const std::vector<std::string>& overrides = {},
                             const std::string& origin = "<config>") {
    json j = text.empty() ? json::object() : parse_json_text(text, origin);
    for (const auto& o : overrides) apply_override(j, o);
    return from_json(j);
}

inline RunConfig load_config_file(const std::string& path, const std::vector<std::string>& overrides = {}) {
    return load_config(train::read_file(path), overrides, path);
}

}  // namespace qgpt::io
