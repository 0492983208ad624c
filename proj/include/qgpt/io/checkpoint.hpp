#pragma once

#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/io/binary.hpp"
#include "qgpt/io/config.hpp"
#include "qgpt/model/gpt.hpp"
#include "qgpt/quant/fake_quant_ops.hpp"
#include "qgpt/quant/pack.hpp"

namespace qgpt::io {

// Layout (all little-endian):
//   "QLMQ" | u16 version | u64 model digest | u32 len + header JSON | u32 record count | records | u32 CRC-32
// The CRC covers every byte before it. Record:
//   u16 len + name | u8 dtype | u8 ndim | u64 dims[ndim] | payload
//   float32: raw values
//   packed:  u8 bits | u8 scheme | u32 scalar count | f32 scalars | packed codes
inline constexpr std::uint8_t kMagic[4] = {'Q', 'L', 'M', 'Q'};
inline constexpr std::uint16_t kFormatVersion = 1;

enum class DType : std::uint8_t { float32 = 0, packed = 1 };

// packed: quantized matrices as codes plus clipping scalars (deployment).
// training: latent full-precision weights, so training can continue.
enum class Payload { packed, training };

inline const char* to_string(Payload p) { return p == Payload::packed ? "packed" : "training"; }

struct CheckpointInfo {
    std::uint16_t version = 0;
    std::uint64_t digest = 0;
    model::ModelConfig model;
    std::optional<QuantConfig> quant;
    Payload payload = Payload::training;
    std::size_t records = 0;
};

namespace detail {

inline void write_dims(ByteWriter& w, const Shape& s) {
    w.u8(static_cast<std::uint8_t>(s.size()));
    for (auto d : s) w.u64(d);
}

template <class T>
void write_float_record(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const T> values) {
    w.str16(name);
    w.u8(static_cast<std::uint8_t>(DType::float32));
    write_dims(w, shape);
    for (T v : values) w.f32(static_cast<float>(v));
}

// Stored clipping state of a quantizer, one row per learned quantity.
template <class T>
std::vector<T> clip_state(const quant::WeightQuantizer<T>& q) {
    return std::visit(
        [](const auto& s) -> std::vector<T> {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, quant::DynamicState<T>>) return s.gamma.vec();
            else if constexpr (std::is_same_v<S, quant::PactState<T>>) {
                auto v = s.alpha_neg.vec();
                const auto p = s.alpha_pos.vec();
                v.insert(v.end(), p.begin(), p.end());
                return v;
            } else if constexpr (std::is_same_v<S, quant::LsqState<T>>) return s.step.vec();
            else return s.alpha;
        },
        q.state);
}

template <class T>
void restore_clip_state(quant::WeightQuantizer<T>& q, const std::vector<T>& v) {
    const auto G = q.groups();
    const auto per = q.spec.scheme == quant::Scheme::pact ? 2u : 1u;
    if (v.size() != per * G) throw IntegrityError("clip record for '" + q.param + "' has the wrong size");
    std::visit(
        [&](auto& s) {
            using S = std::decay_t<decltype(s)>;
            auto fill = [&](Tensor<T>& t, std::size_t off) { std::copy_n(v.begin() + static_cast<long>(off), G, t.data().begin()); };
            if constexpr (std::is_same_v<S, quant::DynamicState<T>>) fill(s.gamma, 0);
            else if constexpr (std::is_same_v<S, quant::PactState<T>>) {
                fill(s.alpha_neg, 0);
                fill(s.alpha_pos, G);
            } else if constexpr (std::is_same_v<S, quant::LsqState<T>>) fill(s.step, 0);
            else s.alpha = v;
        },
        q.state);
}

// Codes of weights that already lie on the grid of q.frozen_scalars.
template <class T>
quant::CodedTensor<T> encode_frozen(const quant::WeightQuantizer<T>& q, const Tensor<T>& t, std::size_t groups) {
    const int bits = q.spec.bits;
    const auto k = static_cast<std::uint32_t>(quant::level_k(bits));
    const std::size_t per = q.spec.scheme == quant::Scheme::pact ? 2 : 1;
    if (q.frozen_scalars.size() != groups * per) throw ContractError("frozen quantizer of '" + q.param + "' has no stored scalars");
    quant::CodedTensor<T> c{std::vector<std::uint32_t>(t.numel()), q.frozen_scalars, bits};
    const auto gs = t.numel() / groups;
    std::vector<std::uint32_t> all(2 * k + 1);
    std::iota(all.begin(), all.end(), 0u);
    for (std::size_t g = 0; g < groups; ++g) {
        const quant::CodedTensor<T> grid{all, std::vector<T>(q.frozen_scalars.begin() + static_cast<long>(g * per),
                                                             q.frozen_scalars.begin() + static_cast<long>((g + 1) * per)),
                                         bits};
        const auto levels = quant::decode_weight<T>(q.spec.scheme, grid, 1);
        for (std::size_t i = 0; i < gs; ++i) {
            const T w = t.data()[g * gs + i];
            const auto it = std::lower_bound(levels.begin(), levels.end(), w);
            if (it == levels.end() || *it != w) {
                throw ContractError("frozen weights of '" + q.param + "' are not on their quantization grid");
            }
            c.codes[g * gs + i] = static_cast<std::uint32_t>(it - levels.begin());
        }
    }
    return c;
}

struct RawRecord {
    std::string name;
    DType dtype = DType::float32;
    Shape shape;
    std::vector<float> values;  // float32 records
    int bits = 0;               // packed records
    quant::Scheme scheme = quant::Scheme::dynamic;
    std::vector<float> scalars;
    std::vector<std::uint32_t> codes;
};

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline RawRecord read_record(ByteReader& r) {
    RawRecord rec;
    rec.name = r.str16();
    const auto tag = r.u8();
    if (tag > 1) throw IntegrityError("record '" + rec.name + "': unknown dtype tag " + std::to_string(tag));
    rec.dtype = static_cast<DType>(tag);
    const auto nd = r.u8();
    for (int i = 0; i < nd; ++i) rec.shape.push_back(static_cast<std::size_t>(r.u64()));
    const auto n = numel(rec.shape);
    if (rec.dtype == DType::float32) {
        if (n > r.remaining() / 4) throw IntegrityError("record '" + rec.name + "' exceeds the file");
        rec.values.resize(n);
        for (auto& v : rec.values) v = r.f32();
    } else {
        rec.bits = r.u8();
        const auto s = r.u8();
        if (s >= quant::kSchemeNames.size()) throw IntegrityError("record '" + rec.name + "': unknown scheme tag");
        rec.scheme = static_cast<quant::Scheme>(s);
        const auto count = r.u32();
        if (count > r.remaining() / 4) throw IntegrityError("record '" + rec.name + "' exceeds the file");
        rec.scalars.resize(count);
        for (auto& v : rec.scalars) v = r.f32();
        if (rec.bits != 2 && rec.bits != 4 && rec.bits != 8) throw IntegrityError("record '" + rec.name + "': bad bit-width");
        rec.codes = quant::unpack_bits(r.bytes(quant::packed_size(n, rec.bits)), n, rec.bits);
    }
    return rec;
}

}  // namespace detail

// Serializes a model. Packed payloads store each quantized matrix only as codes
// and clipping scalars; every other tensor is float32.
template <class T>
std::vector<std::uint8_t> encode_checkpoint(const model::GptModel<T>& m, Payload payload = Payload::packed) {
    const bool quantized = !m.weight_quantizers().empty() || !m.act_quantizers().empty();
    json header;
    header["model"] = to_json(m.config());
    header["payload"] = to_string(payload);
    if (quantized) header["quant"] = to_json(QuantConfig{m.bits(), m.scheme()});

    ByteWriter w;
    for (auto b : kMagic) w.u8(b);
    w.u16(kFormatVersion);
    w.u64(model_digest(m.config()));
    w.str32(header.dump());

    std::size_t count = m.param_names().size() + m.weight_quantizers().size() + m.act_quantizers().size();
    w.u32(static_cast<std::uint32_t>(count));
    for (const auto& name : m.param_names()) {
        const auto& t = m.param(name);
        const auto* q = m.weight_quantizer(name);
        // Frozen weights have no latent copy left, so they stay packed either way.
        if (q == nullptr || (payload == Payload::training && !q->frozen)) {
            detail::write_float_record<T>(w, name, t.shape(), t.data());
            continue;
        }
        const auto groups = q->spec.granularity == quant::Granularity::per_row ? t.rows() : 1;
        const auto c = q->frozen ? detail::encode_frozen(*q, t, groups) : quant::encode_weight(*q, t);
        w.str16(name);
        w.u8(static_cast<std::uint8_t>(DType::packed));
        detail::write_dims(w, t.shape());
        w.u8(static_cast<std::uint8_t>(c.bits));
        w.u8(static_cast<std::uint8_t>(q->spec.scheme));
        w.u32(static_cast<std::uint32_t>(c.scalars.size()));
        for (T s : c.scalars) w.f32(static_cast<float>(s));
        w.bytes(quant::pack_bits(c.codes, c.bits));
    }
    for (const auto& q : m.weight_quantizers()) {
        const auto v = detail::clip_state(q);
        const std::size_t per = q.spec.scheme == quant::Scheme::pact ? 2 : 1;
        detail::write_float_record<T>(w, q.param + ".clip", Shape{per, v.size() / per}, v);
    }
    for (const auto& q : m.act_quantizers()) {
        const std::vector<T> v{q.range.initialized ? T(1) : T(0), q.range.lo, q.range.hi};
        detail::write_float_record<T>(w, "act/" + q.site, Shape{3}, v);
    }
    w.u32(crc32(w.buffer()));
    return w.buffer();
}

namespace detail {

// Validates magic, version and CRC; returns a reader positioned after the version.
inline ByteReader open_checked(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 + 2 + 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
        throw IntegrityError("not a checkpoint (bad magic or truncated)");
    }
    ByteReader r(bytes.subspan(4));
    const auto version = r.u16();
    if (version != kFormatVersion) {
        throw UnsupportedVersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                                      std::to_string(kFormatVersion) + ")");
    }
    const auto body = bytes.first(bytes.size() - 4);
    ByteReader tail(bytes.last(4));
    if (crc32(body) != tail.u32()) throw IntegrityError("checkpoint CRC mismatch (file is corrupt or truncated)");
    return ByteReader(body.subspan(6));
}

inline CheckpointInfo read_header(ByteReader& r) {
    CheckpointInfo info;
    info.version = kFormatVersion;
    info.digest = r.u64();
    json h;
    try {
        h = json::parse(r.str32());
        info.model = model_from_json(h.at("model"));
        if (h.contains("quant")) info.quant = quant_from_json(h.at("quant"));
        const auto p = h.at("payload").get<std::string>();
        if (p != "packed" && p != "training") throw IntegrityError("unknown payload '" + p + "'");
        info.payload = p == "packed" ? Payload::packed : Payload::training;
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw IntegrityError(std::string("checkpoint header: ") + e.what());
    }
    if (info.digest != model_digest(info.model)) throw IntegrityError("checkpoint header digest does not match its model config");
    info.records = r.u32();
    return info;
}

}  // namespace detail

inline CheckpointInfo inspect_checkpoint(std::span<const std::uint8_t> bytes) {
    auto r = detail::open_checked(bytes);
    return detail::read_header(r);
}

template <class T>
model::GptModel<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
    auto r = detail::open_checked(bytes);
    const auto info = detail::read_header(r);
    std::map<std::string, detail::RawRecord> recs;
    for (std::size_t i = 0; i < info.records; ++i) {
        auto rec = detail::read_record(r);
        auto name = rec.name;
        if (!recs.emplace(name, std::move(rec)).second) throw IntegrityError("duplicate record '" + name + "'");
    }
    if (r.remaining() != 0) throw IntegrityError("trailing bytes after the last record");

    auto m = model::GptModel<T>::init_random(info.model, 0);
    auto take = [&](const std::string& name) -> detail::RawRecord& {
        auto it = recs.find(name);
        if (it == recs.end()) throw IntegrityError("checkpoint is missing record '" + name + "'");
        return it->second;
    };
    std::vector<std::string> packed;
    std::map<std::string, std::vector<T>> scalars;
    for (const auto& name : m.param_names()) {
        auto& rec = take(name);
        auto& t = m.param(name);
        if (rec.shape != t.shape()) throw IntegrityError("record '" + name + "' has the wrong shape");
        if (rec.dtype == DType::float32) {
            std::transform(rec.values.begin(), rec.values.end(), t.data().begin(), [](float v) { return static_cast<T>(v); });
        } else {
            const auto groups = name == "tok_emb" ? t.rows() : 1;
            quant::CodedTensor<T> c{rec.codes, std::vector<T>(rec.scalars.begin(), rec.scalars.end()), rec.bits};
            const auto v = quant::decode_weight<T>(rec.scheme, c, groups);
            std::copy(v.begin(), v.end(), t.data().begin());
            packed.push_back(name);
            scalars[name] = c.scalars;
        }
    }
    if (info.quant) {
        m.assign_quantizers(info.quant->bits, info.quant->scheme, false);
        for (auto& q : m.weight_quantizers()) {
            auto& rec = take(q.param + ".clip");
            detail::restore_clip_state(q, std::vector<T>(rec.values.begin(), rec.values.end()));
            if (auto it = scalars.find(q.param); it != scalars.end()) {
                q.frozen = true;
                q.frozen_scalars = it->second;
            }
        }
        if (scalars.size() != packed.size()) throw IntegrityError("packed record without a matching quantizer");
        for (auto& q : m.act_quantizers()) {
            auto& rec = take("act/" + q.site);
            if (rec.values.size() != 3) throw IntegrityError("activation record for '" + q.site + "' has the wrong size");
            q.range.initialized = rec.values[0] != 0;
            q.range.lo = static_cast<T>(rec.values[1]);
            q.range.hi = static_cast<T>(rec.values[2]);
        }
    } else if (!packed.empty()) {
        throw IntegrityError("packed records in a checkpoint without a quantization spec");
    }
    return m;
}

template <class T>
void save_checkpoint(const model::GptModel<T>& m, const std::string& path, Payload payload = Payload::packed) {
    write_bytes(path, encode_checkpoint(m, payload));
}

template <class T>
model::GptModel<T> load_checkpoint(const std::string& path) {
    return decode_checkpoint<T>(read_bytes(path));
}

}  // namespace qgpt::io
