#include "saml/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "saml/error.hpp"

namespace saml {

using nlohmann::json;

namespace {

constexpr char MAGIC[8] = {'S', 'A', 'M', 'L', 'C', 'K', 'P', 'T'};

enum : uint8_t { DTYPE_FP32 = 0, DTYPE_NF4 = 1, DTYPE_UNIFORM4 = 2 };

class Writer {
public:
    explicit Writer(const std::string & path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) {
            throw Error(fmt::format("cannot open '{}' for writing", path));
        }
    }
    void bytes(const void * p, size_t n) { out_.write(static_cast<const char *>(p), n); }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u16(uint16_t v) { put_le(v); }
    void u32(uint32_t v) { put_le(v); }
    void u64(uint64_t v) { put_le(v); }
    void close() {
        out_.close();
        if (!out_) {
            throw Error(fmt::format("write to '{}' failed", path_));
        }
    }

private:
    template <typename T>
    void put_le(T v) {
        uint8_t buf[sizeof(T)];
        for (size_t i = 0; i < sizeof(T); ++i) {
            buf[i] = static_cast<uint8_t>(v >> (8 * i));
        }
        bytes(buf, sizeof(T));
    }
    std::string path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string & path) : in_(path, std::ios::binary) {
        if (!in_) {
            throw Error(fmt::format("cannot open '{}' for reading", path));
        }
    }
    void bytes(void * p, size_t n) {
        in_.read(static_cast<char *>(p), n);
        if (static_cast<size_t>(in_.gcount()) != n) {
            throw FormatError("checkpoint truncated");
        }
    }
    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint16_t u16() { return get_le<uint16_t>(); }
    uint32_t u32() { return get_le<uint32_t>(); }
    uint64_t u64() { return get_le<uint64_t>(); }

private:
    template <typename T>
    T get_le() {
        uint8_t buf[sizeof(T)];
        bytes(buf, sizeof(T));
        T v = 0;
        for (size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<T>(buf[i]) << (8 * i);
        }
        return v;
    }
    std::ifstream in_;
};

json config_to_json(const ModelConfig & c) {
    return json{{"vocab_size", c.vocab_size},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"n_blocks", c.n_blocks},
                {"ff_hidden", c.ff_hidden},
                {"n_experts", c.n_experts},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"saml_targets", c.saml_targets},
                {"block_size", c.block_size},
                {"seed", c.seed}};
}

ModelConfig config_from_json(const json & j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_blocks = j.at("n_blocks").get<int>();
    c.ff_hidden = j.at("ff_hidden").get<int>();
    c.n_experts = j.at("n_experts").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<float>();
    c.saml_targets = j.at("saml_targets").get<std::array<bool, 4>>();
    c.block_size = j.at("block_size").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

std::vector<uint8_t> encode_fp32(const Tensor & t) {
    std::vector<uint8_t> out(t.numel() * 4);
    for (int64_t i = 0; i < t.numel(); ++i) {
        const float v = t[i];
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        for (int b = 0; b < 4; ++b) {
            out[i * 4 + b] = static_cast<uint8_t>(bits >> (8 * b));
        }
    }
    return out;
}

Tensor decode_fp32(const std::vector<uint8_t> & bytes, int rows, int cols) {
    Tensor t(rows, cols);
    if (bytes.size() != static_cast<size_t>(t.numel()) * 4) {
        throw FormatError(fmt::format("fp32 payload of {} bytes for {} values", bytes.size(), t.numel()));
    }
    for (int64_t i = 0; i < t.numel(); ++i) {
        uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<uint32_t>(bytes[i * 4 + b]) << (8 * b);
        }
        std::memcpy(&t[i], &bits, 4);
    }
    return t;
}

std::vector<uint8_t> encode_quant(const QuantizedTensor & q) {
    std::vector<uint8_t> out;
    out.reserve(4 + q.scales.size() * 4 + q.codes.size());
    auto push_u32 = [&](uint32_t v) {
        for (int b = 0; b < 4; ++b) {
            out.push_back(static_cast<uint8_t>(v >> (8 * b)));
        }
    };
    push_u32(static_cast<uint32_t>(q.scales.size()));
    for (float s : q.scales) {
        uint32_t bits;
        std::memcpy(&bits, &s, 4);
        push_u32(bits);
    }
    out.insert(out.end(), q.codes.begin(), q.codes.end());
    return out;
}

QuantizedTensor decode_quant(const std::vector<uint8_t> & bytes, int rows, int cols,
                             int block_size, CodebookId cb) {
    QuantizedTensor q;
    q.rows = rows;
    q.cols = cols;
    q.block_size = block_size;
    q.codebook = cb;
    if (bytes.size() < 4) {
        throw FormatError("quantized payload too short");
    }
    uint32_t n_scales = 0;
    for (int b = 0; b < 4; ++b) {
        n_scales |= static_cast<uint32_t>(bytes[b]) << (8 * b);
    }
    const size_t scale_bytes = static_cast<size_t>(n_scales) * 4;
    if (bytes.size() < 4 + scale_bytes) {
        throw FormatError("quantized payload truncated in scales");
    }
    q.scales.resize(n_scales);
    for (uint32_t i = 0; i < n_scales; ++i) {
        uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<uint32_t>(bytes[4 + i * 4 + b]) << (8 * b);
        }
        std::memcpy(&q.scales[i], &bits, 4);
    }
    q.codes.assign(bytes.begin() + 4 + scale_bytes, bytes.end());
    q.validate();
    return q;
}

} // namespace

uint32_t crc32(const uint8_t * data, size_t len) {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) {
                c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            }
            table[i] = c;
        }
        init = true;
    }
    uint32_t c = 0xffffffffu;
    for (size_t i = 0; i < len; ++i) {
        c = table[(c ^ data[i]) & 0xff] ^ (c >> 8);
    }
    return c ^ 0xffffffffu;
}

void save_checkpoint(const TinyTransformer & m, const std::string & path) {
    auto & model = const_cast<TinyTransformer &>(m);

    json modes = json::object();
    model.for_each_saml([&](SamlLayer & l) {
        modes[l.name] = json{{"mode", saml_mode_name(l.mode)}, {"dominant", l.dominant_expert}};
    });
    json meta{{"format", CHECKPOINT_VERSION},
              {"config", config_to_json(model.config())},
              {"stage", model.meta.stage},
              {"speaker_id", model.meta.speaker_id},
              {"pretrain_speakers", model.meta.pretrain_speakers},
              {"adapters_quantized", model.meta.adapters_quantized},
              {"saml_modes", modes}};
    if (model.meta.compression.has_value()) {
        meta["compression"] = json{{"bits_per_weight", model.meta.compression->bits_per_weight},
                                   {"payload_ratio", model.meta.compression->payload_ratio},
                                   {"rmse", model.meta.compression->rmse}};
    } else {
        meta["compression"] = nullptr;
    }
    const std::string meta_str = meta.dump();

    auto bindings = model.tensor_bindings();
    Writer w(path);
    w.bytes(MAGIC, 8);
    w.u32(CHECKPOINT_VERSION);
    w.u64(meta_str.size());
    w.bytes(meta_str.data(), meta_str.size());
    w.u32(static_cast<uint32_t>(bindings.size()));
    for (auto & b : bindings) {
        uint8_t dtype = DTYPE_FP32;
        int rows, cols;
        uint32_t block_size = 0;
        std::vector<uint8_t> payload;
        const QuantizedTensor * q = nullptr;
        if (b.base != nullptr && b.base->quantized()) {
            q = &*b.base->q;
        } else if (b.param != nullptr) {
            auto it = model.quantized_adapters.find(b.name);
            if (it != model.quantized_adapters.end()) {
                q = &it->second;
            }
        }
        if (q != nullptr) {
            dtype = q->codebook == CodebookId::nf4 ? DTYPE_NF4 : DTYPE_UNIFORM4;
            rows = q->rows;
            cols = q->cols;
            block_size = static_cast<uint32_t>(q->block_size);
            payload = encode_quant(*q);
        } else {
            const Tensor & t = b.base != nullptr ? b.base->fp32 : b.param->value;
            rows = t.rows();
            cols = t.cols();
            payload = encode_fp32(t);
        }
        w.u16(static_cast<uint16_t>(b.name.size()));
        w.bytes(b.name.data(), b.name.size());
        w.u8(dtype);
        w.u32(static_cast<uint32_t>(rows));
        w.u32(static_cast<uint32_t>(cols));
        w.u32(block_size);
        w.u64(payload.size());
        w.bytes(payload.data(), payload.size());
        w.u32(crc32(payload.data(), payload.size()));
    }
    w.close();
}

TinyTransformer load_checkpoint(const std::string & path) {
    Reader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, MAGIC, 8) != 0) {
        throw FormatError(fmt::format("'{}' is not a checkpoint (bad magic)", path));
    }
    const uint32_t version = r.u32();
    if (version != CHECKPOINT_VERSION) {
        throw FormatError(fmt::format("unsupported checkpoint version {} (expected {})", version, CHECKPOINT_VERSION));
    }
    const uint64_t meta_len = r.u64();
    std::string meta_str(meta_len, '\0');
    r.bytes(meta_str.data(), meta_len);
    json meta;
    try {
        meta = json::parse(meta_str);
    } catch (const json::exception & e) {
        throw FormatError(fmt::format("checkpoint metadata is not valid JSON: {}", e.what()));
    }

    const ModelConfig cfg = config_from_json(meta.at("config"));
    std::map<std::string, std::pair<SamlMode, int>> modes;
    for (auto & [name, jm] : meta.at("saml_modes").items()) {
        modes[name] = {saml_mode_from_name(jm.at("mode").get<std::string>()),
                       jm.at("dominant").get<int>()};
    }
    TinyTransformer m = TinyTransformer::build_skeleton(cfg, modes);
    m.meta.stage = meta.at("stage").get<std::string>();
    m.meta.speaker_id = meta.at("speaker_id").get<int>();
    m.meta.pretrain_speakers = meta.at("pretrain_speakers").get<std::vector<int>>();
    m.meta.adapters_quantized = meta.at("adapters_quantized").get<bool>();
    if (!meta.at("compression").is_null()) {
        CompressionSummary s;
        s.bits_per_weight = meta["compression"].at("bits_per_weight").get<float>();
        s.payload_ratio = meta["compression"].at("payload_ratio").get<double>();
        s.rmse = meta["compression"].at("rmse").get<double>();
        m.meta.compression = s;
    }

    auto bindings = m.tensor_bindings();
    std::map<std::string, TinyTransformer::Binding *> by_name;
    for (auto & b : bindings) {
        by_name[b.name] = &b;
    }
    std::set<std::string> filled;

    const uint32_t n_tensors = r.u32();
    for (uint32_t ti = 0; ti < n_tensors; ++ti) {
        const uint16_t name_len = r.u16();
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        const uint8_t dtype = r.u8();
        const int rows = static_cast<int>(r.u32());
        const int cols = static_cast<int>(r.u32());
        const int block_size = static_cast<int>(r.u32());
        const uint64_t payload_len = r.u64();
        std::vector<uint8_t> payload(payload_len);
        r.bytes(payload.data(), payload_len);
        const uint32_t crc = r.u32();
        if (crc != crc32(payload.data(), payload.size())) {
            throw FormatError(fmt::format("checksum mismatch in tensor '{}'", name));
        }
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw FormatError(fmt::format("unexpected tensor '{}' in checkpoint", name));
        }
        if (!filled.insert(name).second) {
            throw FormatError(fmt::format("tensor '{}' appears twice", name));
        }
        TinyTransformer::Binding & b = *it->second;
        const Tensor & slot = b.base != nullptr ? b.base->fp32 : b.param->value;
        if (slot.rows() != rows || slot.cols() != cols) {
            throw FormatError(fmt::format("tensor '{}': stored [{}x{}] but model expects {}",
                                          name, rows, cols, slot.shape_str()));
        }
        switch (dtype) {
            case DTYPE_FP32: {
                Tensor t = decode_fp32(payload, rows, cols);
                if (b.base != nullptr) {
                    b.base->fp32 = std::move(t);
                    b.base->q.reset();
                } else {
                    b.param->value = std::move(t);
                    b.param->zero_grad();
                }
                break;
            }
            case DTYPE_NF4:
            case DTYPE_UNIFORM4: {
                const CodebookId cb = dtype == DTYPE_NF4 ? CodebookId::nf4 : CodebookId::uniform4;
                QuantizedTensor q = decode_quant(payload, rows, cols, block_size, cb);
                if (b.base != nullptr) {
                    b.base->fp32 = dequantize(q);
                    b.base->q = std::move(q);
                } else {
                    b.param->value = dequantize(q);
                    b.param->zero_grad();
                    b.param->trainable = false;
                    m.quantized_adapters.emplace(name, std::move(q));
                }
                break;
            }
            default:
                throw FormatError(fmt::format("tensor '{}': unknown dtype {}", name, dtype));
        }
    }
    for (auto & b : bindings) {
        if (filled.find(b.name) == filled.end()) {
            throw FormatError(fmt::format("checkpoint is missing tensor '{}'", b.name));
        }
    }
    return m;
}

} // namespace saml
