#include "fllm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "fllm/errors.hpp"
#include "fllm/sha256.hpp"

namespace fllm::ckpt {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float v) {
    put_u32(out, std::bit_cast<uint32_t>(v));
}

uint8_t Reader::u8() {
    if (pos_ + 1 > bytes_.size()) throw IoError("container: truncated (u8)");
    return bytes_[pos_++];
}

uint16_t Reader::u16() {
    if (pos_ + 2 > bytes_.size()) throw IoError("container: truncated (u16)");
    uint16_t v = static_cast<uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
}

uint32_t Reader::u32() {
    if (pos_ + 4 > bytes_.size()) throw IoError("container: truncated (u32)");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

uint64_t Reader::u64() {
    if (pos_ + 8 > bytes_.size()) throw IoError("container: truncated (u64)");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

float Reader::f32() {
    return std::bit_cast<float>(u32());
}

std::span<const uint8_t> Reader::raw(size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError("container: truncated (raw block)");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
}

std::vector<uint8_t> serialize(const Container& c) {
    std::vector<uint8_t> out;
    out.insert(out.end(), c.magic.begin(), c.magic.end());
    put_u16(out, c.version);
    put_u32(out, static_cast<uint32_t>(c.config_block.size()));
    out.insert(out.end(), c.config_block.begin(), c.config_block.end());
    put_u32(out, static_cast<uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        if (t.name.size() > 0xffff) throw IoError("container: tensor name too long");
        put_u16(out, static_cast<uint16_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        out.push_back(static_cast<uint8_t>(t.shape.size()));
        size_t numel = 1;
        for (int d : t.shape) {
            put_u32(out, static_cast<uint32_t>(d));
            numel *= static_cast<size_t>(d);
        }
        if (numel != t.data.size())
            throw IoError("container: tensor '" + t.name + "' shape/data mismatch");
        size_t base = out.size();
        out.resize(base + 4 * t.data.size());
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(out.data() + base, t.data.data(), 4 * t.data.size());
        } else {
            for (size_t i = 0; i < t.data.size(); ++i) {
                uint32_t v = std::bit_cast<uint32_t>(t.data[i]);
                for (int b = 0; b < 4; ++b)
                    out[base + 4 * i + b] = static_cast<uint8_t>((v >> (8 * b)) & 0xff);
            }
        }
    }
    return out;
}

Container parse(std::span<const uint8_t> bytes, std::array<char, 4> expected_magic) {
    Reader r(bytes);
    Container c;
    auto magic = r.raw(4);
    std::copy(magic.begin(), magic.end(), c.magic.begin());
    if (!std::equal(c.magic.begin(), c.magic.end(), expected_magic.begin()))
        throw IoError(std::string("container: bad magic, expected '") +
                      std::string(expected_magic.begin(), expected_magic.end()) + "'");
    c.version = r.u16();
    if (c.version != kContainerVersion)
        throw IoError("container: unsupported version " + std::to_string(c.version));
    uint32_t cfg_len = r.u32();
    auto cfg = r.raw(cfg_len);
    c.config_block.assign(cfg.begin(), cfg.end());
    uint32_t count = r.u32();
    c.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        TensorEntry t;
        uint16_t name_len = r.u16();
        auto name = r.raw(name_len);
        t.name.assign(name.begin(), name.end());
        uint8_t rank = r.u8();
        size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            uint32_t dim = r.u32();
            t.shape.push_back(static_cast<int>(dim));
            numel *= dim;
        }
        auto raw = r.raw(numel * 4);
        t.data.resize(numel);
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(t.data.data(), raw.data(), raw.size());
        } else {
            for (size_t j = 0; j < numel; ++j) {
                uint32_t v = 0;
                for (int b = 0; b < 4; ++b)
                    v |= static_cast<uint32_t>(raw[4 * j + b]) << (8 * b);
                t.data[j] = std::bit_cast<float>(v);
            }
        }
        c.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw IoError("container: trailing bytes after last tensor");
    return c;
}

void save_file(const std::string& path, const Container& c) {
    auto bytes = serialize(c);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
}

Container load_file(const std::string& path, std::array<char, 4> expected_magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return parse(bytes, expected_magic);
}

std::vector<uint8_t> model_config_block(const ModelConfig& cfg) {
    std::vector<uint8_t> b;
    put_u32(b, static_cast<uint32_t>(cfg.vocab_size));
    put_u32(b, static_cast<uint32_t>(cfg.d_model));
    put_u32(b, static_cast<uint32_t>(cfg.n_layers));
    put_u32(b, static_cast<uint32_t>(cfg.n_heads));
    put_u32(b, static_cast<uint32_t>(cfg.d_ff));
    put_u32(b, static_cast<uint32_t>(cfg.max_seq_len));
    put_u64(b, cfg.seed);
    return b;
}

ModelConfig parse_model_config_block(std::span<const uint8_t> block) {
    Reader r(block);
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(r.u32());
    cfg.d_model = static_cast<int>(r.u32());
    cfg.n_layers = static_cast<int>(r.u32());
    cfg.n_heads = static_cast<int>(r.u32());
    cfg.d_ff = static_cast<int>(r.u32());
    cfg.max_seq_len = static_cast<int>(r.u32());
    cfg.seed = r.u64();
    cfg.validate();
    return cfg;
}

void save_model(const std::string& path, MiniLM& model) {
    Container c;
    c.magic = kModelMagic;
    c.config_block = model_config_block(model.config());
    for (auto& [name, t] : model.named_parameters()) {
        TensorEntry e;
        e.name = name;
        e.shape = t.shape();
        e.data = t.values();
        c.tensors.push_back(std::move(e));
    }
    save_file(path, c);
}

MiniLM load_model(const std::string& path) {
    Container c = load_file(path, kModelMagic);
    ModelConfig cfg = parse_model_config_block(c.config_block);
    MiniLM model(cfg);
    auto named = model.named_parameters();
    if (named.size() != c.tensors.size())
        throw IoError("model checkpoint: expected " + std::to_string(named.size()) +
                      " tensors, found " + std::to_string(c.tensors.size()));
    for (size_t i = 0; i < named.size(); ++i) {
        auto& [name, t] = named[i];
        const TensorEntry& e = c.tensors[i];
        if (e.name != name || e.shape != t.shape())
            throw IoError("model checkpoint: tensor mismatch at '" + e.name + "'");
        t.values() = e.data;
    }
    return model;
}

std::string model_weights_sha256(MiniLM& model) {
    Container c;
    c.magic = kModelMagic;
    c.config_block = model_config_block(model.config());
    for (auto& [name, t] : model.named_parameters()) {
        TensorEntry e;
        e.name = name;
        e.shape = t.shape();
        e.data = t.values();
        c.tensors.push_back(std::move(e));
    }
    auto bytes = serialize(c);
    return sha256_hex(std::span<const uint8_t>(bytes.data(), bytes.size()));
}

}  // namespace fllm::ckpt
