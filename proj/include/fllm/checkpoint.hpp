#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fllm/minilm.hpp"

namespace fllm::ckpt {

// On-disk tensor container shared by model ("FLLM") and adapter ("FLAD")
// checkpoints:
//   magic (4 bytes), version u16 LE, config block (u32 LE length + bytes),
//   tensor count u32 LE, then per tensor:
//   name (u16 LE length + UTF-8 bytes), rank u8, dims u32 LE each,
//   f32 data little-endian.
// Round-trips are bit-exact.

inline constexpr uint16_t kContainerVersion = 1;
inline constexpr std::array<char, 4> kModelMagic = {'F', 'L', 'L', 'M'};
inline constexpr std::array<char, 4> kAdapterMagic = {'F', 'L', 'A', 'D'};

struct TensorEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct Container {
    std::array<char, 4> magic{};
    uint16_t version = kContainerVersion;
    std::vector<uint8_t> config_block;
    std::vector<TensorEntry> tensors;
};

std::vector<uint8_t> serialize(const Container& c);
Container parse(std::span<const uint8_t> bytes, std::array<char, 4> expected_magic);

void save_file(const std::string& path, const Container& c);
Container load_file(const std::string& path, std::array<char, 4> expected_magic);

// Little-endian primitive helpers, shared with the wire format.
void put_u16(std::vector<uint8_t>& out, uint16_t v);
void put_u32(std::vector<uint8_t>& out, uint32_t v);
void put_u64(std::vector<uint8_t>& out, uint64_t v);
void put_f32(std::vector<uint8_t>& out, float v);

class Reader {
public:
    explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}
    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    float f32();
    std::span<const uint8_t> raw(size_t n);
    size_t remaining() const { return bytes_.size() - pos_; }
    size_t pos() const { return pos_; }

private:
    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
};

// Model checkpoint (magic FLLM). The config block stores the ModelConfig.
void save_model(const std::string& path, MiniLM& model);
MiniLM load_model(const std::string& path);

std::vector<uint8_t> model_config_block(const ModelConfig& cfg);
ModelConfig parse_model_config_block(std::span<const uint8_t> block);

// Hash of the serialized base weights; used to assert base-weight freezing.
std::string model_weights_sha256(MiniLM& model);

}  // namespace fllm::ckpt
