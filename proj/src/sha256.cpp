#include "fllm/sha256.hpp"

#include <openssl/evp.h>

#include "fllm/errors.hpp"

namespace fllm {

Sha256Digest sha256(std::span<const uint8_t> bytes) {
    Sha256Digest out{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != out.size()) {
        throw Error("sha256: digest computation failed");
    }
    return out;
}

Sha256Digest sha256(std::string_view text) {
    return sha256(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(text.data()),
                                           text.size()));
}

std::string to_hex(std::span<const uint8_t> bytes) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(bytes.size() * 2);
    for (uint8_t b : bytes) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

std::string sha256_hex(std::span<const uint8_t> bytes) {
    auto d = sha256(bytes);
    return to_hex(d);
}

std::string sha256_hex(std::string_view text) {
    auto d = sha256(text);
    return to_hex(d);
}

}  // namespace fllm
