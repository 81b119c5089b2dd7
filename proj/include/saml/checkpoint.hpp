#pragma once

#include <string>

#include "saml/model.hpp"

namespace saml {

// Binary model container. Layout (all integers little-endian):
//   magic "SAMLCKPT", u32 version,
//   u64 meta_len, meta JSON (config, stage, per-layer modes),
//   u32 tensor count, then per tensor:
//     u16 name_len, name, u8 dtype (0 fp32, 1 nf4, 2 uniform4),
//     u32 rows, u32 cols, u32 block_size,
//     u64 payload_len, payload, u32 crc32(payload).
// FP32 payloads are raw row-major floats; quantized payloads are
// u32 n_scales, the scales, then the packed codes.
constexpr uint32_t CHECKPOINT_VERSION = 1;

void save_checkpoint(const TinyTransformer & m, const std::string & path);
TinyTransformer load_checkpoint(const std::string & path);

uint32_t crc32(const uint8_t * data, size_t len);

} // namespace saml
