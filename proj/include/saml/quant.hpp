#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "saml/tensor.hpp"

namespace saml {

/// 16 strictly increasing levels spanning [-1, 1], with 0 at index 7.
struct Nf4Codebook {
    std::array<float, 16> values;
};

/// Levels are standard-normal quantiles: 8 over the negative half and 9
/// over the nonnegative half (duplicate zero dropped), each half scaled
/// so the endpoints land on -1 and +1.
Nf4Codebook build_nf4_codebook();

/// 16 equally spaced levels, -1 + 2i/15.
std::array<float, 16> uniform4_levels();

/// Inverse standard-normal CDF (Acklam approximation plus one Halley
/// refinement step).
double normal_quantile(double p);

enum class CodebookId : uint8_t {
    nf4 = 0,
    uniform4 = 1,
};

const std::array<float, 16> & codebook_levels(CodebookId id);
const char * codebook_name(CodebookId id);
CodebookId codebook_from_name(const std::string & name);

/// Bit-packed 4-bit codes plus one FP32 absmax scale per block. Codes are
/// stored two per byte, low nibble first, over the flattened row-major
/// tensor; the last block may be partial.
struct QuantizedTensor {
    int rows = 0;
    int cols = 0;
    int block_size = 64;
    CodebookId codebook = CodebookId::nf4;
    std::vector<uint8_t> codes;
    std::vector<float> scales;

    int64_t numel() const { return static_cast<int64_t>(rows) * cols; }
    int64_t num_blocks() const { return (numel() + block_size - 1) / block_size; }
    int code_at(int64_t i) const {
        const uint8_t byte = codes[i / 2];
        return (i % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
    }
    int64_t payload_bytes() const {
        return static_cast<int64_t>(codes.size()) + static_cast<int64_t>(scales.size()) * 4;
    }
    void validate() const; // throws FormatError on structural problems
};

struct QuantReport {
    float bits_per_weight = 0;
    float compression_ratio_vs_fp32 = 0;
    float rmse = 0;
    float max_abs_err = 0;
};

QuantizedTensor quantize_blockwise(const Tensor & w, int block_size, CodebookId codebook);
QuantizedTensor quantize_uniform4(const Tensor & w, int block_size);
Tensor dequantize(const QuantizedTensor & q);
QuantReport measure(const QuantizedTensor & q, const Tensor & original);

/// Index of the nearest level; equidistant values take the lower index.
int nearest_level(const std::array<float, 16> & levels, float v);

} // namespace saml
