#include "saml/quant.hpp"

#include <cmath>

#include <fmt/format.h>

#include "saml/error.hpp"

namespace saml {

namespace {

// Probability mass assigned outside the outermost quantile, following the
// reference NormalFloat construction.
constexpr double NF4_OFFSET = 0.9677083;

double acklam_ppf(double p) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    double q, r;
    if (p < plow) {
        q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > 1.0 - plow) {
        q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    q = p - 0.5;
    r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

} // namespace

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw ValidationError(fmt::format("normal_quantile: p={} outside (0,1)", p));
    }
    double x = acklam_ppf(p);
    // Halley refinement against the exact CDF
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
    x = x - u / (1.0 + x * u / 2.0);
    return x;
}

Nf4Codebook build_nf4_codebook() {
    Nf4Codebook cb{};
    const double lo = 1.0 - NF4_OFFSET;
    // 8 quantiles over [lo, 0.5], scaled to [-1, 0]
    double neg[8];
    for (int i = 0; i < 8; ++i) {
        const double p = lo + (0.5 - lo) * i / 7.0;
        neg[i] = (i == 7) ? 0.0 : normal_quantile(p);
    }
    const double neg_scale = -neg[0];
    // 9 quantiles over [0.5, NF4_OFFSET], scaled to [0, 1]
    double pos[9];
    for (int i = 0; i < 9; ++i) {
        const double p = 0.5 + (NF4_OFFSET - 0.5) * i / 8.0;
        pos[i] = (i == 0) ? 0.0 : normal_quantile(p);
    }
    const double pos_scale = pos[8];
    for (int i = 0; i < 8; ++i) {
        cb.values[i] = static_cast<float>(neg[i] / neg_scale);
    }
    for (int i = 1; i < 9; ++i) {
        cb.values[7 + i] = static_cast<float>(pos[i] / pos_scale);
    }
    cb.values[0] = -1.0f;
    cb.values[7] = 0.0f;
    cb.values[15] = 1.0f;
    return cb;
}

std::array<float, 16> uniform4_levels() {
    std::array<float, 16> levels{};
    for (int i = 0; i < 16; ++i) {
        levels[i] = -1.0f + 2.0f * i / 15.0f;
    }
    return levels;
}

const std::array<float, 16> & codebook_levels(CodebookId id) {
    static const std::array<float, 16> nf4 = build_nf4_codebook().values;
    static const std::array<float, 16> uni = uniform4_levels();
    switch (id) {
        case CodebookId::nf4:
            return nf4;
        case CodebookId::uniform4:
            return uni;
    }
    throw FormatError(fmt::format("unknown codebook id {}", static_cast<int>(id)));
}

const char * codebook_name(CodebookId id) {
    return id == CodebookId::nf4 ? "nf4" : "uniform4";
}

CodebookId codebook_from_name(const std::string & name) {
    if (name == "nf4") {
        return CodebookId::nf4;
    }
    if (name == "uniform4") {
        return CodebookId::uniform4;
    }
    throw FormatError(fmt::format("unknown codebook '{}'", name));
}

int nearest_level(const std::array<float, 16> & levels, float v) {
    int best = 0;
    float best_d = std::abs(v - levels[0]);
    for (int i = 1; i < 16; ++i) {
        const float d = std::abs(v - levels[i]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

void QuantizedTensor::validate() const {
    if (rows < 0 || cols < 0 || block_size < 1) {
        throw FormatError(fmt::format("quantized tensor: bad geometry [{}x{}] block {}", rows, cols, block_size));
    }
    if (codebook != CodebookId::nf4 && codebook != CodebookId::uniform4) {
        throw FormatError(fmt::format("quantized tensor: unknown codebook id {}", static_cast<int>(codebook)));
    }
    const int64_t n = numel();
    if (static_cast<int64_t>(codes.size()) != (n + 1) / 2) {
        throw FormatError(fmt::format("quantized tensor: {} code bytes for {} values", codes.size(), n));
    }
    if (static_cast<int64_t>(scales.size()) != num_blocks()) {
        throw FormatError(fmt::format("quantized tensor: {} scales for {} blocks", scales.size(), num_blocks()));
    }
    if (n % 2 == 1 && !codes.empty() && (codes.back() >> 4) != 0) {
        throw FormatError("quantized tensor: corrupt trailing code nibble");
    }
    for (size_t i = 0; i < scales.size(); ++i) {
        if (!(scales[i] >= 0.0f) || !std::isfinite(scales[i])) {
            throw FormatError(fmt::format("quantized tensor: bad scale {} in block {}", scales[i], i));
        }
    }
}

QuantizedTensor quantize_blockwise(const Tensor & w, int block_size, CodebookId codebook) {
    if (block_size < 1) {
        throw ValidationError(fmt::format("quantize: block_size must be >= 1, got {}", block_size));
    }
    const auto & levels = codebook_levels(codebook);
    const int zero_code = nearest_level(levels, 0.0f);

    QuantizedTensor q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.block_size = block_size;
    q.codebook = codebook;
    const int64_t n = w.numel();
    q.codes.assign((n + 1) / 2, 0);
    q.scales.reserve((n + block_size - 1) / block_size);

    auto put_code = [&](int64_t i, int code) {
        if (i % 2 == 0) {
            q.codes[i / 2] = static_cast<uint8_t>(code & 0x0f);
        } else {
            q.codes[i / 2] |= static_cast<uint8_t>((code & 0x0f) << 4);
        }
    };

    for (int64_t start = 0; start < n; start += block_size) {
        const int64_t end = std::min<int64_t>(start + block_size, n);
        float absmax = 0.0f;
        for (int64_t i = start; i < end; ++i) {
            const float v = w[i];
            if (!std::isfinite(v)) {
                throw NumericError(fmt::format("quantize: non-finite value at flat index {}", i));
            }
            absmax = std::max(absmax, std::abs(v));
        }
        q.scales.push_back(absmax);
        if (absmax == 0.0f) {
            for (int64_t i = start; i < end; ++i) {
                put_code(i, zero_code);
            }
            continue;
        }
        const float inv = 1.0f / absmax;
        for (int64_t i = start; i < end; ++i) {
            put_code(i, nearest_level(levels, w[i] * inv));
        }
    }
    return q;
}

QuantizedTensor quantize_uniform4(const Tensor & w, int block_size) {
    return quantize_blockwise(w, block_size, CodebookId::uniform4);
}

Tensor dequantize(const QuantizedTensor & q) {
    q.validate();
    const auto & levels = codebook_levels(q.codebook);
    Tensor out(q.rows, q.cols);
    const int64_t n = q.numel();
    for (int64_t i = 0; i < n; ++i) {
        out[i] = levels[q.code_at(i)] * q.scales[i / q.block_size];
    }
    return out;
}

QuantReport measure(const QuantizedTensor & q, const Tensor & original) {
    if (q.rows != original.rows() || q.cols != original.cols()) {
        throw ShapeError(fmt::format("measure: quantized [{}x{}] vs original {}",
                                     q.rows, q.cols, original.shape_str()));
    }
    QuantReport r;
    r.bits_per_weight = 4.0f + 32.0f / q.block_size;
    r.compression_ratio_vs_fp32 = 32.0f / r.bits_per_weight;
    const Tensor deq = dequantize(q);
    r.rmse = static_cast<float>(rmse(deq, original));
    r.max_abs_err = static_cast<float>(max_abs_diff(deq, original));
    return r;
}

} // namespace saml
