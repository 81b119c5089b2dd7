#include "saml/tensor.hpp"

#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "saml/error.hpp"

namespace saml {

Tensor::Tensor(int rows, int cols) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) {
        throw ShapeError(fmt::format("tensor dimensions must be nonnegative, got [{}x{}]", rows, cols));
    }
    data_.assign(static_cast<size_t>(rows) * cols, 0.0f);
}

Tensor Tensor::zeros(int rows, int cols) {
    return Tensor(rows, cols);
}

Tensor Tensor::full(int rows, int cols, float value) {
    Tensor t(rows, cols);
    t.fill(value);
    return t;
}

Tensor Tensor::identity(int n) {
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) {
        t.at(i, i) = 1.0f;
    }
    return t;
}

Tensor Tensor::from(std::initializer_list<std::initializer_list<float>> rows) {
    const int m = static_cast<int>(rows.size());
    const int n = m > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    Tensor t(m, n);
    int r = 0;
    for (const auto & row : rows) {
        if (static_cast<int>(row.size()) != n) {
            throw ShapeError("ragged initializer for tensor");
        }
        int c = 0;
        for (float v : row) {
            t.at(r, c++) = v;
        }
        ++r;
    }
    return t;
}

Tensor Tensor::row(std::initializer_list<float> values) {
    Tensor t(1, static_cast<int>(values.size()));
    int c = 0;
    for (float v : values) {
        t.at(0, c++) = v;
    }
    return t;
}

void Tensor::fill(float value) {
    std::fill(data_.begin(), data_.end(), value);
}

bool Tensor::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string Tensor::shape_str() const {
    return fmt::format("[{}x{}]", rows_, cols_);
}

void require_same_shape(const Tensor & a, const Tensor & b, const char * op) {
    if (!a.same_shape(b)) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, a.shape_str(), b.shape_str()));
    }
}

Tensor matmul(const Tensor & a, const Tensor & b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul: inner dimensions disagree, {} x {}", a.shape_str(), b.shape_str()));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out(m, n);
    std::vector<double> acc(n);
    for (int i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float * arow = a.data() + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double s = arow[p];
            const float * brow = b.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                acc[j] += s * brow[j];
            }
        }
        float * orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            orow[j] = static_cast<float>(acc[j]);
        }
    }
    return out;
}

Tensor matmul_nt(const Tensor & a, const Tensor & b) {
    if (a.cols() != b.cols()) {
        throw ShapeError(fmt::format("matmul_nt: inner dimensions disagree, {} x {}^T", a.shape_str(), b.shape_str()));
    }
    const int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out(m, n);
    for (int i = 0; i < m; ++i) {
        const float * arow = a.data() + static_cast<size_t>(i) * k;
        float * orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float * brow = b.data() + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                acc += static_cast<double>(arow[p]) * brow[p];
            }
            orow[j] = static_cast<float>(acc);
        }
    }
    return out;
}

Tensor matmul_tn(const Tensor & a, const Tensor & b) {
    if (a.rows() != b.rows()) {
        throw ShapeError(fmt::format("matmul_tn: inner dimensions disagree, {}^T x {}", a.shape_str(), b.shape_str()));
    }
    const int k = a.rows(), m = a.cols(), n = b.cols();
    Tensor out(m, n);
    std::vector<double> acc(static_cast<size_t>(m) * n, 0.0);
    for (int p = 0; p < k; ++p) {
        const float * arow = a.data() + static_cast<size_t>(p) * m;
        const float * brow = b.data() + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double s = arow[i];
            double * accrow = acc.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                accrow[j] += s * brow[j];
            }
        }
    }
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = static_cast<float>(acc[i]);
    }
    return out;
}

Tensor add(const Tensor & a, const Tensor & b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] += b[i];
    }
    return out;
}

Tensor scaled(const Tensor & a, float c) {
    Tensor out = a;
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] *= c;
    }
    return out;
}

void axpy(Tensor & y, float c, const Tensor & x) {
    require_same_shape(y, x, "axpy");
    for (int64_t i = 0; i < y.numel(); ++i) {
        y[i] += c * x[i];
    }
}

Tensor softmax_rows_plain(const Tensor & a) {
    if (a.cols() < 1) {
        throw ShapeError("softmax: input must have at least one column");
    }
    Tensor out(a.rows(), a.cols());
    for (int i = 0; i < a.rows(); ++i) {
        const float * x = a.data() + static_cast<size_t>(i) * a.cols();
        float * y = out.data() + static_cast<size_t>(i) * a.cols();
        float mx = x[0];
        for (int j = 1; j < a.cols(); ++j) {
            mx = std::max(mx, x[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < a.cols(); ++j) {
            const double e = std::exp(static_cast<double>(x[j]) - mx);
            y[j] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < a.cols(); ++j) {
            y[j] = static_cast<float>(y[j] * inv);
        }
    }
    return out;
}

double rmse(const Tensor & a, const Tensor & b) {
    require_same_shape(a, b, "rmse");
    if (a.numel() == 0) {
        return 0.0;
    }
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.numel()));
}

double max_abs_diff(const Tensor & a, const Tensor & b) {
    require_same_shape(a, b, "max_abs_diff");
    double mx = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        mx = std::max(mx, std::abs(static_cast<double>(a[i]) - b[i]));
    }
    return mx;
}

} // namespace saml
