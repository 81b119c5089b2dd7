#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace saml {

/// Dense row-major FP32 matrix. Vectors are represented as 1xN tensors.
class Tensor {
public:
    Tensor() = default;
    Tensor(int rows, int cols);

    static Tensor zeros(int rows, int cols);
    static Tensor full(int rows, int cols, float value);
    static Tensor identity(int n);
    static Tensor from(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor row(std::initializer_list<float> values);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int64_t numel() const { return static_cast<int64_t>(rows_) * cols_; }
    bool empty() const { return numel() == 0; }

    float * data() { return data_.data(); }
    const float * data() const { return data_.data(); }

    float & at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    float at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
    float & operator[](int64_t i) { return data_[i]; }
    float operator[](int64_t i) const { return data_[i]; }

    bool same_shape(const Tensor & other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    void fill(float value);
    bool all_finite() const;
    std::string shape_str() const; // "[3x4]"

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<float> data_;
};

// Plain (non-differentiating) matrix kernels. All accumulate in double.
Tensor matmul(const Tensor & a, const Tensor & b);    // [m,k]x[k,n] -> [m,n]
Tensor matmul_nt(const Tensor & a, const Tensor & b); // [m,k]x[n,k]^T -> [m,n]
Tensor matmul_tn(const Tensor & a, const Tensor & b); // [k,m]^T x [k,n] -> [m,n]
Tensor add(const Tensor & a, const Tensor & b);
Tensor scaled(const Tensor & a, float c);

// In-place y += c * x. Shapes must match.
void axpy(Tensor & y, float c, const Tensor & x);

// Numerically stable softmax over each row.
Tensor softmax_rows_plain(const Tensor & a);

double rmse(const Tensor & a, const Tensor & b);
double max_abs_diff(const Tensor & a, const Tensor & b);

void require_same_shape(const Tensor & a, const Tensor & b, const char * op);

} // namespace saml
