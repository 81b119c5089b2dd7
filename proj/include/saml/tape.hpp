#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "saml/tensor.hpp"

namespace saml {

/// A named trainable (or frozen) tensor with its gradient buffer.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string name_, Tensor value_, bool trainable_ = true)
        : name(std::move(name_)),
          value(std::move(value_)),
          grad(Tensor::zeros(value.rows(), value.cols())),
          trainable(trainable_) {}

    void zero_grad() { grad.fill(0.0f); }
};

/// Handle to a node on a Tape.
struct Value {
    int32_t idx = -1;
    bool valid() const { return idx >= 0; }
};

/// Reverse-mode differentiation tape over 2-D FP32 tensors. Single
/// threaded; build a fresh tape per forward pass.
class Tape {
public:
    Value constant(Tensor v);
    Value param(Parameter & p);

    Value matmul(Value a, Value b);    // [m,k]x[k,n]
    Value matmul_nt(Value a, Value b); // [m,k]x[n,k]^T
    Value add(Value a, Value b);
    Value scale(Value a, float c);
    Value add_row(Value a, Value row); // broadcast a [m,n] + row [1,n]
    Value gelu(Value a);
    Value softmax_rows(Value a);
    Value layer_norm(Value a, Value gamma, Value beta);
    // Scales row t of m by gates(t, expert).
    Value gate_scale(Value m, Value gates, int expert);
    // Fused multi-head self attention over one sequence: q,k,v are [len,d].
    Value attention(Value q, Value k, Value v, int n_heads);
    Value slice_rows(Value a, int start, int count);
    Value concat_rows(const std::vector<Value> & parts);
    Value mean_rows(Value a); // [m,n] -> [1,n]
    Value sum(Value a);       // -> [1,1]
    Value embedding(Value table, const std::vector<int> & ids);
    // Mean over rows of -log softmax(logits)[target].
    Value cross_entropy(Value logits, const std::vector<int> & targets);

    const Tensor & value(Value v) const;
    const Tensor & grad(Value v) const;

    // Seeds d(loss)/d(loss) = 1 and propagates to all trainable parameters.
    // Throws if called twice on the same tape.
    void backward(Value loss);

    size_t size() const { return nodes_.size(); }

private:
    enum class Op : uint8_t {
        constant,
        param,
        matmul,
        matmul_nt,
        add,
        scale,
        add_row,
        gelu,
        softmax_rows,
        layer_norm,
        gate_scale,
        attention,
        slice_rows,
        concat_rows,
        mean_rows,
        sum,
        embedding,
        cross_entropy,
    };

    struct Node {
        Op op;
        Tensor value;
        Tensor grad; // allocated on first contribution
        std::vector<int32_t> parents;
        Parameter * parameter = nullptr;
        bool needs_grad = false;
        float fval = 0.0f;  // scale constant
        int iarg0 = 0;      // expert index / n_heads / slice start
        int iarg1 = 0;      // slice count
        std::vector<int> ids;
        std::vector<Tensor> saved;
    };

    int32_t push(Node node);
    Node & node(Value v);
    const Node & node(Value v) const;
    Tensor & grad_buf(int32_t idx);
    void backprop_node(int32_t idx);

    std::vector<Node> nodes_;
    bool backward_ran_ = false;
};

} // namespace saml
