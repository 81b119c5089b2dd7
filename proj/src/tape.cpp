#include "saml/tape.hpp"

#include <cmath>

#include <fmt/format.h>

#include "saml/error.hpp"

namespace saml {

namespace {
constexpr double LN_EPS = 1e-5;
constexpr double GELU_C = 0.7978845608028654; // sqrt(2/pi)
} // namespace

int32_t Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return static_cast<int32_t>(nodes_.size() - 1);
}

Tape::Node & Tape::node(Value v) {
    if (!v.valid() || v.idx >= static_cast<int32_t>(nodes_.size())) {
        throw Error("invalid tape handle");
    }
    return nodes_[v.idx];
}

const Tape::Node & Tape::node(Value v) const {
    if (!v.valid() || v.idx >= static_cast<int32_t>(nodes_.size())) {
        throw Error("invalid tape handle");
    }
    return nodes_[v.idx];
}

const Tensor & Tape::value(Value v) const {
    return node(v).value;
}

const Tensor & Tape::grad(Value v) const {
    const Node & n = node(v);
    if (n.grad.empty() && n.value.numel() > 0) {
        throw Error("gradient not computed for this node (run backward first)");
    }
    return n.grad;
}

Tensor & Tape::grad_buf(int32_t idx) {
    Node & n = nodes_[idx];
    if (n.grad.empty()) {
        n.grad = Tensor::zeros(n.value.rows(), n.value.cols());
    }
    return n.grad;
}

Value Tape::constant(Tensor v) {
    Node n;
    n.op = Op::constant;
    n.value = std::move(v);
    n.needs_grad = false;
    return Value{push(std::move(n))};
}

Value Tape::param(Parameter & p) {
    Node n;
    n.op = Op::param;
    n.value = p.value;
    n.parameter = &p;
    n.needs_grad = p.trainable;
    return Value{push(std::move(n))};
}

Value Tape::matmul(Value a, Value b) {
    Node n;
    n.op = Op::matmul;
    n.value = saml::matmul(node(a).value, node(b).value);
    n.parents = {a.idx, b.idx};
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::matmul_nt(Value a, Value b) {
    Node n;
    n.op = Op::matmul_nt;
    n.value = saml::matmul_nt(node(a).value, node(b).value);
    n.parents = {a.idx, b.idx};
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::add(Value a, Value b) {
    Node n;
    n.op = Op::add;
    n.value = saml::add(node(a).value, node(b).value);
    n.parents = {a.idx, b.idx};
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::scale(Value a, float c) {
    Node n;
    n.op = Op::scale;
    n.value = scaled(node(a).value, c);
    n.parents = {a.idx};
    n.fval = c;
    n.needs_grad = node(a).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::add_row(Value a, Value row) {
    const Tensor & av = node(a).value;
    const Tensor & rv = node(row).value;
    if (rv.rows() != 1 || rv.cols() != av.cols()) {
        throw ShapeError(fmt::format("add_row: {} + {}", av.shape_str(), rv.shape_str()));
    }
    Node n;
    n.op = Op::add_row;
    n.value = av;
    for (int i = 0; i < av.rows(); ++i) {
        for (int j = 0; j < av.cols(); ++j) {
            n.value.at(i, j) += rv.at(0, j);
        }
    }
    n.parents = {a.idx, row.idx};
    n.needs_grad = node(a).needs_grad || node(row).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::gelu(Value a) {
    const Tensor & av = node(a).value;
    Node n;
    n.op = Op::gelu;
    n.value = Tensor(av.rows(), av.cols());
    for (int64_t i = 0; i < av.numel(); ++i) {
        const double x = av[i];
        const double u = GELU_C * (x + 0.044715 * x * x * x);
        n.value[i] = static_cast<float>(0.5 * x * (1.0 + std::tanh(u)));
    }
    n.parents = {a.idx};
    n.needs_grad = node(a).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::softmax_rows(Value a) {
    Node n;
    n.op = Op::softmax_rows;
    n.value = softmax_rows_plain(node(a).value);
    n.parents = {a.idx};
    n.needs_grad = node(a).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::layer_norm(Value a, Value gamma, Value beta) {
    const Tensor & av = node(a).value;
    const Tensor & gv = node(gamma).value;
    const Tensor & bv = node(beta).value;
    if (gv.rows() != 1 || gv.cols() != av.cols() || !gv.same_shape(bv)) {
        throw ShapeError(fmt::format("layer_norm: {} with gamma {} beta {}",
                                     av.shape_str(), gv.shape_str(), bv.shape_str()));
    }
    Node n;
    n.op = Op::layer_norm;
    n.value = Tensor(av.rows(), av.cols());
    Tensor xhat(av.rows(), av.cols());
    Tensor inv_std(av.rows(), 1);
    const int cols = av.cols();
    for (int i = 0; i < av.rows(); ++i) {
        const float * x = av.data() + static_cast<size_t>(i) * cols;
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) {
            mean += x[j];
        }
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = x[j] - mean;
            var += d * d;
        }
        var /= cols;
        const double is = 1.0 / std::sqrt(var + LN_EPS);
        inv_std.at(i, 0) = static_cast<float>(is);
        for (int j = 0; j < cols; ++j) {
            const float xh = static_cast<float>((x[j] - mean) * is);
            xhat.at(i, j) = xh;
            n.value.at(i, j) = gv.at(0, j) * xh + bv.at(0, j);
        }
    }
    n.saved.push_back(std::move(xhat));
    n.saved.push_back(std::move(inv_std));
    n.parents = {a.idx, gamma.idx, beta.idx};
    n.needs_grad = node(a).needs_grad || node(gamma).needs_grad || node(beta).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::gate_scale(Value m, Value gates, int expert) {
    const Tensor & mv = node(m).value;
    const Tensor & gv = node(gates).value;
    if (gv.rows() != mv.rows()) {
        throw ShapeError(fmt::format("gate_scale: rows of {} vs gates {}", mv.shape_str(), gv.shape_str()));
    }
    if (expert < 0 || expert >= gv.cols()) {
        throw IndexError(fmt::format("gate_scale: expert {} out of range [0,{})", expert, gv.cols()));
    }
    Node n;
    n.op = Op::gate_scale;
    n.value = mv;
    for (int i = 0; i < mv.rows(); ++i) {
        const float s = gv.at(i, expert);
        for (int j = 0; j < mv.cols(); ++j) {
            n.value.at(i, j) *= s;
        }
    }
    n.parents = {m.idx, gates.idx};
    n.iarg0 = expert;
    n.needs_grad = node(m).needs_grad || node(gates).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::attention(Value q, Value k, Value v, int n_heads) {
    const Tensor & qv = node(q).value;
    const Tensor & kv = node(k).value;
    const Tensor & vv = node(v).value;
    if (!qv.same_shape(kv) || !qv.same_shape(vv)) {
        throw ShapeError(fmt::format("attention: q {} k {} v {} must agree",
                                     qv.shape_str(), kv.shape_str(), vv.shape_str()));
    }
    if (n_heads < 1 || qv.cols() % n_heads != 0) {
        throw ShapeError(fmt::format("attention: width {} not divisible by {} heads", qv.cols(), n_heads));
    }
    const int len = qv.rows();
    const int dk = qv.cols() / n_heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));

    Node n;
    n.op = Op::attention;
    n.value = Tensor(len, qv.cols());
    for (int h = 0; h < n_heads; ++h) {
        const int off = h * dk;
        Tensor scores(len, len);
        for (int i = 0; i < len; ++i) {
            for (int j = 0; j < len; ++j) {
                double acc = 0.0;
                for (int p = 0; p < dk; ++p) {
                    acc += static_cast<double>(qv.at(i, off + p)) * kv.at(j, off + p);
                }
                scores.at(i, j) = static_cast<float>(acc) * inv_sqrt;
            }
        }
        Tensor probs = softmax_rows_plain(scores);
        for (int i = 0; i < len; ++i) {
            for (int p = 0; p < dk; ++p) {
                double acc = 0.0;
                for (int j = 0; j < len; ++j) {
                    acc += static_cast<double>(probs.at(i, j)) * vv.at(j, off + p);
                }
                n.value.at(i, off + p) = static_cast<float>(acc);
            }
        }
        n.saved.push_back(std::move(probs));
    }
    n.parents = {q.idx, k.idx, v.idx};
    n.iarg0 = n_heads;
    n.needs_grad = node(q).needs_grad || node(k).needs_grad || node(v).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::slice_rows(Value a, int start, int count) {
    const Tensor & av = node(a).value;
    if (start < 0 || count < 0 || start + count > av.rows()) {
        throw IndexError(fmt::format("slice_rows: [{}, {}) of {}", start, start + count, av.shape_str()));
    }
    Node n;
    n.op = Op::slice_rows;
    n.value = Tensor(count, av.cols());
    std::copy(av.data() + static_cast<size_t>(start) * av.cols(),
              av.data() + static_cast<size_t>(start + count) * av.cols(),
              n.value.data());
    n.parents = {a.idx};
    n.iarg0 = start;
    n.iarg1 = count;
    n.needs_grad = node(a).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::concat_rows(const std::vector<Value> & parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    int rows = 0;
    const int cols = node(parts[0]).value.cols();
    for (Value p : parts) {
        const Tensor & t = node(p).value;
        if (t.cols() != cols) {
            throw ShapeError(fmt::format("concat_rows: column mismatch {} vs [{}]", t.shape_str(), cols));
        }
        rows += t.rows();
    }
    Node n;
    n.op = Op::concat_rows;
    n.value = Tensor(rows, cols);
    int at = 0;
    n.needs_grad = false;
    for (Value p : parts) {
        const Tensor & t = node(p).value;
        std::copy(t.data(), t.data() + t.numel(), n.value.data() + static_cast<size_t>(at) * cols);
        at += t.rows();
        n.parents.push_back(p.idx);
        n.needs_grad = n.needs_grad || node(p).needs_grad;
    }
    return Value{push(std::move(n))};
}

Value Tape::mean_rows(Value a) {
    const Tensor & av = node(a).value;
    if (av.rows() < 1) {
        throw ShapeError("mean_rows: empty input");
    }
    Node n;
    n.op = Op::mean_rows;
    n.value = Tensor(1, av.cols());
    for (int j = 0; j < av.cols(); ++j) {
        double acc = 0.0;
        for (int i = 0; i < av.rows(); ++i) {
            acc += av.at(i, j);
        }
        n.value.at(0, j) = static_cast<float>(acc / av.rows());
    }
    n.parents = {a.idx};
    n.needs_grad = node(a).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::sum(Value a) {
    const Tensor & av = node(a).value;
    Node n;
    n.op = Op::sum;
    n.value = Tensor(1, 1);
    double acc = 0.0;
    for (int64_t i = 0; i < av.numel(); ++i) {
        acc += av[i];
    }
    n.value.at(0, 0) = static_cast<float>(acc);
    n.parents = {a.idx};
    n.needs_grad = node(a).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::embedding(Value table, const std::vector<int> & ids) {
    const Tensor & tv = node(table).value;
    Node n;
    n.op = Op::embedding;
    n.value = Tensor(static_cast<int>(ids.size()), tv.cols());
    for (size_t t = 0; t < ids.size(); ++t) {
        const int id = ids[t];
        if (id < 0 || id >= tv.rows()) {
            throw IndexError(fmt::format("embedding: token id {} out of range [0,{})", id, tv.rows()));
        }
        std::copy(tv.data() + static_cast<size_t>(id) * tv.cols(),
                  tv.data() + static_cast<size_t>(id + 1) * tv.cols(),
                  n.value.data() + t * tv.cols());
    }
    n.parents = {table.idx};
    n.ids = ids;
    n.needs_grad = node(table).needs_grad;
    return Value{push(std::move(n))};
}

Value Tape::cross_entropy(Value logits, const std::vector<int> & targets) {
    const Tensor & lv = node(logits).value;
    if (lv.rows() != static_cast<int>(targets.size())) {
        throw ShapeError(fmt::format("cross_entropy: {} logits rows vs {} targets",
                                     lv.rows(), targets.size()));
    }
    if (lv.rows() < 1 || lv.cols() < 1) {
        throw ShapeError("cross_entropy: empty logits");
    }
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= lv.cols()) {
            throw IndexError(fmt::format("cross_entropy: target {} out of range [0,{}) at row {}",
                                         targets[i], lv.cols(), i));
        }
    }
    Node n;
    n.op = Op::cross_entropy;
    Tensor probs = softmax_rows_plain(lv);
    double loss = 0.0;
    for (int i = 0; i < lv.rows(); ++i) {
        // log prob recomputed from the stable shifted logits to avoid log(0)
        const float * x = lv.data() + static_cast<size_t>(i) * lv.cols();
        float mx = x[0];
        for (int j = 1; j < lv.cols(); ++j) {
            mx = std::max(mx, x[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < lv.cols(); ++j) {
            denom += std::exp(static_cast<double>(x[j]) - mx);
        }
        loss -= (static_cast<double>(x[targets[i]]) - mx - std::log(denom));
    }
    n.value = Tensor(1, 1);
    n.value.at(0, 0) = static_cast<float>(loss / lv.rows());
    n.saved.push_back(std::move(probs));
    n.parents = {logits.idx};
    n.ids = targets;
    n.needs_grad = node(logits).needs_grad;
    return Value{push(std::move(n))};
}

void Tape::backward(Value loss) {
    if (backward_ran_) {
        throw Error("backward already ran on this tape; build a fresh tape per step");
    }
    backward_ran_ = true;
    Node & ln = node(loss);
    if (ln.value.rows() != 1 || ln.value.cols() != 1) {
        throw ShapeError(fmt::format("backward: loss must be a scalar, got {}", ln.value.shape_str()));
    }
    grad_buf(loss.idx).at(0, 0) = 1.0f;
    for (int32_t i = loss.idx; i >= 0; --i) {
        Node & n = nodes_[i];
        if (!n.needs_grad || n.grad.empty()) {
            continue;
        }
        if (n.op == Op::param) {
            if (n.parameter != nullptr && n.parameter->trainable) {
                axpy(n.parameter->grad, 1.0f, n.grad);
            }
            continue;
        }
        backprop_node(i);
    }
}

void Tape::backprop_node(int32_t idx) {
    Node & n = nodes_[idx];
    const Tensor & g = n.grad;
    auto wants = [&](int which) {
        return nodes_[n.parents[which]].needs_grad;
    };
    switch (n.op) {
        case Op::constant:
        case Op::param:
            break;
        case Op::matmul: {
            const Tensor & a = nodes_[n.parents[0]].value;
            const Tensor & b = nodes_[n.parents[1]].value;
            if (wants(0)) {
                axpy(grad_buf(n.parents[0]), 1.0f, saml::matmul_nt(g, b));
            }
            if (wants(1)) {
                axpy(grad_buf(n.parents[1]), 1.0f, saml::matmul_tn(a, g));
            }
            break;
        }
        case Op::matmul_nt: {
            const Tensor & a = nodes_[n.parents[0]].value;
            const Tensor & b = nodes_[n.parents[1]].value;
            if (wants(0)) {
                axpy(grad_buf(n.parents[0]), 1.0f, saml::matmul(g, b));
            }
            if (wants(1)) {
                axpy(grad_buf(n.parents[1]), 1.0f, saml::matmul_tn(g, a));
            }
            break;
        }
        case Op::add: {
            if (wants(0)) {
                axpy(grad_buf(n.parents[0]), 1.0f, g);
            }
            if (wants(1)) {
                axpy(grad_buf(n.parents[1]), 1.0f, g);
            }
            break;
        }
        case Op::scale: {
            if (wants(0)) {
                axpy(grad_buf(n.parents[0]), n.fval, g);
            }
            break;
        }
        case Op::add_row: {
            if (wants(0)) {
                axpy(grad_buf(n.parents[0]), 1.0f, g);
            }
            if (wants(1)) {
                Tensor & rg = grad_buf(n.parents[1]);
                for (int i = 0; i < g.rows(); ++i) {
                    for (int j = 0; j < g.cols(); ++j) {
                        rg.at(0, j) += g.at(i, j);
                    }
                }
            }
            break;
        }
        case Op::gelu: {
            if (!wants(0)) {
                break;
            }
            const Tensor & x = nodes_[n.parents[0]].value;
            Tensor & xg = grad_buf(n.parents[0]);
            for (int64_t i = 0; i < x.numel(); ++i) {
                const double xv = x[i];
                const double u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                const double t = std::tanh(u);
                const double du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                const double d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                xg[i] += static_cast<float>(d * g[i]);
            }
            break;
        }
        case Op::softmax_rows: {
            if (!wants(0)) {
                break;
            }
            const Tensor & y = n.value;
            Tensor & xg = grad_buf(n.parents[0]);
            for (int i = 0; i < y.rows(); ++i) {
                double dot = 0.0;
                for (int j = 0; j < y.cols(); ++j) {
                    dot += static_cast<double>(g.at(i, j)) * y.at(i, j);
                }
                for (int j = 0; j < y.cols(); ++j) {
                    xg.at(i, j) += static_cast<float>(y.at(i, j) * (g.at(i, j) - dot));
                }
            }
            break;
        }
        case Op::layer_norm: {
            const Tensor & xhat = n.saved[0];
            const Tensor & inv_std = n.saved[1];
            const Tensor & gamma = nodes_[n.parents[1]].value;
            const int cols = xhat.cols();
            if (wants(0)) {
                Tensor & xg = grad_buf(n.parents[0]);
                for (int i = 0; i < xhat.rows(); ++i) {
                    double mean_gy = 0.0, mean_gyx = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        const double gy = static_cast<double>(g.at(i, j)) * gamma.at(0, j);
                        mean_gy += gy;
                        mean_gyx += gy * xhat.at(i, j);
                    }
                    mean_gy /= cols;
                    mean_gyx /= cols;
                    const double is = inv_std.at(i, 0);
                    for (int j = 0; j < cols; ++j) {
                        const double gy = static_cast<double>(g.at(i, j)) * gamma.at(0, j);
                        xg.at(i, j) += static_cast<float>(is * (gy - mean_gy - xhat.at(i, j) * mean_gyx));
                    }
                }
            }
            if (wants(1)) {
                Tensor & gg = grad_buf(n.parents[1]);
                for (int i = 0; i < xhat.rows(); ++i) {
                    for (int j = 0; j < cols; ++j) {
                        gg.at(0, j) += g.at(i, j) * xhat.at(i, j);
                    }
                }
            }
            if (wants(2)) {
                Tensor & bg = grad_buf(n.parents[2]);
                for (int i = 0; i < xhat.rows(); ++i) {
                    for (int j = 0; j < cols; ++j) {
                        bg.at(0, j) += g.at(i, j);
                    }
                }
            }
            break;
        }
        case Op::gate_scale: {
            const Tensor & m = nodes_[n.parents[0]].value;
            const Tensor & gates = nodes_[n.parents[1]].value;
            const int e = n.iarg0;
            if (wants(0)) {
                Tensor & mg = grad_buf(n.parents[0]);
                for (int i = 0; i < m.rows(); ++i) {
                    const float s = gates.at(i, e);
                    for (int j = 0; j < m.cols(); ++j) {
                        mg.at(i, j) += s * g.at(i, j);
                    }
                }
            }
            if (wants(1)) {
                Tensor & gg = grad_buf(n.parents[1]);
                for (int i = 0; i < m.rows(); ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < m.cols(); ++j) {
                        dot += static_cast<double>(m.at(i, j)) * g.at(i, j);
                    }
                    gg.at(i, e) += static_cast<float>(dot);
                }
            }
            break;
        }
        case Op::attention: {
            const Tensor & qv = nodes_[n.parents[0]].value;
            const Tensor & kv = nodes_[n.parents[1]].value;
            const Tensor & vv = nodes_[n.parents[2]].value;
            const int n_heads = n.iarg0;
            const int len = qv.rows();
            const int dk = qv.cols() / n_heads;
            const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));
            for (int h = 0; h < n_heads; ++h) {
                const int off = h * dk;
                const Tensor & probs = n.saved[h];
                // dP = dC x V_h^T, dV = P^T x dC, computed on column slices
                Tensor dprobs(len, len);
                for (int i = 0; i < len; ++i) {
                    for (int j = 0; j < len; ++j) {
                        double acc = 0.0;
                        for (int p = 0; p < dk; ++p) {
                            acc += static_cast<double>(g.at(i, off + p)) * vv.at(j, off + p);
                        }
                        dprobs.at(i, j) = static_cast<float>(acc);
                    }
                }
                if (wants(2)) {
                    Tensor & vg = grad_buf(n.parents[2]);
                    for (int j = 0; j < len; ++j) {
                        for (int p = 0; p < dk; ++p) {
                            double acc = 0.0;
                            for (int i = 0; i < len; ++i) {
                                acc += static_cast<double>(probs.at(i, j)) * g.at(i, off + p);
                            }
                            vg.at(j, off + p) += static_cast<float>(acc);
                        }
                    }
                }
                // softmax backward into the score gradient
                Tensor dscores(len, len);
                for (int i = 0; i < len; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < len; ++j) {
                        dot += static_cast<double>(dprobs.at(i, j)) * probs.at(i, j);
                    }
                    for (int j = 0; j < len; ++j) {
                        dscores.at(i, j) = static_cast<float>(probs.at(i, j) * (dprobs.at(i, j) - dot)) * inv_sqrt;
                    }
                }
                if (wants(0)) {
                    Tensor & qg = grad_buf(n.parents[0]);
                    for (int i = 0; i < len; ++i) {
                        for (int p = 0; p < dk; ++p) {
                            double acc = 0.0;
                            for (int j = 0; j < len; ++j) {
                                acc += static_cast<double>(dscores.at(i, j)) * kv.at(j, off + p);
                            }
                            qg.at(i, off + p) += static_cast<float>(acc);
                        }
                    }
                }
                if (wants(1)) {
                    Tensor & kg = grad_buf(n.parents[1]);
                    for (int j = 0; j < len; ++j) {
                        for (int p = 0; p < dk; ++p) {
                            double acc = 0.0;
                            for (int i = 0; i < len; ++i) {
                                acc += static_cast<double>(dscores.at(i, j)) * qv.at(i, off + p);
                            }
                            kg.at(j, off + p) += static_cast<float>(acc);
                        }
                    }
                }
            }
            break;
        }
        case Op::slice_rows: {
            if (!wants(0)) {
                break;
            }
            Tensor & ag = grad_buf(n.parents[0]);
            const int start = n.iarg0;
            for (int i = 0; i < n.iarg1; ++i) {
                for (int j = 0; j < g.cols(); ++j) {
                    ag.at(start + i, j) += g.at(i, j);
                }
            }
            break;
        }
        case Op::concat_rows: {
            int at = 0;
            for (size_t p = 0; p < n.parents.size(); ++p) {
                const Tensor & pv = nodes_[n.parents[p]].value;
                if (nodes_[n.parents[p]].needs_grad) {
                    Tensor & pg = grad_buf(n.parents[p]);
                    for (int i = 0; i < pv.rows(); ++i) {
                        for (int j = 0; j < pv.cols(); ++j) {
                            pg.at(i, j) += g.at(at + i, j);
                        }
                    }
                }
                at += pv.rows();
            }
            break;
        }
        case Op::mean_rows: {
            if (!wants(0)) {
                break;
            }
            Tensor & ag = grad_buf(n.parents[0]);
            const float inv = 1.0f / ag.rows();
            for (int i = 0; i < ag.rows(); ++i) {
                for (int j = 0; j < ag.cols(); ++j) {
                    ag.at(i, j) += g.at(0, j) * inv;
                }
            }
            break;
        }
        case Op::sum: {
            if (!wants(0)) {
                break;
            }
            Tensor & ag = grad_buf(n.parents[0]);
            const float gv = g.at(0, 0);
            for (int64_t i = 0; i < ag.numel(); ++i) {
                ag[i] += gv;
            }
            break;
        }
        case Op::embedding: {
            if (!wants(0)) {
                break;
            }
            Tensor & tg = grad_buf(n.parents[0]);
            for (size_t t = 0; t < n.ids.size(); ++t) {
                for (int j = 0; j < g.cols(); ++j) {
                    tg.at(n.ids[t], j) += g.at(static_cast<int>(t), j);
                }
            }
            break;
        }
        case Op::cross_entropy: {
            if (!wants(0)) {
                break;
            }
            const Tensor & probs = n.saved[0];
            Tensor & lg = grad_buf(n.parents[0]);
            const float gv = g.at(0, 0) / probs.rows();
            for (int i = 0; i < probs.rows(); ++i) {
                for (int j = 0; j < probs.cols(); ++j) {
                    const float ind = (j == n.ids[i]) ? 1.0f : 0.0f;
                    lg.at(i, j) += gv * (probs.at(i, j) - ind);
                }
            }
            break;
        }
    }
}

} // namespace saml
