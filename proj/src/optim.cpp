#include "saml/optim.hpp"

#include <cmath>

#include <fmt/format.h>

#include "saml/error.hpp"

namespace saml {

OptimConfig::Kind OptimConfig::kind_from_string(const std::string & s) {
    if (s == "sgd") {
        return Kind::sgd;
    }
    if (s == "adam") {
        return Kind::adam;
    }
    throw ConfigError(fmt::format("unknown optimizer '{}', expected sgd or adam", s));
}

std::string OptimConfig::kind_string() const {
    return kind == Kind::sgd ? "sgd" : "adam";
}

void Optimizer::step(const std::vector<Parameter *> & params) {
    for (Parameter * p : params) {
        if (!p->trainable) {
            p->zero_grad();
            continue;
        }
        if (!p->grad.all_finite()) {
            throw NumericError(fmt::format("non-finite gradient in parameter '{}'", p->name));
        }
        if (cfg_.kind == OptimConfig::Kind::sgd) {
            axpy(p->value, -cfg_.lr, p->grad);
        } else {
            Slot & s = state_[p];
            if (s.m.empty()) {
                s.m = Tensor::zeros(p->value.rows(), p->value.cols());
                s.v = Tensor::zeros(p->value.rows(), p->value.cols());
            }
            ++s.t;
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                const float g = p->grad[i];
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0f - cfg_.beta1) * g;
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0f - cfg_.beta2) * g * g;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                p->value[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
        p->zero_grad();
    }
}

} // namespace saml
