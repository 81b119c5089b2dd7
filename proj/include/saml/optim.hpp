#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "saml/tape.hpp"

namespace saml {

struct OptimConfig {
    enum class Kind { sgd, adam };
    Kind kind = Kind::adam;
    float lr = 5e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;

    static Kind kind_from_string(const std::string & s);
    std::string kind_string() const;
};

/// Updates trainable parameters in place and zeroes gradients afterward.
/// Adam moments are kept per parameter and advance only on steps where
/// that parameter is trainable.
class Optimizer {
public:
    explicit Optimizer(OptimConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<Parameter *> & params);

    const OptimConfig & config() const { return cfg_; }

private:
    struct Slot {
        Tensor m, v;
        int64_t t = 0;
    };

    OptimConfig cfg_;
    std::unordered_map<Parameter *, Slot> state_;
};

} // namespace saml
