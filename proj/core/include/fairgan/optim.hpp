#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fairgan/tensor.hpp"

namespace fairgan {

// Named parameter with its Adam state. Values and moments live on the f32
// lattice so checkpoints (f32 payloads) round-trip bit-exactly and resumed
// runs replay the same arithmetic.
struct Param {
    std::string name;
    Tensor value;
    Tensor m;  // first moment
    Tensor v;  // second moment
    int64_t step = 0;
    bool trainable = true;
};

class ParamSet {
public:
    Param& add(std::string name, Tensor init, bool trainable = true);

    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<Param>& all() { return params_; }
    const std::vector<Param>& all() const { return params_; }
    size_t size() const { return params_.size(); }

    size_t parameter_count() const;
    void clear_grads();

private:
    std::vector<Param> params_;
};

struct AdamConfig {
    double lr = 2e-3;
    double beta1 = 0.0;
    double beta2 = 0.99;
    double eps = 1e-8;
};

// One bias-corrected Adam update over every trainable parameter whose grad
// is populated. Frozen parameters are untouched; all grads are cleared.
void adam_step(ParamSet& params, const AdamConfig& cfg);

}  // namespace fairgan
