#include "fairgan/optim.hpp"

#include <cmath>

#include "fairgan/errors.hpp"

namespace fairgan {

Param& ParamSet::add(std::string name, Tensor init, bool trainable) {
    if (contains(name)) throw UsageError("duplicate parameter name: " + name);
    Param p;
    p.name = std::move(name);
    init.round_f32();
    p.m = Tensor(init.shape);
    p.v = Tensor(init.shape);
    p.value = std::move(init);
    p.trainable = trainable;
    params_.push_back(std::move(p));
    return params_.back();
}

Param& ParamSet::at(const std::string& name) {
    for (Param& p : params_) {
        if (p.name == name) return p;
    }
    throw UsageError("no parameter named " + name);
}

const Param& ParamSet::at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
}

bool ParamSet::contains(const std::string& name) const {
    for (const Param& p : params_) {
        if (p.name == name) return true;
    }
    return false;
}

size_t ParamSet::parameter_count() const {
    size_t n = 0;
    for (const Param& p : params_) n += p.value.numel();
    return n;
}

void ParamSet::clear_grads() {
    for (Param& p : params_) p.value.clear_grad();
}

void adam_step(ParamSet& params, const AdamConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw ConfigError("adam: lr must be positive");
    for (Param& p : params.all()) {
        if (!p.trainable) continue;
        if (p.value.grad.size() != p.value.numel()) {
            throw UsageError("adam: parameter '" + p.name + "' has no gradient; run backward first");
        }
        p.step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
        for (size_t i = 0; i < p.value.numel(); ++i) {
            const double g = p.value.grad[i];
            p.m.v[i] = cfg.beta1 * p.m.v[i] + (1.0 - cfg.beta1) * g;
            p.v.v[i] = cfg.beta2 * p.v.v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = p.m.v[i] / bc1;
            const double vhat = p.v.v[i] / bc2;
            p.value.v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        p.value.round_f32();
        p.m.round_f32();
        p.v.round_f32();
    }
    for (Param& p : params.all()) p.value.clear_grad();
}

}  // namespace fairgan
