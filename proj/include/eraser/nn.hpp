#pragma once
// Layer building blocks over the autograd Vars plus the Adam optimizer.
// Layers own long-lived parameter nodes; a forward call just wires them into
// the current graph.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "eraser/autograd.hpp"
#include "eraser/rng.hpp"
#include "eraser/tensor.hpp"

namespace eraser::nn {

struct Param {
    std::string name;
    ag::Var var;
};
using ParamList = std::vector<Param>;

// He-style init: W ~ N(0, sqrt(2/fan_in)), b = 0.
struct Linear {
    ag::Var W, b;  // W [out,in], b [out]

    Linear() = default;
    Linear(int in, int out, Rng& rng) {
        Tensor w({out, in});
        const double std = std::sqrt(2.0 / in);
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, std);
        W = ag::make_param(std::move(w));
        b = ag::make_param(Tensor({out}));
    }
    static Linear zeros(int in, int out) {
        Linear l;
        l.W = ag::make_param(Tensor({out, in}));
        l.b = ag::make_param(Tensor({out}));
        return l;
    }

    ag::Var operator()(const ag::Var& x) const { return ag::linear(x, W, b); }

    int in_features() const { return W->value.dim(1); }
    int out_features() const { return W->value.dim(0); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".W", W});
        out.push_back({prefix + ".b", b});
    }
};

struct Conv2d {
    ag::Var W, b;  // W [oc,ic,k,k], b [oc]

    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int k, Rng& rng) {
        Tensor w({out_ch, in_ch, k, k});
        const double std = std::sqrt(2.0 / (in_ch * k * k));
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, std);
        W = ag::make_param(std::move(w));
        b = ag::make_param(Tensor({out_ch}));
    }

    ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, W, b); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".W", W});
        out.push_back({prefix + ".b", b});
    }
};

inline std::int64_t param_count(const ParamList& params) {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.var->value.numel();
    return n;
}

inline void zero_grads(const ParamList& params) {
    for (const auto& p : params) p.var->zero_grad();
}

// Adam with the classic L2 coupling: weight decay is added to the gradient.
// Moment state is keyed per parameter node with its own step counter, so
// optimizing different subsets (head-only fine-tuning, flow vs classifier)
// keeps bias correction right for each tensor.
class Adam {
public:
    explicit Adam(double lr, double weight_decay = 0.0)
        : lr_(lr), weight_decay_(weight_decay) {}

    double& lr() { return lr_; }

    void step(const ParamList& params) {
        for (const auto& p : params) {
            ag::Node* node = p.var.get();
            if (node->grad.numel() == 0) continue;  // never touched by backward
            Slot& s = slots_[node];
            if (s.m.numel() == 0) {
                s.m = Tensor(node->value.shape());
                s.v = Tensor(node->value.shape());
            }
            ++s.t;
            const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
            const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
            for (std::int64_t i = 0; i < node->value.numel(); ++i) {
                const double g = node->grad[i] + weight_decay_ * node->value[i];
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                node->value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void reset() { slots_.clear(); }

private:
    struct Slot {
        Tensor m, v;
        long t = 0;
    };
    double lr_;
    double weight_decay_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::unordered_map<ag::Node*, Slot> slots_;
};

// Plain SGD, used by the erasure fine-tuning loop where fresh optimizer state
// per invocation matters more than adaptivity.
inline void sgd_step(const ParamList& params, double lr) {
    for (const auto& p : params) {
        ag::Node* node = p.var.get();
        if (node->grad.numel() == 0) continue;
        for (std::int64_t i = 0; i < node->value.numel(); ++i)
            node->value[i] -= lr * node->grad[i];
    }
}

}  // namespace eraser::nn
