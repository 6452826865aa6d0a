#pragma once

#include <cmath>
#include <unordered_map>

#include "m3net/params.hpp"
#include "m3net/tensor.hpp"

namespace m3net {

// lr(t) = lr_min + 1/2 (lr_max - lr_min) (1 + cos(pi t / T))
inline double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min = 0.0) {
    if (total == 0) return lr_max;
    if (t > total) throw ShapeError("cosine_lr: step beyond schedule");
    const double frac = static_cast<double>(t) / static_cast<double>(total);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

// AdamW: bias-corrected adaptive moments plus decay applied directly to the
// weights, independent of the gradient step. Frozen parameters are skipped.
template <typename T>
class AdamW {
public:
    AdamW(T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore<T>& store,
              const std::unordered_map<std::string, TensorData<T>>& grads, T lr,
              T weight_decay) {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (auto& p : store.all()) {
            if (!p.trainable) continue;
            auto it = grads.find(p.name);
            if (it == grads.end()) continue;
            const TensorData<T>& g = it->second;
            if (g.shape != p.value.shape)
                throw ShapeError("optimizer: gradient shape mismatch for " + p.name);
            if (p.m.numel() != p.value.numel()) {
                p.m = TensorData<T>::zeros(p.value.shape);
                p.v = TensorData<T>::zeros(p.value.shape);
            }
            for (std::size_t i = 0; i < p.value.numel(); ++i) {
                const T gi = g.data[i];
                p.m.data[i] = beta1_ * p.m.data[i] + (T(1) - beta1_) * gi;
                p.v.data[i] = beta2_ * p.v.data[i] + (T(1) - beta2_) * gi * gi;
                const T mhat = p.m.data[i] / bc1;
                const T vhat = p.v.data[i] / bc2;
                const T prev = p.value.data[i];
                p.value.data[i] =
                    prev - lr * (mhat / (std::sqrt(vhat) + eps_)) - lr * weight_decay * prev;
            }
        }
    }

    std::size_t steps() const { return t_; }
    void reset() { t_ = 0; }

private:
    T beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

}  // namespace m3net
