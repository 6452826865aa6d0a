#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "m3net/rng.hpp"
#include "m3net/tape.hpp"
#include "m3net/tensor.hpp"

namespace m3net {

template <typename T>
struct Param {
    std::string name;
    TensorData<T> value;
    bool trainable = true;
    // AdamW moments, allocated on first optimizer step.
    TensorData<T> m, v;
};

// Ordered, named parameter set. Insertion order is the canonical record order
// for checkpoints, so subsets serialize byte-identically across models.
template <typename T>
class ParamStore {
public:
    Param<T>& add(std::string name, TensorData<T> value, bool trainable = true) {
        if (index_.count(name)) throw ShapeError("param already exists: " + name);
        index_[name] = params_.size();
        params_.push_back(Param<T>{std::move(name), std::move(value), trainable, {}, {}});
        return params_.back();
    }

    // Fan-in-scaled uniform init, seeded by (seed, name) so creation order is
    // irrelevant to the drawn values.
    Param<T>& add_uniform(const std::string& name, Shape shape, std::size_t fan_in,
                          std::uint64_t seed, bool trainable = true) {
        Rng rng = Rng(seed).derive("init:" + name);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        TensorData<T> t(std::move(shape));
        for (auto& x : t.data) x = static_cast<T>(rng.uniform(-bound, bound));
        return add(name, std::move(t), trainable);
    }

    Param<T>& add_const(const std::string& name, Shape shape, T fill, bool trainable = true) {
        return add(name, TensorData<T>::full(std::move(shape), fill), trainable);
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Param<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ShapeError("no such param: " + name);
        return params_[it->second];
    }
    const Param<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ShapeError("no such param: " + name);
        return params_[it->second];
    }

    std::vector<Param<T>>& all() { return params_; }
    const std::vector<Param<T>>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& p : params_)
            if (p.name.rfind(prefix, 0) == 0) out.push_back(p.name);
        return out;
    }

    std::size_t count_scalars(bool trainable_only) const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (!trainable_only || p.trainable) n += p.value.numel();
        return n;
    }

    void set_trainable(const std::string& prefix, bool flag) {
        for (auto& p : params_)
            if (p.name.rfind(prefix, 0) == 0) p.trainable = flag;
    }

    void reset_opt_state() {
        for (auto& p : params_) {
            p.m = TensorData<T>();
            p.v = TensorData<T>();
        }
    }

private:
    std::vector<Param<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Tape leaves for every parameter. requires_grad follows trainability unless
// forced (attribution needs activation gradients through frozen weights).
template <typename T>
struct LeafMap {
    std::unordered_map<std::string, Var<T>> vars;

    Var<T> at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw ShapeError("no leaf bound for param: " + name);
        return it->second;
    }
};

template <typename T>
LeafMap<T> bind_leaves(Tape<T>& tape, const ParamStore<T>& store, bool force_grad = false) {
    LeafMap<T> m;
    for (const auto& p : store.all())
        m.vars.emplace(p.name, tape.leaf(p.value, force_grad || p.trainable, p.name));
    return m;
}

}  // namespace m3net
