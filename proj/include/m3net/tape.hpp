#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "m3net/errors.hpp"
#include "m3net/tensor.hpp"

namespace m3net {

template <typename T>
class Tape;

// Handle to a node on a Tape. Cheap to copy; invalid once the Tape dies.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    bool defined() const { return tape != nullptr; }
    const TensorData<T>& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t numel() const { return value().numel(); }
    bool requires_grad() const;
    T item() const {
        const auto& v = value();
        if (v.numel() != 1) throw ShapeError("item(): tensor is not scalar");
        return v.data[0];
    }
};

// Reverse-mode tape. Node order is creation order, which is a topological
// order of the DAG by construction; backward walks it once in reverse and
// accumulates into input gradients.
template <typename T>
class Tape {
public:
    struct Node {
        TensorData<T> value;
        TensorData<T> grad;  // allocated on demand during backward
        bool requires_grad = false;
        bool grad_ready = false;
        std::vector<std::size_t> inputs;
        // Propagates this node's grad into its inputs. Null for leaves.
        std::function<void(Tape&, Node&)> backward;
        std::string label;  // set for named leaves (parameters)
    };

    Var<T> leaf(TensorData<T> value, bool requires_grad, std::string label = {}) {
        check_finite(value, label.empty() ? "leaf" : label.c_str());
        nodes_.push_back(Node{std::move(value), {}, requires_grad, false, {}, nullptr,
                              std::move(label)});
        return Var<T>{this, nodes_.size() - 1};
    }

    Var<T> constant(TensorData<T> value) { return leaf(std::move(value), false); }

    Var<T> make(TensorData<T> value, std::vector<std::size_t> inputs,
                std::function<void(Tape&, Node&)> backward, const char* op_name) {
        check_finite(value, op_name);
        bool rg = false;
        for (std::size_t i : inputs) rg = rg || nodes_[i].requires_grad;
        nodes_.push_back(Node{std::move(value), {}, rg, false, std::move(inputs),
                              rg ? std::move(backward) : nullptr, {}});
        return Var<T>{this, nodes_.size() - 1};
    }

    Node& node(std::size_t id) { return nodes_[id]; }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    // Accumulates dL/d(node id); never overwrites prior contributions.
    void accumulate(std::size_t id, const T* contrib, std::size_t n) {
        Node& nd = nodes_[id];
        if (!nd.requires_grad) return;
        ensure_grad(nd);
        if (nd.grad.numel() != n) throw ShapeError("gradient accumulate: size mismatch");
        T* g = nd.grad.data.data();
        for (std::size_t i = 0; i < n; ++i) g[i] += contrib[i];
    }

    TensorData<T>& grad_buffer(std::size_t id) {
        Node& nd = nodes_[id];
        ensure_grad(nd);
        return nd.grad;
    }

    // Runs reverse-mode accumulation from a scalar loss. Each record is
    // visited exactly once. Gradients of all requires_grad nodes reachable
    // from the loss are populated; unreachable parameters keep zero grads.
    void backward(const Var<T>& loss) {
        if (loss.tape != this) throw ShapeError("backward: loss from another tape");
        Node& ln = nodes_[loss.id];
        if (ln.value.numel() != 1) throw ShapeError("backward: loss must be scalar");
        if (!ln.requires_grad)
            throw ShapeError("backward: loss does not depend on any tracked parameter");
        for (auto& nd : nodes_) {
            nd.grad_ready = false;
        }
        ensure_grad(ln);
        ln.grad.data[0] = T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& nd = nodes_[i];
            if (!nd.requires_grad || !nd.grad_ready || !nd.backward) continue;
            nd.backward(*this, nd);
        }
    }

    // Gradient of the last backward() w.r.t. the given node (zeros if untouched).
    TensorData<T> grad(const Var<T>& v) const {
        const Node& nd = nodes_[v.id];
        if (!nd.grad_ready) return TensorData<T>::zeros(nd.value.shape);
        return nd.grad;
    }

    // Collects gradients for named leaves.
    std::unordered_map<std::string, TensorData<T>> grad_map() const {
        std::unordered_map<std::string, TensorData<T>> out;
        for (const auto& nd : nodes_) {
            if (!nd.label.empty() && nd.requires_grad) {
                out[nd.label] =
                    nd.grad_ready ? nd.grad : TensorData<T>::zeros(nd.value.shape);
            }
        }
        return out;
    }

private:
    void ensure_grad(Node& nd) {
        if (!nd.grad_ready) {
            if (nd.grad.shape != nd.value.shape) nd.grad = TensorData<T>::zeros(nd.value.shape);
            else std::fill(nd.grad.data.begin(), nd.grad.data.end(), T(0));
            nd.grad_ready = true;
        }
    }

    static void check_finite(const TensorData<T>& v, const char* what) {
        if (!v.all_finite())
            throw NumericError(std::string("non-finite value produced by ") + what);
    }

    std::deque<Node> nodes_;
};

template <typename T>
const TensorData<T>& Var<T>::value() const {
    return tape->node(id).value;
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape->node(id).requires_grad;
}

}  // namespace m3net
