#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "bens/errors.hpp"
#include "bens/tensor.hpp"

namespace bens {

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;
    std::uint64_t generation = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
};

/// What a backward rule sees: its output gradient plus read access to the input values
/// and write access to the gradient accumulators of the inputs that need one
/// (nullptr otherwise).
template <class T>
struct BackwardArgs {
    const Tensor<T>& out_value;
    const Tensor<T>& out_grad;
    std::span<const Tensor<T>* const> in_values;
    std::span<Tensor<T>* const> in_grads;
};

template <class T>
using BackwardFn = std::function<void(const BackwardArgs<T>&)>;

/// Gradients of one backward pass, keyed by the leaf that produced them.
template <class T>
class Gradients {
   public:
    const Tensor<T>& of(const Var<T>& v) const {
        auto it = grads_.find(v.id);
        if (it == grads_.end()) throw TapeError("no gradient recorded for node " + std::to_string(v.id));
        return it->second;
    }
    bool contains(const Var<T>& v) const { return grads_.count(v.id) != 0; }
    std::size_t size() const { return grads_.size(); }

   private:
    friend class Tape<T>;
    std::unordered_map<std::size_t, Tensor<T>> grads_;
};

/// Linear record of a forward computation. Nodes are appended in execution order, so
/// every node's inputs precede it and a reverse sweep is a valid topological order.
template <class T>
class Tape {
   public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers an input or parameter. Gradients are tracked iff value.requires_grad().
    Var<T> leaf(Tensor<T> value) {
        bool rg = value.requires_grad();
        return push(Node{std::move(value), {}, rg, true, {}, nullptr});
    }

    Var<T> leaf(Tensor<T> value, bool requires_grad) {
        value.set_requires_grad(requires_grad);
        return leaf(std::move(value));
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

    /// Records an operation result. The backward rule is dropped when no input needs
    /// a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn<T> backward) {
        return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
    }

    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn<T> backward) {
        std::vector<std::size_t> ids;
        ids.reserve(inputs.size());
        bool rg = false;
        for (const auto& in : inputs) {
            check(in);
            ids.push_back(in.id);
            rg = rg || nodes_[in.id].requires_grad;
        }
        if (!rg) {
            backward = nullptr;
            ids.clear();
        }
        return push(Node{std::move(value), std::move(ids), rg, false, {}, std::move(backward)});
    }

    const Tensor<T>& value(const Var<T>& v) const {
        check(v);
        return nodes_[v.id].value;
    }

    bool requires_grad(const Var<T>& v) const {
        check(v);
        return nodes_[v.id].requires_grad;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Drops every node. Outstanding Vars become detached.
    void clear() {
        nodes_.clear();
        ++generation_;
    }

    /// Reverse sweep from a scalar output. Returns d(output)/d(leaf) for every leaf that
    /// requires a gradient; leaves the output does not depend on get zeros. The tape stays
    /// intact, so several backward passes over one forward are allowed.
    Gradients<T> backward(const Var<T>& output) {
        check(output);
        if (value(output).numel() != 1)
            throw TapeError("backward needs a scalar output, got shape " + shape_str(value(output).shape()));
        for (auto& n : nodes_) n.grad.reset();
        auto& out = nodes_[output.id];
        if (out.requires_grad) out.grad.emplace(out.value.shape(), T(1));

        std::vector<const Tensor<T>*> in_values;
        std::vector<Tensor<T>*> in_grads;
        for (std::size_t i = output.id + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (!node.grad || !node.backward) continue;
            in_values.clear();
            in_grads.clear();
            for (auto id : node.inputs) {
                Node& in = nodes_[id];
                in_values.push_back(&in.value);
                if (in.requires_grad) {
                    if (!in.grad) in.grad.emplace(in.value.shape(), T(0));
                    in_grads.push_back(&*in.grad);
                } else {
                    in_grads.push_back(nullptr);
                }
            }
            node.backward(BackwardArgs<T>{node.value, *node.grad, in_values, in_grads});
            if (!node.is_leaf) node.grad.reset();
        }

        Gradients<T> result;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (!n.is_leaf || !n.requires_grad) continue;
            if (n.grad)
                result.grads_.emplace(i, std::move(*n.grad));
            else
                result.grads_.emplace(i, Tensor<T>(n.value.shape(), T(0)));
            n.grad.reset();
        }
        return result;
    }

   private:
    struct Node {
        Tensor<T> value;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        bool is_leaf = false;
        std::optional<Tensor<T>> grad;
        BackwardFn<T> backward;
    };

    Var<T> push(Node node) {
        nodes_.push_back(std::move(node));
        return Var<T>{this, nodes_.size() - 1, generation_};
    }

    void check(const Var<T>& v) const {
        if (v.tape != this) throw TapeError("variable belongs to a different tape");
        if (v.generation != generation_ || v.id >= nodes_.size())
            throw TapeError("variable is detached: its tape was cleared");
    }

    std::vector<Node> nodes_;
    std::uint64_t generation_ = 0;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
    if (!tape) throw TapeError("variable is not attached to a tape");
    return tape->value(*this);
}

template <class T>
bool Var<T>::requires_grad() const {
    if (!tape) throw TapeError("variable is not attached to a tape");
    return tape->requires_grad(*this);
}

}  // namespace bens
