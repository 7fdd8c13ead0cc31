// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float tensors and the reverse-mode tape that records
// operations over them.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace forgetlm {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad; // sized to data when the tensor is tracked
    bool requires_grad = false;
    const Tape* tape = nullptr; // tape that recorded the producing op
    int node = -1;
};

// Shared handle to a tensor. Copies alias the same storage; use clone() for a deep copy.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor from(Shape shape, std::vector<float> values);
    // Leaf that accumulates gradient during backward.
    static Tensor parameter(Shape shape, std::vector<float> values);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    // Handle semantics: a const handle still views mutable storage.
    std::span<float> data() const { return impl_->data; }
    std::span<float> grad() const { return impl_->grad; }
    float item() const;

    bool requires_grad() const noexcept { return impl_->requires_grad; }
    void set_requires_grad(bool on);
    void zero_grad() const;

    // True if backward on `tape` would deliver gradient to this tensor.
    bool tracked_on(const Tape& tape) const noexcept;

    // Untracked deep copy of the values.
    Tensor detach() const;
    // Deep copy preserving requires_grad (gradient buffer zeroed).
    Tensor clone() const;

    TensorImpl& impl() { return *impl_; }
    const TensorImpl& impl() const { return *impl_; }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

// Records operations in execution order and replays their backward rules in
// exact reverse order. Not shareable across concurrent training loops.
class Tape {
  public:
    // Backward rule: receives the gradient of the op output and accumulates into
    // the grads of whichever inputs are tracked.
    using BackwardFn = std::function<void(std::span<const float> grad_out)>;

    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // True when at least one input is tracked on this tape, i.e. the op must be recorded.
    bool needs_record(std::initializer_list<const Tensor*> inputs) const;
    bool needs_record(std::span<const Tensor> inputs) const;

    // Attaches `output` to the tape with its backward rule. Inputs must already be
    // on the tape or be leaves, which keeps the node list topologically ordered.
    void record(Tensor& output, std::vector<Tensor> inputs, BackwardFn backward);

    // Seeds d(loss)/d(loss) = 1 and walks the nodes in reverse. Intermediate grads are
    // reset at the start of every call; leaf parameters accumulate across calls.
    void backward(const Tensor& loss);

    void clear();

  private:
    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };
    bool recording_;
    std::vector<Node> nodes_;
};

} // namespace forgetlm
