// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlm/tensor.h"

#include <algorithm>
#include <sstream>

#include "forgetlm/errors.h"

namespace forgetlm {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw DimensionError("shape " + shape_str(shape) + " has a non-positive extent");
        }
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(n, 0.0f);
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<float> values) {
    const std::size_t n = shape_numel(shape);
    if (values.size() != n) {
        throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(n) + " values, got " +
                             std::to_string(values.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::parameter(Shape shape, std::vector<float> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
}

float Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
        impl_->grad.assign(impl_->data.size(), 0.0f);
    } else {
        impl_->grad.clear();
        impl_->grad.shrink_to_fit();
    }
}

void Tensor::zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f); }

bool Tensor::tracked_on(const Tape& tape) const noexcept {
    return impl_->requires_grad || (impl_->node >= 0 && impl_->tape == &tape);
}

Tensor Tensor::detach() const { return from(impl_->shape, impl_->data); }

Tensor Tensor::clone() const {
    Tensor t = detach();
    if (impl_->requires_grad) t.set_requires_grad(true);
    return t;
}

bool Tape::needs_record(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [this](const Tensor* t) { return t->tracked_on(*this); });
}

bool Tape::needs_record(std::span<const Tensor> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [this](const Tensor& t) { return t.tracked_on(*this); });
}

void Tape::record(Tensor& output, std::vector<Tensor> inputs, BackwardFn backward) {
    auto& out = output.impl();
    out.tape = this;
    out.node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw DimensionError("backward needs a scalar loss, got shape " +
                             (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    const auto& li = loss.impl();
    if (li.tape != this || li.node < 0) {
        throw PreconditionError("backward: loss was not recorded on this tape");
    }
    // Intermediates restart from zero; leaves keep what they already hold.
    for (auto& node : nodes_) {
        auto& oi = node.output.impl();
        if (!oi.requires_grad) oi.grad.assign(oi.data.size(), 0.0f);
    }
    auto& seed = const_cast<TensorImpl&>(li);
    seed.grad[0] += 1.0f;
    for (int i = li.node; i >= 0; --i) {
        auto& node = nodes_[static_cast<std::size_t>(i)];
        node.backward(node.output.impl().grad);
    }
}

void Tape::clear() { nodes_.clear(); }

} // namespace forgetlm
