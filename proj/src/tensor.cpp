#include "cellnas/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "cellnas/errors.hpp"

namespace cellnas {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
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

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto impl = std::make_shared<Impl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " + std::to_string(values.size()));
    }
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(impl_->shape));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }

std::span<double> Tensor::grad() const {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

bool Tensor::has_grad() const { return impl_->grad.size() == impl_->data.size(); }

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::clone() const {
    auto impl = std::make_shared<Impl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
    Tensor t = clone();
    t.set_requires_grad(false);
    return t;
}

void Tensor::assign(const Tensor& other) {
    if (other.shape() != shape()) {
        throw DimensionError("assign: shape " + shape_str(other.shape()) + " into " + shape_str(shape()));
    }
    std::copy(other.data().begin(), other.data().end(), impl_->data.begin());
}

bool Tape::needs_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

bool Tape::needs_grad(std::span<const Tensor> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

void Tape::record(Tensor output, std::function<void()> backward) {
    output.set_requires_grad(true);
    records_.push_back({std::move(output), std::move(backward)});
}

void Tape::backward(Tensor loss) {
    if (loss.numel() != 1) {
        throw UsageError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;  // detached: every leaf keeps a zero contribution

    const bool on_tape = std::any_of(records_.begin(), records_.end(),
                                     [&](const Record& r) { return r.output.same(loss); });
    if (!on_tape) {
        // A requires_grad leaf used directly as the loss.
        loss.grad()[0] += 1.0;
        return;
    }
    for (auto& r : records_) r.output.zero_grad();
    loss.grad()[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
}

}  // namespace cellnas
